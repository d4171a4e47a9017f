import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkws.errors import ConfigError, ConstraintViolation, DataError, TrainingDiverged
from mkws.evaluation import calibrate_threshold
from mkws.net import build_attention, build_base, save_checkpoint, sigmoid
from mkws.training import (ConfidenceTable, TrainConfig, TrainLog, UtteranceBatch, batch_loss, evaluate_loss,
                           finetune_attention, finetune_channel, forward_backward, frame_ce_loss,
                           grid_search_thresholds, maxpool_loss, require_feasible, threshold_grid, train_base,
                           train_model)

EASY_TRAIN = dict(epochs=10, batch_size=16, seed=0)


# -- losses ------------------------------------------------------------------

def test_maxpool_loss_negative_example():
    assert maxpool_loss([0.2, 0.7, 0.4], 0) == pytest.approx(-math.log(0.3), abs=1e-12)
    assert maxpool_loss([0.2, 0.7, 0.4], 0) == pytest.approx(1.2040, abs=1e-4)


def test_maxpool_loss_two_parts():
    x = np.array([[0.1, 0.5], [0.8, 0.2], [0.3, 0.4]])
    assert maxpool_loss(x, 1) == pytest.approx(-math.log(0.4), abs=1e-12)
    assert maxpool_loss(x, 1) == pytest.approx(0.9163, abs=1e-4)


def test_maxpool_loss_saturated_positive():
    assert maxpool_loss([0.3, 1.0], 1) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(DataError):
        maxpool_loss(np.zeros(0), 1)


def test_frame_ce_examples():
    assert frame_ce_loss([0.0, 1.0, 1.0], [0, 1, 1]) == pytest.approx(0.0, abs=1e-6)
    assert frame_ce_loss(np.full(7, 0.5), np.arange(7) % 2) == pytest.approx(math.log(2), abs=1e-12)
    assert frame_ce_loss([0.9, 0.1], [1, 0]) == pytest.approx(-(math.log(0.9) * 2) / 2, abs=1e-12)
    assert frame_ce_loss([0.9, 0.1], [1, 0]) == pytest.approx(0.1054, abs=1e-4)
    with pytest.raises(ConfigError):
        frame_ce_loss([0.5], [0, 1])


@settings(max_examples=60)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(0, 1))
def test_losses_are_nonnegative(p, y):
    p = np.array(p)
    assert maxpool_loss(p, y) >= 0
    assert frame_ce_loss(p, np.full(len(p), y)) >= 0


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_logit_domain_loss_matches_probability_domain(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 3, (4, 25))
    labels = np.array([1, 0, 1, 0])
    targets = np.zeros((4, 25))
    targets[0, 5:12] = 1
    targets[2, 15:20] = 1
    ce, mp, total, _ = batch_loss(logits, targets, labels, 0.5)
    p = sigmoid(logits)
    ce_ref = np.mean([frame_ce_loss(p[b], targets[b]) for b in range(4)])
    mp_ref = np.mean([maxpool_loss(p[b], labels[b]) for b in range(4)])
    assert ce == pytest.approx(ce_ref, rel=1e-9)
    assert mp == pytest.approx(mp_ref, rel=1e-9)
    assert total == pytest.approx(ce_ref + 0.5 * mp_ref, rel=1e-9)


def test_zero_maxpool_weight_is_pure_frame_ce():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 2, (3, 10))
    y = (rng.random((3, 10)) < 0.3).astype(float)
    labels = (y.sum(axis=1) > 0).astype(float)
    ce, _, total, d = batch_loss(logits, y, labels, 0.0)
    assert total == ce
    assert np.allclose(d, (sigmoid(logits) - y) / 30, rtol=1e-12, atol=1e-15)


def test_maxpool_gradient_goes_to_first_argmax():
    logits = np.array([[0.0, 2.0, 2.0, 1.0]])
    _, _, _, d_mp = batch_loss(logits, np.zeros((1, 4)), np.array([0]), 1.0)
    _, _, _, d_ce = batch_loss(logits, np.zeros((1, 4)), np.array([0]), 0.0)
    extra = d_mp - d_ce
    assert extra[0, 1] > 0 and np.count_nonzero(extra) == 1


def test_negative_batch_cannot_hold_positive_frames():
    with pytest.raises(DataError):
        UtteranceBatch(np.zeros((1, 1, 5, 40)), np.ones((1, 5)), np.zeros(1))


# -- gradients ---------------------------------------------------------------

def _batch(c, b=2, t=20, seed=0):
    rng = np.random.default_rng(seed)
    y = np.zeros((b, t))
    y[0, 8:14] = 1
    labels = (y.sum(axis=1) > 0).astype(float)
    return UtteranceBatch(rng.normal(-8, 3, (c, b, t, 40)), y, labels)


def _loss(model, batch):
    return forward_backward(model, batch, 0.5)[0][2]


def _max_rel_error(model, batch, per_tensor=6, h=1e-4, seed=0):
    _, grads = forward_backward(model, batch, 0.5)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, v in model.parameters().items():
        flat = v.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = _loss(model, batch)
            flat[i] = old - h
            down = _loss(model, batch)
            flat[i] = old
            num = (up - down) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def test_base_gradients_match_finite_differences():
    net = build_base("desk", seed=1, n_layers=2)
    assert _max_rel_error(net, _batch(1)) < 1e-4


def test_saturated_negative_gives_no_learning_signal():
    net = build_base("desk", seed=1, n_layers=2)
    net.params["out.b"][0] = -40.0
    batch = UtteranceBatch(_batch(1).features, np.zeros((2, 20)), np.zeros(2))
    _, grads = forward_backward(net, batch, 0.5)
    assert math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())) < 1e-3


def test_duplicate_channels_give_symmetric_gradients():
    att = build_attention(build_base("desk", seed=1, n_layers=2), ["a", "b"], seed=2, zero_output=False)
    one = _batch(1, seed=3)
    dup = UtteranceBatch(np.concatenate([one.features, one.features]), one.frame_targets, one.labels)
    post, cache = att.forward(dup.features, keep_cache=True)
    _, _, _, dlogits = batch_loss(cache[3][2], dup.frame_targets, dup.labels, 0.5)
    _, dz = att.backward(cache, dlogits, need_dx=True)
    assert np.array_equal(dz[0], dz[1])
    alpha = cache[1].alpha
    assert np.array_equal(alpha[0], alpha[1])


def test_non_finite_gradients_abort():
    net = build_base("desk", seed=1, n_layers=2)
    net.params["out.w"][0] = np.nan
    with pytest.raises(TrainingDiverged):
        forward_backward(net, _batch(1), 0.5)


# -- training loops ----------------------------------------------------------

@pytest.fixture(scope="module")
def trained_easy(easy_corpus):
    model, log = train_base(easy_corpus, TrainConfig(**EASY_TRAIN), build_base("desk", seed=0))
    return model, log


def test_easy_set_trains_below_point_two(trained_easy):
    _, log = trained_easy
    assert len(log.rows) == 10
    assert log.totals[-1] < 0.2


def test_training_is_deterministic(easy_corpus, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=16, seed=3)
    a, la = train_base(easy_corpus, cfg, build_base("desk", seed=5))
    b, lb = train_base(easy_corpus, cfg, build_base("desk", seed=5))
    save_checkpoint(tmp_path / "a.ckpt", a)
    save_checkpoint(tmp_path / "b.ckpt", b)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert la.totals == lb.totals


def test_zero_weight_training_logs_pure_frame_ce(easy_corpus):
    _, log = train_base(easy_corpus, TrainConfig(epochs=1, batch_size=16, maxpool_weight=0.0), build_base("desk"))
    assert log.rows[0]["total"] == log.rows[0]["frame_ce"]


def test_training_log_csv(trained_easy, tmp_path):
    trained_easy[1].write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,frame_ce,maxpool,total,wall_seconds"
    assert len(lines) == 11


class _Subset:
    def __init__(self, corpus, keep):
        self.corpus, self.keep = corpus, list(keep)
        self.items = [corpus.items[i] for i in self.keep]

    def __len__(self):
        return len(self.keep)

    def has_channel(self, tag):
        return self.corpus.has_channel(tag)

    def has_positives_and_negatives(self):
        labels = {bool(r["positive"]) for r in self.items}
        return labels == {True, False}

    def batch(self, indices, tags, crop, rng):
        return self.corpus.batch([self.keep[i] for i in indices], tags, crop, rng)


def test_training_data_errors(easy_corpus):
    cfg = TrainConfig(epochs=1)
    with pytest.raises(DataError):
        train_base(_Subset(easy_corpus, []), cfg, build_base("desk"))
    with pytest.raises(DataError):
        train_base(_Subset(easy_corpus, range(10)), cfg, build_base("desk"))
    with pytest.raises(DataError):
        train_model(build_base("desk"), easy_corpus, ["bf999"], cfg)
    with pytest.raises(ConfigError):
        train_base(easy_corpus, TrainConfig(maxpool_weight=1.5), build_base("desk"))


def test_runaway_learning_rate_aborts(easy_corpus):
    with pytest.raises(TrainingDiverged):
        train_base(easy_corpus, TrainConfig(epochs=3, lr=1e4, grad_clip=0.0), build_base("desk"))


def test_finetune_on_same_data_does_not_raise_loss(trained_easy, easy_corpus):
    base, _ = trained_easy
    cfg = TrainConfig(epochs=2, batch_size=16, seed=4)
    tuned, _ = finetune_channel(base, easy_corpus, "omni", cfg)
    assert tuned.channel == "omni" and tuned is not base
    assert evaluate_loss(tuned, easy_corpus, ["omni"], cfg) <= evaluate_loss(base, easy_corpus, ["omni"], cfg)


def test_finetune_tags_the_channel_and_keeps_the_base(trained_easy, easy_corpus):
    base, _ = trained_easy
    before = {k: v.copy() for k, v in base.params.items()}
    tuned, _ = finetune_channel(base, easy_corpus, "anc", TrainConfig(epochs=1, batch_size=16))
    assert tuned.channel == "anc"
    assert all(np.array_equal(before[k], base.params[k]) for k in before)


def test_finetune_errors(tmp_path, easy_corpus, trained_easy):
    with pytest.raises(DataError):
        finetune_channel(tmp_path / "none.ckpt", easy_corpus, "anc", TrainConfig(epochs=1))
    with pytest.raises(DataError):
        finetune_channel(trained_easy[0], easy_corpus, "bf999", TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        finetune_attention(trained_easy[0], easy_corpus, ["omni"], TrainConfig(epochs=1))


def test_zero_keys_net_starts_uniform(trained_easy):
    att = build_attention(trained_easy[0], ["omni", "anc"], zero_output=True)
    _, cache = att.forward(np.random.default_rng(0).normal(-8, 3, (2, 30, 40)), keep_cache=True)
    assert np.array_equal(cache[1].alpha, np.full((2, 30, 40), 0.5))


def test_attention_finetune_decreases_loss(trained_easy, easy_corpus):
    model, log = finetune_attention(trained_easy[0], easy_corpus, ["omni", "anc"],
                                    TrainConfig(epochs=3, batch_size=16, seed=2, lr=3e-4))
    assert model.channel_tags == ["omni", "anc"]
    assert model.keys.params["out.w"].shape[1] == 40
    t = log.totals
    assert t[0] > t[1] > t[2]


# -- threshold grid search ---------------------------------------------------

def _table(conf, pos, neg_seconds=3600.0):
    conf = np.asarray(conf, dtype=float).reshape(len(pos), -1)
    pos = np.asarray(pos, dtype=bool)
    n_neg = max(int((~pos).sum()), 1)
    dur = np.where(pos, 3.0, neg_seconds / n_neg)
    return ConfidenceTable([f"u{i}" for i in range(len(pos))], [f"c{j}" for j in range(conf.shape[1])], conf, pos,
                           dur)


def _brute(table, target, step):
    """Enumerate every grid vector, keep the feasible least-FRR ones, take the lexicographically largest."""
    grid = threshold_grid(step)
    c, pos = table.confidences, table.is_positive
    hours = table.negative_hours
    best = None
    for vec in itertools.product(grid, repeat=c.shape[1]):
        fires = (c > np.array(vec)).any(axis=1)
        fa = fires[~pos].sum() / hours
        if fa > target + 1e-12:
            continue
        frr = (~fires[pos]).sum() / pos.sum()
        key = (-frr, vec)
        if best is None or key > best[0]:
            best = (key, vec, frr, fa)
    return best


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(0, 10_000), st.sampled_from([0.0, 1.0, 2.0]))
def test_grid_search_matches_brute_force(c, seed, target):
    rng = np.random.default_rng(seed)
    n = 12
    pos = rng.random(n) < 0.5
    pos[:2] = [True, False]
    conf = np.round(rng.random((n, c)), 2)
    table = _table(conf, pos)
    tv = grid_search_thresholds(table, target, 0.05)
    ref = _brute(table, target, 0.05)
    if ref is None:
        assert tv.violated and tv.thresholds == (0.95,) * c
    else:
        assert not tv.violated
        assert tv.thresholds == ref[1]
        assert tv.frr == ref[2] and tv.fa_per_hour == ref[3]


def test_six_utterance_instance():
    conf = [[0.9, 0.3], [0.4, 0.8], [0.6, 0.7], [0.5, 0.2], [0.3, 0.65], [0.1, 0.1]]
    pos = [True, True, True, False, False, False]
    tv = grid_search_thresholds(_table(conf, pos), target_fah=0.0, grid_step=0.05)
    ref = _brute(_table(conf, pos), 0.0, 0.05)
    # all three positives need t1 in [0.5, 0.9), t2 in [0.65, 0.8) and (t1 < 0.6 or t2 < 0.7)
    assert tv.thresholds == ref[1] == (0.85, 0.65)
    assert tv.frr == 0.0 and tv.fa_per_hour == 0.0


def test_noisier_channel_gets_higher_threshold():
    # half the keywords are heard only on the clean channel, half only on the noisy one;
    # the noisy channel also scores negatives up to 0.8, the clean one only up to 0.3
    rng = np.random.default_rng(0)
    n = 20
    clean = np.r_[rng.uniform(0.5, 0.95, n), rng.uniform(0.0, 0.2, n), rng.uniform(0.0, 0.3, 100)]
    noisy = np.r_[rng.uniform(0.0, 0.2, n), rng.uniform(0.85, 0.99, n), rng.uniform(0.0, 0.8, 100)]
    pos = np.r_[np.ones(2 * n, bool), np.zeros(100, bool)]
    table = _table(np.c_[clean, noisy], pos)
    tv = grid_search_thresholds(table, 0.0, 0.05)
    assert tv.thresholds == _brute(table, 0.0, 0.05)[1]
    assert tv.frr == 0.0
    assert tv.thresholds[1] > tv.thresholds[0]


def test_infeasible_target_is_flagged():
    tv = grid_search_thresholds(_table([[0.9], [0.999]], [True, False]), 0.0, 0.05)
    assert tv.violated and tv.thresholds == (0.95,)
    with pytest.raises(ConstraintViolation):
        require_feasible(tv)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_single_channel_search_agrees_with_calibration(seed):
    rng = np.random.default_rng(seed)
    pos = rng.random(30) < 0.4
    pos[:2] = [True, False]
    table = _table(np.round(rng.random(30), 3), pos)
    tv = grid_search_thresholds(table, 1.0, 0.001)
    cal = calibrate_threshold(table, 1.0)
    assert tv.violated == cal.violated
    assert tv.frr == cal.frr
    assert tv.fa_per_hour <= cal.fa_per_hour
    if not cal.violated:
        assert tv.thresholds[0] >= cal.threshold


@given(st.integers(0, 10_000), st.integers(0, 18), st.integers(0, 1))
def test_raising_a_threshold_never_adds_false_alarms(seed, k, ch):
    rng = np.random.default_rng(seed)
    c = rng.random((25, 2))
    neg = c[10:]
    grid = threshold_grid(0.05)
    vec = rng.choice(grid, 2)
    raised = vec.copy()
    raised[ch] = grid[min(k, len(grid) - 1)] if grid[min(k, len(grid) - 1)] > vec[ch] else vec[ch]
    assert (neg > raised).any(axis=1).sum() <= (neg > vec).any(axis=1).sum()


def test_confidence_cache_round_trip(tmp_path):
    table = _table(np.random.default_rng(0).random((5, 2)), [True, False, True, False, False])
    table.write_jsonl(tmp_path / "cache.jsonl")
    back = ConfidenceTable.read_jsonl(tmp_path / "cache.jsonl")
    assert back.utterance_ids == table.utterance_ids and back.channel_tags == table.channel_tags
    assert np.array_equal(back.confidences, table.confidences)
    assert np.array_equal(back.is_positive, table.is_positive)
    assert np.array_equal(back.durations, table.durations)
    rows = (tmp_path / "cache.jsonl").read_text().splitlines()
    assert len(rows) == 10 and '"max_confidence"' in rows[0]


def test_grid_step_must_divide_one():
    with pytest.raises(ConfigError):
        threshold_grid(0.3)


def test_training_log_rows():
    log = TrainLog()
    log.append(0, 1.0, 2.0, 2.0, 0.1)
    assert log.totals == [2.0]
