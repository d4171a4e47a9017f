import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkws.detect import pick_events
from mkws.errors import ConfigError, DataError
from mkws.evaluation import (Approach, EvalCorpus, EvalItem, SnrCurve, build_snr_curve, calibrate_threshold,
                             compare_approaches, confidence_table, isotonic_nonincreasing, match_events,
                             report_from_events, run_detector, score_corpus, score_tracks, snr_at_frr, snr_gain,
                             write_curves_csv, write_report_csv)
from mkws.net import EnsembleKws, build_base
from mkws.training import ConfidenceTable, threshold_grid


def _pos(i, fs, fe, n=300, snr=None):
    return EvalItem(f"p{i}", True, n, n / 100, (fs, fe), snr)


def _neg(i, seconds):
    n = int(seconds * 100)
    return EvalItem(f"n{i}", False, n, seconds)


# -- FRR and FA/h ------------------------------------------------------------

def test_handcrafted_report():
    corpus = EvalCorpus([_pos(0, 100, 150), _pos(1, 100, 150), _pos(2, 100, 150), _pos(3, 100, 150),
                         _neg(0, 900.0), _neg(1, 900.0)])
    events = [[120], [60], [199], [250], [10], [400]]
    rep = report_from_events(events, corpus, 0.5)
    assert rep.frr == 0.25 and rep.fa_per_hour == 4.0
    assert (rep.n_missed, rep.n_false_alarms) == (1, 2)


def test_silent_detector():
    corpus = EvalCorpus([_pos(0, 100, 150), _neg(0, 60.0)])
    rep = score_tracks([np.zeros((1, 300)), np.zeros((1, 6000))], corpus, 0.5)
    assert rep.frr == 1.0 and rep.fa_per_hour == 0.0


def test_always_firing_detector_is_refractory_limited():
    corpus = EvalCorpus([_pos(0, 100, 150)] + [_neg(i, 10.0) for i in range(10)])
    tracks = [np.ones((1, 300))] + [np.full((1, 1000), 0.99)] * 10
    rep = score_tracks(tracks, corpus, 0.5)
    assert rep.frr == 0.0
    assert rep.fa_per_hour == pytest.approx(3600.0)  # one event per second of negative audio


def test_match_window_edges():
    it = _pos(0, 100, 150)
    assert it.match_window == (50, 199)
    corpus = EvalCorpus([it, _neg(0, 1.0)])
    assert match_events([[49], []], corpus) == (1, 0)
    assert match_events([[50], []], corpus) == (0, 0)
    assert match_events([[199], []], corpus) == (0, 0)
    assert match_events([[200], []], corpus) == (1, 0)


def _brute_match(items, events):
    missed = fa = 0
    for it, ev in zip(items, events):
        if it.positive:
            fs, fe = it.span_frames
            # an event counts if it lands within half a second of the keyword span
            hit = False
            for f in ev:
                if (fs - f) <= 50 and (f - (fe - 1)) <= 50:
                    hit = True
            missed += 0 if hit else 1
        else:
            fa += len(ev)
    return missed, fa


@settings(max_examples=100)
@given(st.lists(st.tuples(st.booleans(), st.lists(st.integers(0, 600), max_size=3)), min_size=1, max_size=7))
def test_matcher_agrees_with_brute_force(spec):
    items, events = [], []
    for i, (positive, ev) in enumerate(spec):
        items.append(_pos(i, 200, 260, 600) if positive else _neg(i, 6.0))
        events.append(ev)
    assert match_events(events, EvalCorpus(items)) == _brute_match(items, events)


def test_fa_rate_scales_inversely_with_duration():
    events = [[10], [5, 300]]
    a = report_from_events(events, EvalCorpus([_pos(0, 100, 150), _neg(0, 100.0)]), 0.5)
    b = report_from_events(events, EvalCorpus([_pos(0, 100, 150), _neg(0, 400.0)]), 0.5)
    assert a.fa_per_hour == pytest.approx(4 * b.fa_per_hour)


def test_zero_positives_is_an_error():
    with pytest.raises(DataError):
        report_from_events([[]], EvalCorpus([_neg(0, 10.0)]), 0.5)
    with pytest.raises(DataError):
        report_from_events([[]], EvalCorpus([_pos(0, 100, 150)]), 0.5)


# -- calibration -------------------------------------------------------------

def _cache(pos_conf, neg_conf, hours=1.0):
    n_neg = len(neg_conf)
    conf = np.r_[pos_conf, neg_conf][:, None]
    is_pos = np.r_[np.ones(len(pos_conf), bool), np.zeros(n_neg, bool)]
    dur = np.r_[np.full(len(pos_conf), 3.0), np.full(n_neg, hours * 3600 / max(n_neg, 1))]
    return ConfidenceTable([f"u{i}" for i in range(len(conf))], ["omni"], conf, is_pos, dur)


def _brute_calibrate(pos, neg, hours, target):
    for thr in threshold_grid(0.001):
        fa = sum(c > thr for c in neg) / hours
        if fa <= target:
            return thr, sum(c <= thr for c in pos) / len(pos), fa
    return None


@settings(max_examples=60)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=5), st.lists(st.floats(0, 1), min_size=1, max_size=5),
       st.sampled_from([0.0, 0.1, 1.0, 2.0]))
def test_calibration_matches_brute_force_scan(pos, neg, target):
    cal = calibrate_threshold(_cache(np.array(pos), np.array(neg)), target)
    ref = _brute_calibrate(pos, neg, 1.0, target)
    if ref is None:
        assert cal.violated and cal.threshold == 0.999
    else:
        assert (cal.threshold, cal.frr, cal.fa_per_hour) == (pytest.approx(ref[0], abs=0), ref[1], ref[2])
        assert cal.fa_per_hour <= target
        # one grid step lower breaks the target
        if cal.threshold > 0.001:
            lower = cal.threshold - 0.001
            assert sum(c > lower for c in neg) / 1.0 > target


def test_zero_target_sits_above_every_false_alarm():
    neg = np.array([0.42, 0.77, 0.3])
    cal = calibrate_threshold(_cache(np.array([0.9, 0.8]), neg), 0.0)
    assert cal.threshold == 0.77 and cal.fa_per_hour == 0.0


def test_ten_event_cache_and_target_monotonicity():
    rng = np.random.default_rng(4)
    pos, neg = rng.random(6).round(3), rng.random(10).round(3)
    table = _cache(pos, neg, hours=2.0)
    prev = 1.0
    for target in (0.0, 0.5, 1.0, 2.0, 5.0):
        cal = calibrate_threshold(table, target)
        ref = _brute_calibrate(pos, neg, 2.0, target)
        assert cal.threshold == pytest.approx(ref[0], abs=1e-12)
        assert cal.threshold <= prev
        prev = cal.threshold


def test_unreachable_target_is_flagged():
    cal = calibrate_threshold(_cache(np.array([0.5]), np.array([0.9995])), 0.1)
    assert cal.violated and cal.threshold == 0.999 and cal.fa_per_hour == 1.0


def test_calibration_input_errors():
    with pytest.raises(ConfigError):
        calibrate_threshold(ConfidenceTable(["a"], ["x", "y"], [[0.1, 0.2]], [True], [1.0]))
    with pytest.raises(DataError):
        calibrate_threshold(_cache(np.array([]), np.array([0.2])))


def test_confidence_table_bounds_the_event_count():
    rng = np.random.default_rng(1)
    items = [_pos(0, 100, 150), _neg(0, 20.0), _neg(1, 7.5)]
    tracks = [rng.random((1, 300)), rng.random((1, 2000)) ** 4, rng.random((1, 750)) ** 4]
    table = confidence_table(tracks, EvalCorpus(items), ["omni"])
    assert table.n_positive == 1
    assert table.negative_hours == pytest.approx(27.5 / 3600)
    for thr in (0.3, 0.6, 0.9, 0.99):
        fa_events = sum(len(pick_events(t, thr)) for t in tracks[1:])
        segments = int((table.confidences[~table.is_positive, 0] > thr).sum())
        assert fa_events <= segments


# -- SNR curves and gain -----------------------------------------------------

def _lab(snrs, reps=4):
    items = [_pos(i, 150, 200, 300, float(s)) for i, s in enumerate(np.repeat(snrs, reps))]
    return EvalCorpus(items + [_neg(0, 10.0)])


def test_perfect_detector_gives_flat_zero_curve():
    corpus = _lab([-10, -5, 0])
    tracks = [np.where(np.arange(300) == 160, 0.9, 0.0)[None] for _ in corpus.positives] + [np.zeros((1, 1000))]
    curve = build_snr_curve(tracks, corpus, 0.5)
    assert list(curve.snr_db) == [-10, -5, 0] and np.all(curve.frr == 0)


def test_step_detector_gives_step_curve():
    corpus = _lab([-20, -15, -10, -5, 0])
    tracks = []
    for it in corpus.positives:
        fire = it.snr_db >= -10
        tracks.append(np.where(np.arange(300) == 160, 0.9 if fire else 0.1, 0.0)[None])
    tracks.append(np.zeros((1, 1000)))
    curve = build_snr_curve(tracks, corpus, 0.5)
    assert list(curve.frr) == [1.0, 1.0, 0.0, 0.0, 0.0]
    assert list(curve.counts) == [4] * 5


def test_empty_bucket_warns_and_is_omitted():
    corpus = _lab([-10, 0])
    tracks = [np.zeros((1, 300))] * 8 + [np.zeros((1, 1000))]
    with pytest.warns(UserWarning, match="-5"):
        curve = build_snr_curve(tracks, corpus, 0.5, snr_grid=[-10, -5, 0])
    assert list(curve.snr_db) == [-10, 0]


def test_curve_invariants():
    c = SnrCurve([5, -5, 0], [0.1, 0.9, 0.5])
    assert list(c.snr_db) == [-5, 0, 5] and list(c.frr) == [0.9, 0.5, 0.1]
    with pytest.raises(DataError):
        SnrCurve([0], [0.5])
    with pytest.raises(DataError):
        SnrCurve([0, 0], [0.5, 0.4])


def _ref_curve(snr):
    return 1.0 / (1.0 + np.exp(0.4 * (snr + 7.0)))


SNRS = np.arange(-30.0, 21.0, 5.0)


def test_identical_curves_have_zero_gain():
    c = SnrCurve(SNRS, _ref_curve(SNRS))
    assert snr_gain(c, c, 0.5) == 0.0


@pytest.mark.parametrize("level", [0.2, 0.5, 0.73])
def test_shifted_curve_gain_is_exact(level):
    # linear pieces between shared breakpoints invert exactly, so shift the grid too
    ref = SnrCurve(SNRS, _ref_curve(SNRS), "omni")
    cand = SnrCurve(SNRS - 5.0, _ref_curve(SNRS), "anc")  # cand(s) = ref(s + 5)
    assert abs(snr_gain(ref, cand, level) - 5.0) <= 1e-9
    assert abs(snr_gain(cand, ref, level) + 5.0) <= 1e-9


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=8), st.lists(st.floats(0, 1), min_size=3, max_size=8),
       st.floats(0.05, 0.95))
def test_gain_is_antisymmetric(fa, fb, level):
    a = SnrCurve(np.arange(len(fa)) * 5.0, sorted(fa, reverse=True) if fa[0] >= fa[-1] else fa, "a")
    b = SnrCurve(np.arange(len(fb)) * 4.0 - 3, fb, "b")
    try:
        g = snr_gain(a, b, level)
    except DataError:
        return
    assert snr_gain(b, a, level) == pytest.approx(-g, abs=1e-9)


def test_level_outside_curve_names_the_curve():
    c = SnrCurve([-10, 0, 10], [0.6, 0.4, 0.3], "bf_oracle")
    with pytest.raises(DataError, match="bf_oracle"):
        snr_at_frr(c, 0.8)


def _isotonic_oracle(y, w):
    """Nonincreasing least-squares fit from the max-min formula over weighted block means."""
    y, w = np.asarray(y, float), np.asarray(w, float)
    n = len(y)
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(i + 1):
            worst = -np.inf
            for k in range(i, n):
                worst = max(worst, np.sum(w[j:k + 1] * y[j:k + 1]) / np.sum(w[j:k + 1]))
            best = min(best, worst)
        out[i] = best
    return out


@settings(max_examples=60)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(1, 9)), min_size=1, max_size=9))
def test_isotonic_cleanup_matches_max_min_formula(pairs):
    y = [p[0] for p in pairs]
    w = [p[1] for p in pairs]
    fit = isotonic_nonincreasing(y, w)
    assert np.allclose(fit, _isotonic_oracle(y, w), atol=1e-12)
    assert np.all(np.diff(fit) <= 1e-15)


def test_non_monotone_curve_is_cleaned_before_interpolation():
    c = SnrCurve([-20, -10, 0, 10], [0.9, 0.4, 0.6, 0.1], counts=[10, 10, 10, 10])
    # cleaned: 0.9, 0.5, 0.5, 0.1 -> 0.5 is first reached at -10 dB
    assert snr_at_frr(c, 0.5) == pytest.approx(-10.0)
    assert snr_at_frr(c, 0.7) == pytest.approx(-15.0)


# -- comparison on a real corpus ---------------------------------------------

def test_compare_gives_six_rows_and_identical_models_match(easy_corpus, tmp_path):
    net = build_base("desk", seed=3)
    names = ["base", "base_anc", "base_x2", "ensemble_anc", "attention_bf", "attention_anc"]
    approaches = [
        Approach("base", net, "single", ("omni",)),
        Approach("base_anc", net, "single", ("omni",)),
        Approach("ensemble_anc", EnsembleKws([net, build_base("desk", seed=4)], ["omni", "anc"]), "ensemble",
                 ("omni", "anc")),
    ]
    reports = compare_approaches(approaches, easy_corpus, easy_corpus, 1000.0, names=names)
    assert [r.approach for r in reports] == names
    by = {r.approach: r for r in reports}
    assert by["base"].frr == by["base_anc"].frr and by["base"].thresholds == by["base_anc"].thresholds
    assert not by["base_x2"].present and len(by["ensemble_anc"].thresholds) == 2
    write_report_csv(tmp_path / "report.csv", reports)
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert len(rows) == 6 and set(rows[0]) == {"approach", "thresholds", "frr", "fa_per_hour", "corpus_id"}
    assert rows[2]["frr"] == "absent"


def test_score_corpus_and_oracle_tracks(easy_corpus):
    net = build_base("desk", seed=3)
    rep = score_corpus(net, easy_corpus, 0.999)
    assert 0.0 <= rep.frr <= 1.0 and rep.fa_per_hour >= 0.0
    tracks = run_detector(net, easy_corpus, "oracle", ("bf000", "bf060"))
    single = run_detector(net, easy_corpus, "single", ("bf060",))
    assert tracks[0].shape[0] == 1 and np.all(tracks[0] >= single[0])


def test_curves_csv(tmp_path):
    write_curves_csv(tmp_path / "c.csv", [SnrCurve([0, 5], [0.5, 0.2], "omni"), SnrCurve([0, 5], [0.4, 0.1], "anc")])
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert [r["channel"] for r in rows] == ["omni", "omni", "anc", "anc"]
