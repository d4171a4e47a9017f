"""False-reject and false-alarm metrics, threshold calibration and SNR gain."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import isotonic_regression

from .detect import REFRACTORY, oracle_fuse, pick_events, posteriors
from .errors import ConfigError, DataError
from .training import ConfidenceTable, grid_search_thresholds, threshold_grid

MATCH_TOLERANCE_FRAMES = 50  # 0.5 s at a 10 ms hop
CALIBRATION_STEP = 0.001


@dataclass
class EvalItem:
    id: str
    positive: bool
    n_frames: int
    duration_s: float
    span_frames: tuple | None = None
    snr_db: float | None = None

    @property
    def match_window(self) -> tuple[int, int]:
        """Inclusive frame range in which an event counts as a detection."""
        fs, fe = self.span_frames
        return fs - MATCH_TOLERANCE_FRAMES, fe - 1 + MATCH_TOLERANCE_FRAMES


@dataclass
class EvalCorpus:
    items: list
    corpus_id: str = "corpus"

    @classmethod
    def from_features(cls, corpus, corpus_id=None) -> "EvalCorpus":
        items = [EvalItem(r["id"], bool(r["positive"]), r["n_frames"], r["duration_s"],
                          tuple(r["span_frames"]) if r["span_frames"] else None, r.get("snr_db"))
                 for r in corpus.items]
        return cls(items, corpus_id or corpus.root.name)

    @property
    def positives(self) -> list:
        return [it for it in self.items if it.positive]

    @property
    def negative_hours(self) -> float:
        return sum(it.duration_s for it in self.items if not it.positive) / 3600.0

    def validate(self):
        if not self.positives:
            raise DataError(f"{self.corpus_id}: no positive utterances, FRR undefined")
        if self.negative_hours <= 0:
            raise DataError(f"{self.corpus_id}: no negative audio, FA/h undefined")


@dataclass
class MetricReport:
    approach: str
    thresholds: tuple
    frr: float
    fa_per_hour: float
    corpus_id: str = ""
    n_positive: int = 0
    n_missed: int = 0
    n_false_alarms: int = 0
    negative_hours: float = 0.0
    violated: bool = False
    present: bool = True

    def row(self) -> dict:
        return {
            "approach": self.approach,
            "thresholds": " ".join(f"{t:.3f}" for t in self.thresholds) if self.present else "",
            "frr": f"{self.frr:.6f}" if self.present else "absent",
            "fa_per_hour": f"{self.fa_per_hour:.6f}" if self.present else "absent",
            "corpus_id": self.corpus_id,
        }


def match_events(item_events, corpus: EvalCorpus) -> tuple[int, int]:
    """(missed positives, false alarms) for per-item lists of event frame indices."""
    missed = fa = 0
    for it, frames in zip(corpus.items, item_events):
        if it.positive:
            lo, hi = it.match_window
            if not any(lo <= f <= hi for f in frames):
                missed += 1
        else:
            fa += len(frames)
    return missed, fa


def report_from_events(item_events, corpus: EvalCorpus, thresholds, approach="") -> MetricReport:
    corpus.validate()
    missed, fa = match_events(item_events, corpus)
    n_pos = len(corpus.positives)
    hours = corpus.negative_hours
    return MetricReport(approach, tuple(np.atleast_1d(thresholds).tolist()), missed / n_pos, fa / hours,
                        corpus.corpus_id, n_pos, missed, fa, hours)


def run_detector(model, features, mode="single", tags=("omni",)) -> list:
    """Confidence tracks (C_out, T) for every item of a feature corpus."""
    tracks = []
    for i in range(len(features)):
        z = np.asarray(features.features(i, list(tags)), dtype=np.float64)
        conf = posteriors(model, z, mode)
        tracks.append(oracle_fuse(conf)[None] if mode == "oracle" else conf)
    return tracks


def score_tracks(tracks, corpus: EvalCorpus, thresholds, approach="") -> MetricReport:
    """Pick events on every track and score them."""
    events = [[e.frame_index for e in pick_events(tr, thresholds)] for tr in tracks]
    return report_from_events(events, corpus, thresholds, approach)


def score_corpus(model, features, thresholds, mode="single", tags=("omni",), approach="") -> MetricReport:
    corpus = EvalCorpus.from_features(features)
    return score_tracks(run_detector(model, features, mode, tags), corpus, thresholds, approach)


def confidence_table(tracks, corpus: EvalCorpus, tags, segment_frames=REFRACTORY) -> ConfidenceTable:
    """Per-unit peak confidences for threshold search.

    Positives contribute their peak inside the match window.  Negative
    audio is cut into refractory-length segments; two events can never start
    in the same segment, so counting segments above a threshold bounds the
    event count from above and calibrations made on it stay valid.
    """
    ids, conf, pos, dur = [], [], [], []
    for it, tr in zip(corpus.items, tracks):
        tr = np.atleast_2d(tr)
        if it.positive:
            lo, hi = it.match_window
            ids.append(it.id)
            conf.append(tr[:, max(lo, 0):hi + 1].max(axis=1))
            pos.append(True)
            dur.append(it.duration_s)
        else:
            for s in range(0, tr.shape[1], segment_frames):
                seg = tr[:, s:s + segment_frames]
                ids.append(f"{it.id}@{s}")
                conf.append(seg.max(axis=1))
                pos.append(False)
                dur.append(it.duration_s * seg.shape[1] / tr.shape[1])
    return ConfidenceTable(ids, list(tags), np.array(conf), pos, dur)


@dataclass
class Calibration:
    threshold: float
    frr: float
    fa_per_hour: float
    violated: bool = False


def calibrate_threshold(table: ConfidenceTable, target_fah=0.1, step=CALIBRATION_STEP) -> Calibration:
    """Smallest grid threshold whose FA/h stays within ``target_fah``."""
    if table.confidences.shape[1] != 1:
        raise ConfigError("single-threshold calibration needs exactly one channel")
    if table.n_positive == 0:
        raise DataError("no positive utterances for FRR")
    hours = table.negative_hours
    if hours <= 0:
        raise DataError("no negative audio for FA/h")
    grid = threshold_grid(step)
    c = table.confidences[:, 0]
    neg = np.sort(c[~table.is_positive])
    pos = np.sort(c[table.is_positive])
    fa = (len(neg) - np.searchsorted(neg, grid, side="right")) / hours
    frr = np.searchsorted(pos, grid, side="right") / len(pos)
    ok = np.flatnonzero(fa <= target_fah + 1e-12)
    if ok.size == 0:
        return Calibration(float(grid[-1]), float(frr[-1]), float(fa[-1]), violated=True)
    i = ok[0]
    return Calibration(float(grid[i]), float(frr[i]), float(fa[i]))


# -- SNR curves --------------------------------------------------------------

@dataclass
class SnrCurve:
    snr_db: np.ndarray
    frr: np.ndarray
    channel_tag: str = "omni"
    counts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.snr_db = np.asarray(self.snr_db, dtype=np.float64)
        self.frr = np.asarray(self.frr, dtype=np.float64)
        order = np.argsort(self.snr_db)
        self.snr_db, self.frr = self.snr_db[order], self.frr[order]
        if self.counts is not None:
            self.counts = np.asarray(self.counts)[order]
        if len(self.snr_db) < 2:
            raise DataError(f"curve {self.channel_tag!r} needs at least 2 points")
        if len(np.unique(self.snr_db)) != len(self.snr_db):
            raise DataError(f"curve {self.channel_tag!r} has repeated SNR values")

    def rows(self):
        return [{"channel": self.channel_tag, "snr_db": f"{s:g}", "frr": f"{f:.6f}"}
                for s, f in zip(self.snr_db, self.frr)]


def build_snr_curve(tracks, corpus: EvalCorpus, thresholds, channel_tag="omni", snr_grid=None) -> SnrCurve:
    """FRR per SNR bucket of a lab set."""
    events = [[e.frame_index for e in pick_events(tr, thresholds)] for tr in tracks]
    buckets: dict = {}
    for it, ev in zip(corpus.items, events):
        if not it.positive or it.snr_db is None:
            continue
        lo, hi = it.match_window
        hit = any(lo <= f <= hi for f in ev)
        buckets.setdefault(float(it.snr_db), []).append(hit)
    for snr in snr_grid or []:
        if float(snr) not in buckets:
            warnings.warn(f"no records at {snr} dB; point omitted", stacklevel=2)
    snrs = sorted(buckets)
    frr = [1.0 - float(np.mean(buckets[s])) for s in snrs]
    return SnrCurve(snrs, frr, channel_tag, [len(buckets[s]) for s in snrs])


def isotonic_nonincreasing(y, weights=None) -> np.ndarray:
    """Least-squares nonincreasing fit (pool-adjacent-violators, via scipy)."""
    y = np.asarray(y, dtype=np.float64)
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    return isotonic_regression(y, weights=w, increasing=False).x


def snr_at_frr(curve: SnrCurve, frr_level: float) -> float:
    """SNR where the cleaned curve first falls to ``frr_level`` (linear interpolation)."""
    x = curve.snr_db
    f = isotonic_nonincreasing(curve.frr, curve.counts)
    if not f[-1] <= frr_level <= f[0]:
        raise DataError(f"FRR level {frr_level} outside the range [{f[-1]:.3g}, {f[0]:.3g}] "
                        f"of curve {curve.channel_tag!r}")
    i = int(np.argmax(f <= frr_level))
    if i == 0:
        return float(x[0])
    return float(x[i - 1] + (f[i - 1] - frr_level) / (f[i - 1] - f[i]) * (x[i] - x[i - 1]))


def snr_gain(reference: SnrCurve, candidate: SnrCurve, frr_level=0.5) -> float:
    """How many dB less SNR the candidate needs to reach ``frr_level``."""
    return snr_at_frr(reference, frr_level) - snr_at_frr(candidate, frr_level)


# -- comparison --------------------------------------------------------------

@dataclass
class Approach:
    """A detector plus the channel bank it reads; ``mode`` selects the fusion rule."""

    name: str
    model: object
    mode: str
    tags: tuple


def calibrate_approach(tracks, corpus: EvalCorpus, approach: Approach, target_fah=0.1, grid_step=CALIBRATION_STEP):
    """Thresholds for an approach from its dev-set tracks."""
    out_tags = approach.tags if approach.mode == "ensemble" else (approach.name,)
    table = confidence_table(tracks, corpus, out_tags)
    if approach.mode == "ensemble":
        tv = grid_search_thresholds(table, target_fah, grid_step)
        return tuple(tv.thresholds), tv.violated
    cal = calibrate_threshold(table, target_fah, grid_step)
    return (cal.threshold,), cal.violated


def compare_approaches(approaches, dev_features, test_features, target_fah=0.1, names=None, progress=None):
    """Calibrate every approach on dev, score it on test; absent approaches get a placeholder row."""
    dev = EvalCorpus.from_features(dev_features, "dev")
    test = EvalCorpus.from_features(test_features, "test")
    by_name = {a.name: a for a in approaches if a is not None}
    reports = []
    for name in names or list(by_name):
        a = by_name.get(name)
        if a is None:
            reports.append(MetricReport(name, (), float("nan"), float("nan"), test.corpus_id, present=False))
            continue
        thr, violated = calibrate_approach(run_detector(a.model, dev_features, a.mode, a.tags), dev, a, target_fah)
        rep = score_tracks(run_detector(a.model, test_features, a.mode, a.tags), test, thr, name)
        rep.violated = violated
        reports.append(rep)
        if progress:
            progress(rep)
    return reports


def write_report_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["approach", "thresholds", "frr", "fa_per_hour", "corpus_id"])
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def write_curves_csv(path, curves):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["channel", "snr_db", "frr"])
        w.writeheader()
        for c in curves:
            w.writerows(c.rows())
