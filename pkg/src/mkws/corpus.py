"""Simulated keyword-spotting corpora stored as per-clip feature stacks.

Every clip is rendered through the array simulator and turned into log-Mel
features for all candidate channels at once (omni, ANC and the six beams), so
models for any channel bank can be trained and scored from the same files.
Feature stacks are float32 ``.npy`` files opened memory-mapped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import synth
from .array_sim import ArrayGeometry, MultichannelClip, SourceSpec, level_to_rms, propagate
from .errors import ConfigError, DataError
from .frontend import BEAM_AZIMUTHS, FRAME_LEN, HOP_LEN, AncConfig, channel_signals, log_mel

ALL_TAGS = ("omni", "anc") + tuple(f"bf{int(a):03d}" for a in BEAM_AZIMUTHS)
NOISE_LEVEL_DB = 60.0


def span_to_frames(span, n_frames) -> tuple[int, int]:
    """Frames whose centre sample lies inside a [start, end) sample span."""
    s, e = span
    half = FRAME_LEN // 2
    fs = max(0, -(-(s - half) // HOP_LEN))
    fe = min(n_frames, -(-(e - half) // HOP_LEN))
    return int(fs), int(max(fe, fs + 1))


@dataclass
class CorpusConfig:
    """Sizes and level ranges of one corpus split."""

    n_positive: int = 600
    n_negative: int = 600
    clip_seconds: float = 3.0
    negative_seconds: float = 3.0
    positive_snrs: tuple = (-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0)
    distractor_levels_db: tuple = (45.0, 65.0)
    distractor_rate_hz: float = 0.25
    noise_types: tuple = synth.NOISE_TYPES
    min_lead_in_s: float = 1.5

    def validate(self):
        if self.n_positive < 0 or self.n_negative < 0:
            raise ConfigError("clip counts must be >= 0")
        if self.distractor_rate_hz < 0:
            raise ConfigError("distractor rate must be >= 0")
        if self.clip_seconds < self.min_lead_in_s + 0.9:
            raise ConfigError("positive clips too short for the lead-in plus a keyword")
        for t in self.noise_types:
            if t not in synth.NOISE_TYPES:
                raise ConfigError(f"unknown noise type {t!r}")


def _distractor_track(n, rng, level_db, rate_hz, sr):
    """Mono track of distractor phrases calibrated so each phrase has ``level_db``."""
    out = np.zeros(n)
    pos = int(rng.uniform(0.0, 1.0 / rate_hz) * sr)
    while pos < n:
        p = synth.synth_distractor(rng, sample_rate=sr)
        p = p * level_to_rms(level_db) / np.sqrt(np.mean(p ** 2))
        end = min(n, pos + len(p))
        out[pos:end] += p[:end - pos]
        pos = end + int(rng.exponential(1.0 / rate_hz) * sr) + sr // 4
    return out


def render_scene(geometry: ArrayGeometry, spec: dict) -> MultichannelClip:
    """Noise, optional keyword and optional distractor speech from three directions."""
    sr = geometry.sample_rate
    n = int(round(spec["seconds"] * sr))
    noise = synth.synth_noise(spec["noise_type"], spec["seconds"], spec["noise_seed"], sr)
    chans = propagate(geometry, SourceSpec(spec["noise_azimuth_deg"], noise, NOISE_LEVEL_DB), n).channels
    rng = np.random.default_rng(spec["scene_seed"])
    if spec.get("distractor_level_db") is not None:
        track = _distractor_track(n, rng, spec["distractor_level_db"], spec["distractor_rate_hz"], sr)
        if np.any(track):
            chans = chans + propagate(geometry, SourceSpec(spec["distractor_azimuth_deg"], track, None), n).channels
    span = None
    if spec.get("keyword_level_db") is not None:
        kw = synth.synth_keyword(spec["voice"], spec["keyword_seed"], sr)
        lo = int(spec["min_lead_in_s"] * sr)
        hi = n - len(kw) - int(0.2 * sr)
        onset = int(rng.integers(lo, hi + 1))
        src = SourceSpec(spec["keyword_azimuth_deg"], kw, spec["keyword_level_db"])
        chans = chans + propagate(geometry, src, n, onset).channels
        span = (onset, onset + len(kw))
    meta = {k: spec.get(k) for k in ("snr_db", "noise_type", "keyword_azimuth_deg", "noise_azimuth_deg")}
    return MultichannelClip(chans.astype(np.float32), sr, span, meta)


def clip_features(clip: MultichannelClip, tags=ALL_TAGS, geometry=None, anc_config=None) -> np.ndarray:
    """(C, T, 40) float32 log-Mel stack for the requested channels."""
    sigs = channel_signals(clip, list(tags), geometry, anc_config)
    return np.stack([log_mel(s, clip.sample_rate, t).frames for t, s in sigs.items()]).astype(np.float32)


def scene_specs(config: CorpusConfig, seed: int) -> list[dict]:
    """Deterministic scene parameters; scene ``i`` depends only on (seed, i)."""
    config.validate()
    specs = []
    voices = sorted(synth.VOICE_PRESETS)
    for i in range(config.n_positive + config.n_negative):
        positive = i < config.n_positive
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE, i]))
        az = rng.uniform(0, 360, size=3)
        noise_type = config.noise_types[i % len(config.noise_types)]
        spec = {
            "id": f"{'pos' if positive else 'neg'}_{i:06d}",
            "positive": positive,
            "seconds": config.clip_seconds if positive else config.negative_seconds,
            "noise_type": noise_type,
            "noise_azimuth_deg": float(az[0]),
            "keyword_azimuth_deg": float(az[1]),
            "distractor_azimuth_deg": float(az[2]),
            "noise_seed": int(rng.integers(2**31)),
            "keyword_seed": int(rng.integers(2**31)),
            "scene_seed": int(rng.integers(2**31)),
            "voice": voices[int(rng.integers(len(voices)))],
            "min_lead_in_s": config.min_lead_in_s,
            "distractor_rate_hz": config.distractor_rate_hz,
            "distractor_level_db": None,
            "keyword_level_db": None,
            "snr_db": None,
        }
        if positive:
            snr = float(config.positive_snrs[(i // len(config.noise_types)) % len(config.positive_snrs)])
            spec.update(snr_db=snr, keyword_level_db=NOISE_LEVEL_DB + snr)
        elif rng.random() < 0.8 and config.distractor_rate_hz > 0:
            spec["distractor_level_db"] = float(rng.uniform(*config.distractor_levels_db))
        specs.append(spec)
    return specs


def build_corpus(out_dir, config: CorpusConfig, seed: int = 0, geometry=None, anc_config=None) -> "FeatureCorpus":
    """Render every scene, write its feature stack and an ``index.jsonl``."""
    geometry = geometry or ArrayGeometry.default()
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    rows = []
    for spec in scene_specs(config, seed):
        clip = render_scene(geometry, spec)
        feats = clip_features(clip, ALL_TAGS, geometry, anc_config)
        np.save(out / "feats" / f"{spec['id']}.npy", feats)
        rows.append(_index_row(spec["id"], clip, feats.shape[1]))
    return FeatureCorpus.write(out, rows, seed=seed, config=config.__dict__)


def build_lab_corpus(out_dir, dataset, anc_config=None) -> "FeatureCorpus":
    """Feature stacks for a lab dataset (one keyword per record, SNR in metadata)."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, clip in enumerate(dataset):
        uid = f"lab_{i:05d}"
        feats = clip_features(clip, ALL_TAGS, dataset.geometry, anc_config)
        np.save(out / "feats" / f"{uid}.npy", feats)
        rows.append(_index_row(uid, clip, feats.shape[1]))
    return FeatureCorpus.write(out, rows, seed=dataset.seed, config={"records": len(dataset)})


def _index_row(uid, clip: MultichannelClip, n_frames) -> dict:
    return {
        "id": uid,
        "positive": clip.keyword_span is not None,
        "span_frames": list(span_to_frames(clip.keyword_span, n_frames)) if clip.keyword_span else None,
        "n_frames": int(n_frames),
        "duration_s": clip.duration_s,
        "snr_db": clip.metadata.get("snr_db"),
        "noise_type": clip.metadata.get("noise_type"),
    }


class FeatureCorpus:
    """Read side of a corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        index = self.root / "index.jsonl"
        if not index.exists():
            raise DataError(f"no corpus index at {index}")
        with open(index) as fh:
            self.items = [json.loads(line) for line in fh if line.strip()]
        meta = json.loads((self.root / "corpus.json").read_text())
        self.tags = list(meta["tags"])
        self.meta = meta

    @classmethod
    def write(cls, root, rows, **meta) -> "FeatureCorpus":
        root = Path(root)
        with open(root / "index.jsonl", "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
        (root / "corpus.json").write_text(json.dumps({"tags": list(ALL_TAGS), **meta}, indent=1, default=str))
        return cls(root)

    def __len__(self):
        return len(self.items)

    def has_channel(self, tag) -> bool:
        return tag in self.tags

    def has_positives_and_negatives(self) -> bool:
        flags = {bool(r["positive"]) for r in self.items}
        return flags == {True, False}

    @property
    def negative_hours(self) -> float:
        return sum(r["duration_s"] for r in self.items if not r["positive"]) / 3600.0

    def features(self, i, tags) -> np.ndarray:
        """(C, T, 40) float32 view for item ``i``."""
        cols = [self.tags.index(t) for t in tags]
        arr = np.load(self.root / "feats" / f"{self.items[i]['id']}.npy", mmap_mode="r")
        return arr[cols]

    def frame_targets(self, i) -> np.ndarray:
        r = self.items[i]
        y = np.zeros(r["n_frames"])
        if r["positive"]:
            fs, fe = r["span_frames"]
            y[fs:fe] = 1.0
        return y

    def _crop_start(self, r, crop, rng):
        T = r["n_frames"]
        if T <= crop:
            return 0
        if r["positive"]:
            _, fe = r["span_frames"]
            end = int(np.clip(fe + rng.integers(5, 41), crop, T))
            return end - crop
        return int(rng.integers(0, T - crop + 1))

    def batch(self, indices, tags, crop_frames, rng):
        from .training import UtteranceBatch

        feats, targets, labels = [], [], []
        for i in indices:
            r = self.items[i]
            s = self._crop_start(r, crop_frames, rng)
            feats.append(np.asarray(self.features(i, tags)[:, s:s + crop_frames], dtype=np.float64))
            targets.append(self.frame_targets(i)[s:s + crop_frames])
            labels.append(1.0 if r["positive"] else 0.0)
        if len({f.shape[1] for f in feats}) != 1:
            raise DataError("clips in a batch must reach the crop length")
        return UtteranceBatch(np.stack(feats, axis=1), np.stack(targets), np.array(labels))
