"""Far-field simulation of a 7-microphone circular array in a quiet lab.

Sources are plane waves in 2-D.  Each ring microphone receives the source
waveform shifted by ``tau_m = -(r_m . u) / c`` seconds, realized with a
32-tap Kaiser-windowed sinc so sub-sample delays stay accurate.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.io import wavfile

from . import synth
from .errors import ConfigError, DataError, GeometryError

SAMPLE_RATE = 16000
SPEED_OF_SOUND = 343.0
ARRAY_RADIUS = 0.042

# 94 dB SPL maps to a digital RMS of 0.1 (full scale = 1.0).
REF_DB_SPL = 94.0
REF_RMS = 0.1

FRACTIONAL_TAPS = 32
_KAISER_BETA = 8.0


@dataclass(frozen=True)
class ArrayGeometry:
    mic_positions: np.ndarray
    sample_rate: int = SAMPLE_RATE
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        pos = np.asarray(self.mic_positions, dtype=float)
        object.__setattr__(self, "mic_positions", pos)
        if pos.shape != (7, 2):
            raise GeometryError(f"expected 7 microphones in 2-D, got shape {pos.shape}")
        if np.any(pos[0] != 0.0):
            raise GeometryError("microphone 0 must sit at the origin")
        radii = np.hypot(pos[1:, 0], pos[1:, 1])
        if np.any(np.abs(radii - ARRAY_RADIUS) > 1e-9):
            raise GeometryError(f"ring microphones must be {ARRAY_RADIUS} m from the center")
        angles = np.degrees(np.arctan2(pos[1:, 1], pos[1:, 0]))
        steps = np.mod(np.diff(np.append(angles, angles[0] + 360.0)), 360.0)
        if np.any(np.abs(steps - 60.0) > 1e-9):
            raise GeometryError("ring microphones must be spaced 60 degrees apart")

    @classmethod
    def default(cls, sample_rate=SAMPLE_RATE, speed_of_sound=SPEED_OF_SOUND):
        ang = np.radians(np.arange(6) * 60.0)
        ring = ARRAY_RADIUS * np.column_stack([np.cos(ang), np.sin(ang)])
        return cls(np.vstack([[0.0, 0.0], ring]), sample_rate, speed_of_sound)

    @property
    def n_mics(self) -> int:
        return len(self.mic_positions)

    @property
    def radius(self) -> float:
        return float(np.max(np.hypot(self.mic_positions[:, 0], self.mic_positions[:, 1])))

    def delays(self, azimuth_deg: float) -> np.ndarray:
        """Arrival delay of a plane wave at each microphone, in seconds, relative to the center."""
        az = math.radians(azimuth_deg)
        u = np.array([math.cos(az), math.sin(az)])
        tau = -(self.mic_positions @ u) / self.speed_of_sound
        tau[0] = 0.0
        return tau

    def delays_samples(self, azimuth_deg: float) -> np.ndarray:
        return self.delays(azimuth_deg) * self.sample_rate


@dataclass
class SourceSpec:
    azimuth_deg: float
    waveform: np.ndarray
    level_db_spl: float | None = 60.0
    distance_m: float = 2.0

    def __post_init__(self):
        self.waveform = np.asarray(self.waveform, dtype=float)
        if self.waveform.ndim != 1 or self.waveform.size == 0:
            raise ConfigError("source waveform must be a non-empty mono sequence")
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise ConfigError(f"azimuth {self.azimuth_deg} outside [0, 360)")


@dataclass
class LabProtocol:
    noise_types: Sequence[str] = synth.LAB_NOISE_TYPES
    keyword_levels_db: Sequence[float] = (35, 40, 45, 50, 55, 60, 65)
    noise_level_db: float = 60.0
    records: int = 900
    clip_seconds: float = 3.0
    min_lead_in_s: float = 1.5
    voices: Sequence[str] = ("male", "female", "child")

    @property
    def snr_grid(self) -> list[float]:
        return [float(k) - self.noise_level_db for k in self.keyword_levels_db]

    def validate(self):
        if self.records < 0:
            raise ConfigError("records must be >= 0")
        if not self.noise_types or not self.keyword_levels_db:
            raise ConfigError("protocol needs at least one noise type and one keyword level")
        for t in self.noise_types:
            if t not in synth.NOISE_TYPES:
                raise ConfigError(f"unknown noise type {t!r}")
        if self.clip_seconds < self.min_lead_in_s + 0.9:
            raise ConfigError("clip too short for the lead-in plus a keyword")


@dataclass
class MultichannelClip:
    channels: np.ndarray
    sample_rate: int = SAMPLE_RATE
    keyword_span: tuple[int, int] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = np.asarray(self.channels)
        if self.channels.ndim != 2:
            raise DataError("channels must be a (mics, samples) array")
        if self.keyword_span is not None:
            s, e = self.keyword_span
            if not 0 <= s < e <= self.n_samples:
                raise DataError(f"keyword span {self.keyword_span} outside [0, {self.n_samples})")

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def label(self) -> str:
        return "negative" if self.keyword_span is None else "keyword"

    @property
    def omni(self) -> np.ndarray:
        return self.channels[0]


def level_to_rms(level_db_spl: float) -> float:
    return REF_RMS * 10.0 ** ((level_db_spl - REF_DB_SPL) / 20.0)


def calibrate(waveform: np.ndarray, level_db_spl: float | None) -> np.ndarray:
    """Scale ``waveform`` so its RMS matches ``level_db_spl``; silence stays silence."""
    x = np.asarray(waveform, dtype=float)
    if level_db_spl is None:
        return x
    rms = np.sqrt(np.mean(x * x))
    if rms == 0.0:
        return x.copy()
    return x * (level_to_rms(level_db_spl) / rms)


def fractional_delay_kernel(delay: float, taps: int = FRACTIONAL_TAPS) -> tuple[int, np.ndarray]:
    """Windowed-sinc taps for a delay of ``delay`` samples.

    Returns ``(offset, h)`` such that ``y[n] = sum_k h[k] * x[n - offset - k]``.
    Integer delays produce an exact unit impulse.
    """
    n0 = math.floor(delay)
    frac = delay - n0
    if frac == 0.0:
        return n0, np.array([1.0])
    half = taps // 2
    k = np.arange(-half + 1, half + 1)
    u = k - frac
    window = np.i0(_KAISER_BETA * np.sqrt(np.clip(1.0 - (u / half) ** 2, 0.0, None))) / np.i0(_KAISER_BETA)
    h = np.sinc(u) * window
    return n0 + int(k[0]), h


def fractional_delay(x: np.ndarray, delay: float) -> np.ndarray:
    """Delay ``x`` by a possibly fractional, possibly negative number of samples."""
    offset, h = fractional_delay_kernel(delay)
    n = len(x)
    y = np.convolve(x, h)
    # y_full[i] = sum_k h[k] x[i - k]; we need index n - offset
    out = np.zeros(n)
    lo = max(0, offset)
    hi = min(n, len(y) + offset)
    if hi > lo:
        out[lo:hi] = y[lo - offset:hi - offset]
    return out


def propagate(geometry: ArrayGeometry, source: SourceSpec, n_samples: int | None = None, onset: int = 0) -> MultichannelClip:
    """Render ``source`` at every microphone of ``geometry``.

    The calibrated waveform is placed at ``onset`` inside an ``n_samples``
    buffer before the per-microphone delays are applied.
    """
    if source.distance_m <= geometry.radius:
        raise GeometryError(f"source at {source.distance_m} m lies inside the array")
    wave = calibrate(source.waveform, source.level_db_spl)
    if n_samples is None:
        n_samples = onset + len(wave)
    if onset < 0 or onset + len(wave) > n_samples:
        raise ConfigError("source does not fit in the requested clip length")
    placed = np.zeros(n_samples)
    placed[onset:onset + len(wave)] = wave
    chans = np.empty((geometry.n_mics, n_samples))
    for m, d in enumerate(geometry.delays_samples(source.azimuth_deg)):
        chans[m] = placed if m == 0 else fractional_delay(placed, d)
    meta = {"azimuth_deg": source.azimuth_deg, "level_db_spl": source.level_db_spl}
    return MultichannelClip(chans, geometry.sample_rate, metadata=meta)


def _azimuth_gap(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def mix_lab_record(geometry, keyword_source: SourceSpec, noise_source: SourceSpec, seed=0,
                   keyword_onset: int | None = None, min_lead_in_s: float = 1.5) -> MultichannelClip:
    """Sum a propagated keyword and a propagated noise into one clip.

    The clip length is that of the noise waveform.  When ``keyword_onset`` is
    not given it is drawn from ``seed`` so the keyword starts after at least
    ``min_lead_in_s`` seconds of noise.
    """
    n = len(noise_source.waveform)
    kw_len = len(keyword_source.waveform)
    if keyword_onset is None:
        rng = np.random.default_rng(seed)
        lo = int(min_lead_in_s * geometry.sample_rate)
        hi = n - kw_len - int(0.2 * geometry.sample_rate)
        if hi < lo:
            raise ConfigError("noise clip too short for lead-in and keyword")
        keyword_onset = int(rng.integers(lo, hi + 1))
    kw = propagate(geometry, keyword_source, n, keyword_onset)
    nz = propagate(geometry, noise_source, n)
    chans = (kw.channels + nz.channels).astype(np.float32)
    warnings = []
    if _azimuth_gap(keyword_source.azimuth_deg, noise_source.azimuth_deg) < 5.0:
        warnings.append("keyword and noise sources less than 5 degrees apart")
    has_kw = np.any(keyword_source.waveform != 0)
    snr = (keyword_source.level_db_spl - noise_source.level_db_spl
           if keyword_source.level_db_spl is not None and noise_source.level_db_spl is not None else None)
    meta = {
        "snr_db": snr,
        "keyword_azimuth_deg": keyword_source.azimuth_deg,
        "noise_azimuth_deg": noise_source.azimuth_deg,
        "warnings": warnings,
    }
    span = (keyword_onset, keyword_onset + kw_len) if has_kw else None
    return MultichannelClip(chans, geometry.sample_rate, span, meta)


def record_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Per-record seed, independent of generation order."""
    return np.random.SeedSequence([int(seed), int(index)])


class LabDataset(Sequence):
    """Lazily generated lab recordings; record ``i`` depends only on (seed, i).

    Level and noise-type pairs are dealt round-robin over their Cartesian
    product and then shuffled, so assignment is as uniform as ``records``
    allows on each axis and on the pairs.
    """

    def __init__(self, geometry: ArrayGeometry, protocol: LabProtocol, seed: int = 0):
        protocol.validate()
        self.geometry = geometry
        self.protocol = protocol
        self.seed = int(seed)
        # walk level and noise type in lockstep so any prefix of a round stays balanced on both axes
        levels, types = list(protocol.keyword_levels_db), list(protocol.noise_types)
        n_combo = math.lcm(len(levels), len(types))
        combos = [(levels[i % len(levels)], types[i % len(types)]) for i in range(n_combo)]
        if n_combo < len(levels) * len(types):
            combos = [(lv, nt) for lv in levels for nt in types]
        reps = -(-protocol.records // len(combos)) if protocol.records else 0
        deal = (combos * reps)[:protocol.records]
        order = np.random.default_rng(np.random.SeedSequence([self.seed, 0x1AB])).permutation(len(deal))
        self._assign = [deal[i] for i in order]

    def __len__(self):
        return self.protocol.records

    def spec(self, index: int) -> dict:
        """Parameters of record ``index`` without rendering audio."""
        if not 0 <= index < len(self):
            raise IndexError(index)
        level, noise_type = self._assign[index]
        rng = np.random.default_rng(record_seed(self.seed, index))
        voices = self.protocol.voices
        return {
            "index": index,
            "keyword_level_db": float(level),
            "noise_type": noise_type,
            "voice": voices[index % len(voices)],
            "keyword_azimuth_deg": float(rng.uniform(0, 360)),
            "noise_azimuth_deg": float(rng.uniform(0, 360)),
            "keyword_seed": int(rng.integers(2**31)),
            "noise_seed": int(rng.integers(2**31)),
            "onset_seed": int(rng.integers(2**31)),
            "snr_db": float(level) - self.protocol.noise_level_db,
        }

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        s = self.spec(index)
        p = self.protocol
        kw = synth.synth_keyword(s["voice"], s["keyword_seed"], self.geometry.sample_rate)
        noise = synth.synth_noise(s["noise_type"], p.clip_seconds, s["noise_seed"], self.geometry.sample_rate)
        clip = mix_lab_record(
            self.geometry,
            SourceSpec(s["keyword_azimuth_deg"], kw, s["keyword_level_db"]),
            SourceSpec(s["noise_azimuth_deg"], noise, p.noise_level_db),
            seed=s["onset_seed"],
            min_lead_in_s=p.min_lead_in_s,
        )
        clip.metadata.update(noise_type=s["noise_type"], voice=s["voice"], seed=[self.seed, index], index=index)
        return clip

    def __iter__(self) -> Iterator[MultichannelClip]:
        for i in range(len(self)):
            yield self[i]


def generate_lab_dataset(geometry: ArrayGeometry, protocol: LabProtocol, seed: int = 0,
                         out_dir: str | os.PathLike | None = None, write_audio: bool = True) -> LabDataset:
    """Build the lab dataset; with ``out_dir`` also write WAVs and ``manifest.jsonl``."""
    ds = LabDataset(geometry, protocol, seed)
    if out_dir is not None:
        write_dataset(ds, out_dir, write_audio=write_audio)
    return ds


def manifest_record(clip: MultichannelClip, path: str | None) -> dict:
    m = clip.metadata
    return {
        "path": path,
        "label": clip.label,
        "keyword_span": list(clip.keyword_span) if clip.keyword_span else None,
        "snr_db": m.get("snr_db"),
        "noise_type": m.get("noise_type"),
        "keyword_azimuth_deg": m.get("keyword_azimuth_deg"),
        "noise_azimuth_deg": m.get("noise_azimuth_deg"),
        "seed": m.get("seed"),
    }


def write_dataset(clips, out_dir, write_audio=True, prefix="rec") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i, clip in enumerate(clips):
            path = None
            if write_audio:
                path = f"{prefix}_{i:05d}.wav"
                write_wav(out / path, clip)
            fh.write(json.dumps(manifest_record(clip, path)) + "\n")
    return manifest


def write_wav(path, clip: MultichannelClip):
    """16-bit PCM, channels interleaved."""
    pcm = np.round(np.clip(clip.channels, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(str(path), clip.sample_rate, pcm.T.copy())


def read_wav(path) -> tuple[int, np.ndarray]:
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32767.0
    else:
        x = data.astype(np.float32)
    if x.ndim == 1:
        x = x[:, None]
    return sr, x.T


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_manifest_clips(manifest_path) -> Iterator[MultichannelClip]:
    """Ingest WAV recordings listed in a manifest (real or synthetic)."""
    manifest_path = Path(manifest_path)
    for rec in read_manifest(manifest_path):
        if not rec.get("path"):
            raise DataError(f"manifest record without audio path: {rec}")
        sr, chans = read_wav(manifest_path.parent / rec["path"])
        span = tuple(rec["keyword_span"]) if rec.get("keyword_span") else None
        meta = {k: v for k, v in rec.items() if k not in ("path", "keyword_span", "label")}
        yield MultichannelClip(chans, sr, span, meta)
