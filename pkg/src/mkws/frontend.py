"""Candidate mono channels (omni, six fixed beams, ANC) and log-Mel features."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .array_sim import ArrayGeometry, MultichannelClip, fractional_delay_kernel
from .errors import ConfigError, DataError

FRAME_LEN = 400
HOP_LEN = 160
N_FFT = 512
N_MELS = 40
MEL_FMIN = 125.0
MEL_FMAX = 7500.0
LOG_FLOOR = 1e-7

BEAM_AZIMUTHS = (0.0, 60.0, 120.0, 180.0, 240.0, 300.0)
BANK_MODES = ("omni", "omni+anc", "omni+bf6")


# -- fixed beams -------------------------------------------------------------

@dataclass
class BeamSet:
    geometry: ArrayGeometry
    steering_azimuths_deg: tuple = BEAM_AZIMUTHS
    delays: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.steering_azimuths_deg) != 6:
            raise ConfigError("a BeamSet has exactly 6 beams")
        self.delays = np.stack([self.geometry.delays(a) for a in self.steering_azimuths_deg])
        fs = self.geometry.sample_rate
        n_b, n_m = self.delays.shape
        K = max(len(fractional_delay_kernel(0.5)[1]), 1)
        self._taps = np.zeros((n_b, n_m, K))
        self._lens = np.zeros((n_b, n_m), dtype=np.int64)
        self._offsets = np.zeros((n_b, n_m), dtype=np.int64)
        for b in range(n_b):
            for m in range(n_m):
                # advance each microphone by its arrival delay
                off, h = fractional_delay_kernel(-self.delays[b, m] * fs)
                self._taps[b, m, :len(h)] = h[::-1]
                self._lens[b, m] = len(h)
                self._offsets[b, m] = off

    @property
    def tags(self) -> list[str]:
        return [f"bf{int(round(a)):03d}" for a in self.steering_azimuths_deg]


_BEAM_CACHE: dict = {}


def default_beams(geometry: ArrayGeometry) -> BeamSet:
    """The six standard beams for ``geometry``, built once per geometry."""
    key = (np.asarray(geometry.mic_positions).tobytes(), geometry.sample_rate, geometry.speed_of_sound)
    if key not in _BEAM_CACHE:
        _BEAM_CACHE[key] = BeamSet(geometry)
    return _BEAM_CACHE[key]


@numba.njit(cache=True, fastmath=True)
def _delay_and_sum(xp, taps, lens, starts, n_out):
    n_b, n_m, _ = taps.shape
    out = np.zeros((n_b, n_out))
    scale = 1.0 / n_m
    for b in range(n_b):
        ob = out[b]
        for m in range(n_m):
            xm = xp[m]
            h = taps[b, m]
            K = lens[b, m]
            s0 = starts[b, m]
            for n in range(n_out):
                seg = xm[n + s0:n + s0 + K]
                acc = 0.0
                for j in range(K):
                    acc += h[j] * seg[j]
                ob[n] += acc
        for n in range(n_out):
            ob[n] *= scale
    return out


def beamform(clip: MultichannelClip, beams: BeamSet) -> np.ndarray:
    """Delay-and-sum outputs for all six beams, shape (6, N)."""
    g = beams.geometry
    if clip.channels.shape[0] != g.n_mics or clip.sample_rate != g.sample_rate:
        raise ConfigError(
            f"clip has {clip.channels.shape[0]} channels at {clip.sample_rate} Hz; "
            f"beams expect {g.n_mics} at {g.sample_rate} Hz")
    x = np.asarray(clip.channels, dtype=np.float64)
    n = x.shape[1]
    K = beams._taps.shape[2]
    pad = K + int(np.max(np.abs(beams._offsets))) + 1
    xp = np.zeros((x.shape[0], n + 2 * pad))
    xp[:, pad:pad + n] = x
    # y[n] = sum_k h[k] x[n - off - k] = sum_j hr[j] x[n - off - K_bm + 1 + j]
    starts = pad - beams._offsets - beams._lens + 1
    return _delay_and_sum(xp, beams._taps, beams._lens, starts, n)


# -- adaptive noise cancellation ---------------------------------------------

@dataclass
class AncConfig:
    taps: int = 128
    step_size: float = 0.05
    regularization: float = 1e-6
    ref_mics: tuple = (1, 4)
    freeze_seconds: float = 1.0
    hop: int = HOP_LEN
    sample_rate: int = 16000
    min_clip_seconds: float = 1.2

    @property
    def lag_hops(self) -> int:
        return int(round(self.freeze_seconds * self.sample_rate / self.hop))


@numba.njit(cache=True, fastmath=True)
def _anc_kernel(d, u1, u2, w1, w2, f1, f2, ring, t0, hop, lag, mu, eps, record):
    # u1/u2 carry L-1 samples of history: the regressor for d[t] is u[t:t+L]
    L = w1.shape[0]
    n = d.shape[0]
    n_ring = ring.shape[0]
    out = np.empty(n)
    rec = np.zeros((record, 2, L))
    n_rec = 0
    for i in range(n):
        t = t0 + i
        if t % hop == 0:
            J = t // hop
            slot = J % n_ring
            for k in range(L):
                ring[slot, 0, k] = w1[k]
                ring[slot, 1, k] = w2[k]
            if J >= lag:
                src = (J - lag) % n_ring
                for k in range(L):
                    f1[k] = ring[src, 0, k]
                    f2[k] = ring[src, 1, k]
            if n_rec < record:
                for k in range(L):
                    rec[n_rec, 0, k] = f1[k]
                    rec[n_rec, 1, k] = f2[k]
                n_rec += 1
        x1 = u1[i:i + L]
        x2 = u2[i:i + L]
        ya = 0.0
        yf = 0.0
        nrm = 0.0
        for k in range(L):
            a = x1[k]
            b = x2[k]
            ya += w1[k] * a + w2[k] * b
            yf += f1[k] * a + f2[k] * b
            nrm += a * a + b * b
        g = mu * (d[i] - ya) / (nrm + eps)
        for k in range(L):
            w1[k] += g * x1[k]
            w2[k] += g * x2[k]
        out[i] = d[i] - yf
    return out, rec[:n_rec]


class AncProcessor:
    """Streaming 3-microphone noise canceller for one audio stream.

    The primary input is the center microphone delayed by ``taps // 2``; the
    two references are ring-minus-center differences.  NLMS adapts on every
    sample, but the coefficients applied to the output at time ``t`` are the
    snapshot taken ``freeze_seconds`` earlier, so a keyword that began less
    than that long ago cannot have shaped the noise model.
    """

    def __init__(self, config: AncConfig | None = None):
        self.config = config or AncConfig()
        c = self.config
        L = c.taps
        if L % 2:
            raise ConfigError("ANC tap count must be even")
        self.w = np.zeros((2, L))
        self.frozen = np.zeros((2, L))
        self.snapshots = np.zeros((c.lag_hops + 1, 2, L))
        self.t = 0
        self._ref_hist = np.zeros((2, L - 1))
        self._primary_hist = np.zeros(L // 2)

    def process(self, block: np.ndarray, record: bool = False):
        """Process a (mics, n) block; returns the output and, if asked, applied coefficients per hop."""
        c = self.config
        block = np.asarray(block, dtype=np.float64)
        if block.shape[0] < 3 or max(c.ref_mics) >= block.shape[0]:
            raise ConfigError("ANC needs the center microphone and both reference microphones")
        n = block.shape[1]
        primary = block[0]
        refs = np.stack([block[c.ref_mics[0]] - primary, block[c.ref_mics[1]] - primary])
        d = np.concatenate([self._primary_hist, primary])[:n]
        u = np.concatenate([self._ref_hist, refs], axis=1)
        n_rec = (n // c.hop + 2) if record else 0
        out, rec = _anc_kernel(
            np.ascontiguousarray(d), np.ascontiguousarray(u[0]), np.ascontiguousarray(u[1]),
            self.w[0], self.w[1], self.frozen[0], self.frozen[1], self.snapshots,
            self.t, c.hop, c.lag_hops, c.step_size, c.regularization, n_rec)
        hist = c.taps // 2
        self._primary_hist = np.concatenate([self._primary_hist, primary])[-hist:]
        self._ref_hist = u[:, -(c.taps - 1):].copy()
        self.t += n
        return (out, rec) if record else out


@dataclass
class AncOutput:
    signal: np.ndarray
    passthrough: bool = False
    applied: np.ndarray | None = None


def anc_process(clip: MultichannelClip, config: AncConfig | None = None, record: bool = False) -> AncOutput:
    """Run a fresh canceller over a whole clip.

    Clips shorter than ``min_clip_seconds`` cannot build a noise model; the
    omni channel is returned unchanged with ``passthrough`` set.
    """
    config = config or AncConfig()
    if clip.channels.shape[0] < 3:
        raise ConfigError("ANC needs at least 3 channels")
    if clip.duration_s < config.min_clip_seconds:
        return AncOutput(np.asarray(clip.omni, dtype=np.float64).copy(), passthrough=True)
    proc = AncProcessor(config)
    if record:
        out, rec = proc.process(clip.channels, record=True)
        return AncOutput(out, applied=rec)
    return AncOutput(proc.process(clip.channels))


def align_anc(signal: np.ndarray, config: AncConfig | None = None) -> np.ndarray:
    """Undo the primary-path delay so the ANC channel lines up with omni."""
    lag = (config or AncConfig()).taps // 2
    out = np.zeros_like(signal)
    out[:len(signal) - lag] = signal[lag:]
    return out


# -- log-Mel features -------------------------------------------------------

@dataclass
class FeatureMatrix:
    frames: np.ndarray
    channel_tag: str = "omni"
    frame_ms: float = 25.0
    hop_ms: float = 10.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate=16000, n_fft=N_FFT, n_mels=N_MELS, fmin=MEL_FMIN, fmax=MEL_FMAX) -> np.ndarray:
    """Triangular filters evaluated at FFT bin frequencies, shape (n_fft//2+1, n_mels)."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down)).T.copy()


_MEL = mel_filterbank()
_WINDOW = np.hanning(FRAME_LEN + 1)[:-1]


def n_frames_for(n_samples: int) -> int:
    return 0 if n_samples < FRAME_LEN else (n_samples - FRAME_LEN) // HOP_LEN + 1


def log_mel(signal: np.ndarray, sample_rate: int = 16000, channel_tag: str = "omni") -> FeatureMatrix:
    """40 log-Mel energies per 25 ms frame with a 10 ms hop."""
    if sample_rate != 16000:
        raise ConfigError("log_mel expects 16 kHz input")
    x = np.asarray(signal, dtype=np.float64)
    T = n_frames_for(len(x))
    if T == 0:
        return FeatureMatrix(np.zeros((0, N_MELS)), channel_tag)
    frames = np.lib.stride_tricks.sliding_window_view(x, FRAME_LEN)[::HOP_LEN][:T]
    spec = np.fft.rfft(frames * _WINDOW, N_FFT)
    power = spec.real ** 2 + spec.imag ** 2
    energies = power @ _MEL
    return FeatureMatrix(np.log(np.maximum(energies, LOG_FLOOR)), channel_tag)


# -- channel banks -----------------------------------------------------------

def channel_signals(clip: MultichannelClip, tags, geometry: ArrayGeometry | None = None,
                    anc_config: AncConfig | None = None) -> dict[str, np.ndarray]:
    """Time-aligned mono signals for the requested channel tags."""
    geometry = geometry or ArrayGeometry.default(clip.sample_rate)
    out = {}
    if "omni" in tags:
        out["omni"] = np.asarray(clip.omni, dtype=np.float64)
    if "anc" in tags:
        res = anc_process(clip, anc_config)
        out["anc"] = res.signal if res.passthrough else align_anc(res.signal, anc_config)
    bf_tags = [t for t in tags if t.startswith("bf")]
    if bf_tags:
        beams = default_beams(geometry)
        y = beamform(clip, beams)
        for tag, sig in zip(beams.tags, y):
            if tag in bf_tags:
                out[tag] = sig
    missing = set(tags) - set(out)
    if missing:
        raise ConfigError(f"unknown channel tags {sorted(missing)}")
    return {t: out[t] for t in tags}


def bank_tags(mode: str) -> list[str]:
    if mode == "omni":
        return ["omni"]
    if mode == "omni+anc":
        return ["omni", "anc"]
    if mode == "omni+bf6":
        return ["omni"] + [f"bf{int(a):03d}" for a in BEAM_AZIMUTHS]
    raise ConfigError(f"unknown channel bank mode {mode!r}; expected one of {BANK_MODES}")


def make_channel_bank(clip: MultichannelClip, mode: str, geometry: ArrayGeometry | None = None,
                      anc_config: AncConfig | None = None) -> list[FeatureMatrix]:
    """Ordered feature matrices for ``mode``; every matrix has the same frame count."""
    tags = bank_tags(mode)
    sigs = channel_signals(clip, tags, geometry, anc_config)
    n = max(len(s) for s in sigs.values())
    bank = []
    for tag, s in sigs.items():
        if len(s) < n:
            s = np.pad(s, (0, n - len(s)))
        bank.append(log_mel(s, clip.sample_rate, tag))
    return bank


def stack_bank(bank: list[FeatureMatrix]) -> np.ndarray:
    """(C, T, 40) array from a channel bank."""
    return np.stack([fm.frames for fm in bank])


# -- feature dump ------------------------------------------------------------

_FEAT_MAGIC = b"MKWSFEAT"


def write_features(path, features: FeatureMatrix | np.ndarray):
    frames = features.frames if isinstance(features, FeatureMatrix) else np.asarray(features)
    if frames.ndim != 2:
        raise DataError("feature dump expects a (T, D) matrix")
    T, D = frames.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC + struct.pack("<II", T, D))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_features(path, channel_tag: str = "omni") -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if raw[:8] != _FEAT_MAGIC or len(raw) < 16:
        raise DataError(f"{path} is not a feature dump")
    T, D = struct.unpack("<II", raw[8:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != T * D:
        raise DataError(f"{path}: expected {T * D} values, found {data.size}")
    return FeatureMatrix(data.reshape(T, D).astype(np.float64), channel_tag)
