"""Real-time factor and model-size measurements.

Every timing runs under a single BLAS/OpenMP worker.  The first run of each
measurement is a warm-up (JIT compilation, caches) and is discarded; the
reported figure is the median of the remaining repeats.
"""

from __future__ import annotations

import csv
import os
import platform
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import synth
from .array_sim import ArrayGeometry, MultichannelClip, SourceSpec, propagate
from .detect import init_stream_state, posteriors
from .errors import ConfigError
from .frontend import AncConfig, AncProcessor, BeamSet, align_anc, beamform, log_mel
from .net import AttentionKws, EnsembleKws, build_attention, build_base, count_params, save_checkpoint

MIN_BENCH_SECONDS = 10.0
FRONTENDS = ("bf6", "anc")
VARIANTS = ("base", "base_anc", "base_x2", "ensemble_anc", "attention_bf", "attention_anc")
VARIANT_TAGS = {
    "base": ("omni",),
    "base_anc": ("anc",),
    "base_x2": ("omni",),
    "ensemble_anc": ("omni", "anc"),
    "attention_bf": ("omni", "bf000", "bf060", "bf120", "bf180", "bf240", "bf300"),
    "attention_anc": ("omni", "anc"),
}


@dataclass
class BenchResult:
    component: str
    rtf_samples: list
    audio_seconds: float
    model_size_bytes: int = 0
    peak_memory_estimate_bytes: int = 0
    host: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.rtf_samples or min(self.rtf_samples) <= 0:
            raise ConfigError("benchmark produced no positive timings")

    @property
    def rtf(self) -> float:
        return float(np.median(self.rtf_samples))

    @property
    def rtf_cv(self) -> float:
        s = np.asarray(self.rtf_samples)
        return float(s.std() / s.mean()) if len(s) > 1 else 0.0

    def row(self) -> dict:
        return {"component": self.component, "host": self.host, "rtf_median": f"{self.rtf:.6g}",
                "rtf_cv": f"{self.rtf_cv:.4f}", "model_bytes": self.model_size_bytes}


def host_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} py{platform.python_version()} numpy{np.__version__}"


def bench_clip(duration_s: float, seed=0, geometry=None):
    """A 7-channel test clip: a keyword every few seconds over directional street noise."""
    if duration_s < MIN_BENCH_SECONDS:
        raise ConfigError(f"benchmarks need at least {MIN_BENCH_SECONDS:g} s of audio, got {duration_s}")
    geometry = geometry or ArrayGeometry.default()
    sr = geometry.sample_rate
    n = int(round(duration_s * sr))
    noise = synth.synth_noise("street", duration_s, seed, sr)
    chans = propagate(geometry, SourceSpec(40.0, noise, 60.0), n).channels
    kw = synth.synth_keyword("female", seed, sr)
    for onset in range(sr, n - len(kw), 4 * sr):
        chans = chans + propagate(geometry, SourceSpec(200.0, kw, 55.0), n, onset).channels
    return chans.astype(np.float32), geometry


def _time_runs(fn, repeats):
    fn()  # warm-up
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def bench_frontend(algorithm: str, duration_s=10.0, repeats=5, seed=0) -> BenchResult:
    """RTF of the six-beam beamformer or of the noise canceller on one worker."""
    if algorithm not in FRONTENDS:
        raise ConfigError(f"unknown front-end {algorithm!r}; expected one of {FRONTENDS}")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    chans, geometry = bench_clip(duration_s, seed)
    if algorithm == "bf6":
        beams = BeamSet(geometry)
        clip = MultichannelClip(chans, geometry.sample_rate)
        fn = lambda: beamform(clip, beams)  # noqa: E731
        state_bytes = chans.shape[0] * 32 * 8
    else:
        cfg = AncConfig()
        fn = lambda: AncProcessor(cfg).process(chans)  # noqa: E731
        state_bytes = (2 * cfg.taps * (cfg.lag_hops + 3) + 3 * cfg.taps) * 8
    with threadpool_limits(1):
        runs = _time_runs(fn, repeats)
    return BenchResult(algorithm, [r / duration_s for r in runs], duration_s, 0, state_bytes, host_descriptor())


def build_variant(variant: str, scale="paper", seed=0):
    """Randomly initialised model of the requested size (timing does not depend on the weights)."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    tags = VARIANT_TAGS[variant]
    if variant == "base_x2":
        return build_base(scale, seed, name="base_x2")
    if variant in ("base", "base_anc"):
        return build_base(scale, seed, channel=tags[0])
    if variant == "ensemble_anc":
        return EnsembleKws([build_base(scale, seed, channel="omni"), build_base(scale, seed + 1, channel="anc")], tags)
    return build_attention(build_base(scale, seed), tags, scale, seed + 1, zero_output=False)


def variant_mode(model) -> str:
    if isinstance(model, AttentionKws):
        return "attention"
    if isinstance(model, EnsembleKws):
        return "ensemble"
    return "single"


def _state_bytes(model) -> int:
    if isinstance(model, EnsembleKws):
        return sum(_state_bytes(m) for m in model.members)
    state = model.init_state()
    if isinstance(model, AttentionKws):
        return 8 * (state["keys"].size + sum(v.size for v in state["base"].values()))
    return 8 * sum(v.size for v in state.values())


class StreamingDetector:
    """Audio-in, posteriors-out pipeline for one stream, processed in fixed chunks."""

    def __init__(self, model, tags, geometry):
        self.model = model
        self.tags = list(tags)
        self.mode = variant_mode(model)
        self.geometry = geometry
        self.beams = BeamSet(geometry) if any(t.startswith("bf") for t in tags) else None
        self.anc_config = AncConfig()

    def run(self, chans, chunk_frames=100):
        """Front-end over the whole block, then chunked stateful inference."""
        sigs = []
        anc = None
        if "anc" in self.tags:
            anc = align_anc(AncProcessor(self.anc_config).process(chans), self.anc_config)
        bf = None
        if self.beams is not None:
            bf = dict(zip(self.beams.tags, beamform(MultichannelClip(chans, self.geometry.sample_rate), self.beams)))
        for t in self.tags:
            sigs.append(chans[0] if t == "omni" else anc if t == "anc" else bf[t])
        z = np.stack([log_mel(s, self.geometry.sample_rate, t).frames for s, t in zip(sigs, self.tags)])
        state = init_stream_state(self.model, self.mode, z.shape[0])
        out = [posteriors(self.model, z[:, i:i + chunk_frames], self.mode, state)
               for i in range(0, z.shape[1], chunk_frames)]
        return np.concatenate(out, axis=1)


def checkpoint_bytes(model) -> int:
    with tempfile.TemporaryDirectory() as d:
        return save_checkpoint(Path(d) / "model.ckpt", model)


def bench_detector(variant: str, duration_s=10.0, repeats=5, scale="paper", seed=0, model=None,
                   chunk_frames=100) -> BenchResult:
    """RTF of the full feature plus inference path for one of the six approaches."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    model = model if model is not None else build_variant(variant, scale, seed)
    tags = VARIANT_TAGS.get(variant) or tuple(getattr(model, "channel_tags", [getattr(model, "channel", "omni")]))
    chans, geometry = bench_clip(duration_s, seed)
    det = StreamingDetector(model, tags, geometry)
    with threadpool_limits(1):
        runs = _time_runs(lambda: det.run(chans, chunk_frames), repeats)
    size = checkpoint_bytes(model)
    mem = 8 * count_params(model) + _state_bytes(model)
    return BenchResult(variant, [r / duration_s for r in runs], duration_s, size, mem, host_descriptor(),
                       {"params": count_params(model)})


def write_bench_csv(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["component", "host", "rtf_median", "rtf_cv", "model_bytes"])
        w.writeheader()
        for r in results:
            w.writerow(r.row())
