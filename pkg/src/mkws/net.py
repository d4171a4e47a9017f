"""SVDF keyword detector, attention keys network and channel fusion.

All models keep their parameters in ordered ``dict[str, ndarray]`` stores so
the trainer can update them in place and checkpoints serialize them in
declaration order.  Batched evaluation and chunked streaming share the same
kernels, which keeps their posteriors bitwise identical.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import ConfigError, DataError, ShapeError

N_FEATURES = 40


def _rows_matmul(x2d: np.ndarray, w: np.ndarray) -> np.ndarray:
    # a single row would take the gemv path, whose rounding differs from gemm
    if x2d.shape[0] == 1:
        return (np.concatenate([x2d, x2d]) @ w)[:1]
    return x2d @ w


def _matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    lead = x.shape[:-1]
    return _rows_matmul(x.reshape(-1, x.shape[-1]), w).reshape(*lead, w.shape[1])


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- configuration -----------------------------------------------------------

@dataclass
class SvdfSpec:
    nodes: int
    memory: int
    activation: str = "relu"

    def __post_init__(self):
        if self.memory < 1:
            raise ConfigError("SVDF memory must be >= 1")
        if self.activation not in ("relu", "none"):
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class NetConfig:
    """Base detector: SVDF stack with linear bottlenecks, sigmoid head."""

    svdf: list = field(default_factory=list)
    bottleneck: int | None = None
    input_dim: int = N_FEATURES
    feature_offset: float = -10.0
    feature_scale: float = 4.0

    def __post_init__(self):
        self.svdf = [s if isinstance(s, SvdfSpec) else SvdfSpec(**s) if isinstance(s, dict) else SvdfSpec(*s)
                     for s in self.svdf]


@dataclass
class KeysConfig:
    """Attention keys network: one SVDF layer then an affine map to per-feature logits."""

    nodes: int = 44
    memory: int = 8
    input_dim: int = N_FEATURES
    feature_offset: float = -10.0
    feature_scale: float = 4.0


# -- layer kernels -----------------------------------------------------------

@numba.njit(cache=True)
def _time_filter_kernel(s_ext, A, b, T):
    R, _, N = s_ext.shape
    M = A.shape[0]
    y = np.empty((R, T, N))
    for r in range(R):
        for t in range(T):
            row = y[r, t]
            s0 = s_ext[r, t + M - 1]
            a0 = A[0]
            for n in range(N):
                row[n] = b[n] + a0[n] * s0[n]
            for k in range(1, M):
                sk = s_ext[r, t + M - 1 - k]
                ak = A[k]
                for n in range(N):
                    row[n] += ak[n] * sk[n]
    return y


@numba.njit(cache=True)
def _time_filter_grads(dpre, s_ext, A):
    R, T, N = dpre.shape
    M = A.shape[0]
    dA = np.zeros((M, N))
    ds = np.zeros((R, T, N))
    for r in range(R):
        for t in range(T):
            g = dpre[r, t]
            for k in range(M):
                sk = s_ext[r, t + M - 1 - k]
                dak = dA[k]
                for n in range(N):
                    dak[n] += g[n] * sk[n]
                if k <= t:
                    dsk = ds[r, t - k]
                    ak = A[k]
                    for n in range(N):
                        dsk[n] += ak[n] * g[n]
    return dA, ds


def svdf_time_filter(s_ext: np.ndarray, time_filters: np.ndarray, bias: np.ndarray, T: int) -> np.ndarray:
    """Temporal part of an SVDF layer.

    ``s_ext`` holds ``memory - 1`` history frames followed by ``T`` new
    feature-filter outputs along axis -2.  Each output frame is accumulated
    in the same order however the sequence is chunked.
    """
    lead = s_ext.shape[:-2]
    flat = np.ascontiguousarray(s_ext.reshape((-1,) + s_ext.shape[-2:]))
    y = _time_filter_kernel(flat, np.ascontiguousarray(time_filters), np.ascontiguousarray(bias), T)
    return y.reshape(lead + y.shape[1:])


def _pad_history(s: np.ndarray, M: int) -> np.ndarray:
    if M == 1:
        return s
    pad = np.zeros(s.shape[:-2] + (M - 1, s.shape[-1]), dtype=s.dtype)
    return np.concatenate([pad, s], axis=-2)


def svdf_forward(x, feature_filters, time_filters, bias, activation="relu", history=None):
    """Forward an SVDF layer over (..., T, in) frames.

    Returns (output, pre_activation, s_ext).  ``history`` is the previous
    ``memory - 1`` feature-filter outputs (zeros when None).
    """
    if x.shape[-1] != feature_filters.shape[0]:
        raise ShapeError(f"frame dim {x.shape[-1]} != layer input dim {feature_filters.shape[0]}")
    M = time_filters.shape[0]
    s = _matmul(x, feature_filters)
    T = s.shape[-2]
    s_ext = _pad_history(s, M) if history is None else np.concatenate([history, s], axis=-2)
    pre = svdf_time_filter(s_ext, time_filters, bias, T)
    out = np.maximum(pre, 0.0) if activation == "relu" else pre
    return out, pre, s_ext


def svdf_backward(dout, x, pre, s_ext, feature_filters, time_filters, activation="relu", need_dx=True):
    dpre = dout * (pre > 0) if activation == "relu" else dout
    lead = tuple(range(dpre.ndim - 1))
    db = dpre.sum(axis=lead)
    shape = dpre.shape
    dA, ds = _time_filter_grads(np.ascontiguousarray(dpre.reshape((-1,) + shape[-2:])),
                                np.ascontiguousarray(s_ext.reshape((-1,) + s_ext.shape[-2:])),
                                np.ascontiguousarray(time_filters))
    ds = ds.reshape(shape)
    x2 = x.reshape(-1, x.shape[-1])
    dWf = x2.T @ ds.reshape(-1, ds.shape[-1])
    dx = _matmul(ds, np.ascontiguousarray(feature_filters.T)) if need_dx else None
    return dx, dWf, dA, db


# -- models ------------------------------------------------------------------

class KwsNetwork:
    """SVDF stack -> affine -> sigmoid per-frame keyword posterior."""

    kind = "base"

    def __init__(self, config: NetConfig, params: dict | None = None, seed=0, channel: str = "omni"):
        self.config = config
        self.channel = channel
        self.params = params if params is not None else self._init(seed)

    def _layer_names(self):
        names = []
        d = self.config.input_dim
        for i, spec in enumerate(self.config.svdf):
            if i > 0 and self.config.bottleneck:
                names.append(("bottleneck", i, d, self.config.bottleneck))
                d = self.config.bottleneck
            names.append(("svdf", i, d, spec))
            d = spec.nodes
        return names, d

    def _init(self, seed):
        rng = np.random.default_rng(seed)
        p = {}
        layers, d_out = self._layer_names()
        for kind, i, d_in, spec in layers:
            if kind == "bottleneck":
                p[f"proj{i}.w"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, spec))
                p[f"proj{i}.b"] = np.zeros(spec)
            else:
                p[f"svdf{i}.feature"] = rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, spec.nodes))
                p[f"svdf{i}.time"] = rng.normal(0.0, 1.0 / np.sqrt(spec.memory), (spec.memory, spec.nodes))
                p[f"svdf{i}.bias"] = np.zeros(spec.nodes)
        if self.config.svdf:
            p["out.w"] = rng.normal(0.0, 1.0 / np.sqrt(d_out), d_out)
            p["out.b"] = np.array([-2.0])
        return p

    def parameters(self) -> dict:
        return self.params

    def _normalize(self, x):
        return (x - self.config.feature_offset) / self.config.feature_scale

    def forward(self, x: np.ndarray, keep_cache=False, state=None):
        """Posteriors for (..., T, D) features; returns (posteriors, cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.config.input_dim:
            raise ShapeError(f"expected {self.config.input_dim}-dim frames, got {x.shape[-1]}")
        p = self.params
        h = self._normalize(x)
        cache = []
        layers, _ = self._layer_names()
        for kind, i, _d, spec in layers:
            if kind == "bottleneck":
                inp = h
                h = _matmul(h, p[f"proj{i}.w"]) + p[f"proj{i}.b"]
                cache.append(("bottleneck", i, inp))
            else:
                hist = None if state is None else state[i]
                inp = h
                h, pre, s_ext = svdf_forward(h, p[f"svdf{i}.feature"], p[f"svdf{i}.time"], p[f"svdf{i}.bias"],
                                             spec.activation, hist)
                if state is not None:
                    state[i] = s_ext[..., s_ext.shape[-2] - (spec.memory - 1):, :]
                cache.append(("svdf", i, inp, pre, s_ext, spec))
        logits = (h * p["out.w"]).sum(axis=-1) + p["out.b"][0]
        post = sigmoid(logits)
        return post, ((cache, h, logits) if keep_cache else None)

    def backward(self, cache, dlogits, need_dx=False):
        """Parameter gradients given d(loss)/d(logits); optionally d(loss)/d(input features)."""
        layers, h, _ = cache
        p = self.params
        g = {}
        g["out.w"] = (dlogits[..., None] * h).reshape(-1, h.shape[-1]).sum(axis=0)
        g["out.b"] = np.array([dlogits.sum()])
        dh = dlogits[..., None] * p["out.w"]
        for idx in range(len(layers) - 1, -1, -1):
            entry = layers[idx]
            last = idx == 0
            if entry[0] == "bottleneck":
                _, i, inp = entry
                g[f"proj{i}.w"] = inp.reshape(-1, inp.shape[-1]).T @ dh.reshape(-1, dh.shape[-1])
                g[f"proj{i}.b"] = dh.reshape(-1, dh.shape[-1]).sum(axis=0)
                dh = _matmul(dh, np.ascontiguousarray(p[f"proj{i}.w"].T))
            else:
                _, i, inp, pre, s_ext, spec = entry
                dh, dWf, dA, db = svdf_backward(dh, inp, pre, s_ext, p[f"svdf{i}.feature"], p[f"svdf{i}.time"],
                                                spec.activation, need_dx=need_dx or not last)
                g[f"svdf{i}.feature"], g[f"svdf{i}.time"], g[f"svdf{i}.bias"] = dWf, dA, db
        dx = dh / self.config.feature_scale if need_dx else None
        return g, dx

    def init_state(self, batch_shape=()):
        return {i: np.zeros(batch_shape + (spec.memory - 1, spec.nodes)) for i, spec in enumerate(self.config.svdf)}

    def descriptor(self) -> dict:
        return {"kind": "base", "channel": self.channel, "config": _config_dict(self.config)}


class AttentionKeysNet:
    """Shared per-channel network producing one logit per feature."""

    def __init__(self, config: KeysConfig, params: dict | None = None, seed=0, zero_output=True):
        self.config = config
        if params is None:
            rng = np.random.default_rng(seed)
            c = config
            params = {
                "svdf.feature": rng.normal(0.0, np.sqrt(2.0 / c.input_dim), (c.input_dim, c.nodes)),
                "svdf.time": rng.normal(0.0, 1.0 / np.sqrt(c.memory), (c.memory, c.nodes)),
                "svdf.bias": np.zeros(c.nodes),
                "out.w": (np.zeros((c.nodes, c.input_dim)) if zero_output
                          else rng.normal(0.0, 1.0 / np.sqrt(c.nodes), (c.nodes, c.input_dim))),
                "out.b": np.zeros(c.input_dim),
            }
        self.params = params

    def parameters(self):
        return self.params

    def forward(self, z, keep_cache=False, state=None):
        """Logits e for features z of shape (C, ..., T, D)."""
        c, p = self.config, self.params
        x = (z - c.feature_offset) / c.feature_scale
        h, pre, s_ext = svdf_forward(x, p["svdf.feature"], p["svdf.time"], p["svdf.bias"], "relu", state)
        e = _matmul(h, p["out.w"]) + p["out.b"]
        new_state = s_ext[..., s_ext.shape[-2] - (c.memory - 1):, :]
        return e, ((x, h, pre, s_ext) if keep_cache else None), new_state

    def backward(self, cache, de):
        x, h, pre, s_ext = cache
        p = self.params
        g = {
            "out.w": h.reshape(-1, h.shape[-1]).T @ de.reshape(-1, de.shape[-1]),
            "out.b": de.reshape(-1, de.shape[-1]).sum(axis=0),
        }
        dh = _matmul(de, np.ascontiguousarray(p["out.w"].T))
        dx, dWf, dA, db = svdf_backward(dh, x, pre, s_ext, p["svdf.feature"], p["svdf.time"], "relu")
        g["svdf.feature"], g["svdf.time"], g["svdf.bias"] = dWf, dA, db
        return g, dx / self.config.feature_scale


@dataclass
class FusedFrame:
    alpha: np.ndarray
    z_star: np.ndarray


def softmax_channels(e: np.ndarray) -> np.ndarray:
    """Softmax over axis 0 (channels), independently per feature."""
    shifted = e - e.max(axis=0, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=0, keepdims=True)


def fuse(z: np.ndarray, e: np.ndarray) -> FusedFrame:
    """Per-feature convex combination of channels weighted by softmax(e).

    Written as ``z_0 + sum_i alpha_i (z_i - z_0)`` so that identical channels
    (and a single channel) come back exactly.
    """
    alpha = softmax_channels(e)
    return FusedFrame(alpha, z[0] + (alpha[1:] * (z[1:] - z[0])).sum(axis=0))


def attention_fuse(keys_net: AttentionKeysNet, frames: np.ndarray, state=None) -> FusedFrame:
    """Fuse a (C, ..., T, 40) channel bank through the keys network."""
    z = np.asarray(frames, dtype=np.float64)
    if z.shape[0] < 1:
        raise ShapeError("need at least one channel")
    e, _, _ = keys_net.forward(z, state=state)
    return fuse(z, e)


class AttentionKws:
    """Keys network in front of a base detector; input is a (C, ..., T, D) bank."""

    kind = "attention"

    def __init__(self, keys: AttentionKeysNet, base: KwsNetwork, channel_tags):
        self.keys = keys
        self.base = base
        self.channel_tags = list(channel_tags)

    def parameters(self) -> dict:
        out = {f"keys/{k}": v for k, v in self.keys.params.items()}
        out.update({f"base/{k}": v for k, v in self.base.params.items()})
        return out

    def forward(self, z, keep_cache=False, state=None):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[0] != len(self.channel_tags):
            raise ShapeError(f"bank has {z.shape[0]} channels, model expects {len(self.channel_tags)}")
        kstate = None if state is None else state["keys"]
        e, kcache, new_k = self.keys.forward(z, keep_cache, kstate)
        fused = fuse(z, e)
        bstate = None if state is None else state["base"]
        post, bcache = self.base.forward(fused.z_star, keep_cache, bstate)
        if state is not None:
            state["keys"] = new_k
        cache = (z, fused, kcache, bcache) if keep_cache else None
        return post, cache

    def backward(self, cache, dlogits, need_dx=False):
        z, fused, kcache, bcache = cache
        gb, dzs = self.base.backward(bcache, dlogits, need_dx=True)
        alpha = fused.alpha
        dalpha = z * dzs
        de = alpha * (dalpha - (alpha * dalpha).sum(axis=0, keepdims=True))
        gk, dz_keys = self.keys.backward(kcache, de)
        g = {f"keys/{k}": v for k, v in gk.items()}
        g.update({f"base/{k}": v for k, v in gb.items()})
        dz = alpha * dzs + dz_keys if need_dx else None
        return g, dz

    def init_state(self, batch_shape=()):
        c = self.keys.config
        C = len(self.channel_tags)
        return {"keys": np.zeros((C,) + batch_shape + (c.memory - 1, c.nodes)),
                "base": self.base.init_state(batch_shape)}

    def descriptor(self) -> dict:
        return {"kind": "attention", "channels": self.channel_tags,
                "keys_config": asdict(self.keys.config), "base": self.base.descriptor()}


class EnsembleKws:
    """One base detector per channel; decisions are OR-ed with per-channel thresholds."""

    kind = "ensemble"

    def __init__(self, members: list[KwsNetwork], channel_tags):
        if len(members) != len(channel_tags):
            raise ConfigError("one member per channel")
        self.members = members
        self.channel_tags = list(channel_tags)

    def parameters(self) -> dict:
        out = {}
        for i, m in enumerate(self.members):
            out.update({f"m{i}/{k}": v for k, v in m.params.items()})
        return out

    def descriptor(self) -> dict:
        return {"kind": "ensemble", "channels": self.channel_tags, "members": [m.descriptor() for m in self.members]}


# -- presets and parameter counts --------------------------------------------

def count_params(network) -> int:
    """Exact number of trainable scalars in a model or parameter dict."""
    if network is None:
        return 0
    params = network if isinstance(network, dict) else network.parameters()
    return int(sum(np.asarray(v).size for v in params.values()))


PRESETS = {
    "paper": {
        "base": NetConfig([SvdfSpec(640, 32)] * 4, bottleneck=160),
        "base_x2": NetConfig([SvdfSpec(920, 32)] * 4, bottleneck=240),
        "keys": KeysConfig(nodes=561, memory=8),
    },
    "desk": {
        "base": NetConfig([SvdfSpec(128, 16)] * 4, bottleneck=48),
        "base_x2": NetConfig([SvdfSpec(184, 16)] * 4, bottleneck=76),
        "keys": KeysConfig(nodes=44, memory=8),
    },
}


def preset(scale: str, name: str):
    try:
        cfg = PRESETS[scale][name]
    except KeyError:
        raise ConfigError(f"unknown preset {scale}/{name}") from None
    if isinstance(cfg, NetConfig):
        return NetConfig([SvdfSpec(s.nodes, s.memory, s.activation) for s in cfg.svdf], cfg.bottleneck,
                         cfg.input_dim, cfg.feature_offset, cfg.feature_scale)
    return KeysConfig(**asdict(cfg))


def build_base(scale="desk", seed=0, name="base", channel="omni", n_layers=None) -> KwsNetwork:
    cfg = preset(scale, name)
    if n_layers is not None:
        cfg.svdf = cfg.svdf[:n_layers]
    return KwsNetwork(cfg, seed=seed, channel=channel)


def build_attention(base: KwsNetwork, channel_tags, scale="desk", seed=0, zero_output=True) -> AttentionKws:
    keys = AttentionKeysNet(preset(scale, "keys"), seed=seed, zero_output=zero_output)
    return AttentionKws(keys, base, channel_tags)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"MKWSCKPT"
CKPT_VERSION = 1


def _config_dict(cfg: NetConfig) -> dict:
    d = asdict(cfg)
    d["svdf"] = [asdict(s) for s in cfg.svdf]
    return d


def _net_from(desc: dict, params: dict) -> KwsNetwork:
    return KwsNetwork(NetConfig(**desc["config"]), params, channel=desc.get("channel", "omni"))


def save_checkpoint(path, model, metadata: dict | None = None) -> int:
    """Write a little-endian float32 checkpoint; returns its size in bytes."""
    params = model.parameters()
    desc = {
        "model": model.descriptor(),
        "tensors": [[name, list(np.shape(v))] for name, v in params.items()],
        "metadata": metadata or {},
    }
    blob = json.dumps(desc, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for v in params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path):
    """Returns (model, metadata)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path} is not a checkpoint")
    version, n = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    desc = json.loads(raw[16:16 + n])
    off = 16 + n
    flat = {}
    for name, shape in desc["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).astype(np.float64).reshape(shape)
        flat[name] = arr
        off += 4 * size
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes after tensors")
    m = desc["model"]
    if m["kind"] == "base":
        model = _net_from(m, flat)
    elif m["kind"] == "attention":
        keys = AttentionKeysNet(KeysConfig(**m["keys_config"]),
                                {k[5:]: v for k, v in flat.items() if k.startswith("keys/")})
        base = _net_from(m["base"], {k[5:]: v for k, v in flat.items() if k.startswith("base/")})
        model = AttentionKws(keys, base, m["channels"])
    elif m["kind"] == "ensemble":
        members = []
        for i, md in enumerate(m["members"]):
            pre = f"m{i}/"
            members.append(_net_from(md, {k[len(pre):]: v for k, v in flat.items() if k.startswith(pre)}))
        model = EnsembleKws(members, m["channels"])
    else:
        raise DataError(f"unknown model kind {m['kind']!r}")
    return model, desc["metadata"]
