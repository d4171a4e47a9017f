"""Turning per-frame posteriors into countable keyword events.

A frame *fires* when any channel's confidence exceeds that channel's
threshold.  The first firing frame after the refractory period opens a
30-frame window; the event is placed at the strongest frame of that window
and carries its confidence.  No new window can open until 100 frames after
the event.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .net import AttentionKws, EnsembleKws, KwsNetwork

PEAK_WINDOW = 30
REFRACTORY = 100
DETECT_MODES = ("single", "attention", "ensemble", "oracle")


@dataclass(frozen=True)
class DetectionEvent:
    frame_index: int
    confidence: float


def ensemble_decide(confidences, thresholds) -> bool:
    """Logical OR of per-channel threshold tests."""
    c = np.atleast_1d(np.asarray(confidences, dtype=np.float64))
    t = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    if c.shape != t.shape:
        raise ShapeError(f"{c.size} confidences but {t.size} thresholds")
    return bool(np.any(c > t))


def oracle_fuse(confidences):
    """Best confidence over channels (axis 0)."""
    c = np.asarray(confidences, dtype=np.float64)
    if c.ndim == 0 or c.shape[0] < 1:
        raise ShapeError("need at least one channel")
    return c.max(axis=0)


def _as_channels(conf, thresholds):
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim == 1:
        conf = conf[None]
    thr = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (conf.shape[0],))
    if np.any((thr <= 0) | (thr >= 1)):
        raise ConfigError("thresholds must lie in (0, 1)")
    return conf, thr


class EventPicker:
    """Streaming event extractor; feeding chunks gives the same events as one call."""

    def __init__(self, thresholds, window=PEAK_WINDOW, refractory=REFRACTORY):
        self.thresholds = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
        if np.any((self.thresholds <= 0) | (self.thresholds >= 1)):
            raise ConfigError("thresholds must lie in (0, 1)")
        self.window = window
        self.refractory = refractory
        self.t = 0
        self.ready_at = 0
        self._open = None  # (window end, best frame, best confidence)

    def push(self, conf) -> list[DetectionEvent]:
        conf, _ = _as_channels(conf, self.thresholds)
        fires = (conf > self.thresholds[:, None]).any(axis=0)
        peak = conf.max(axis=0)
        events = []
        for k in range(conf.shape[1]):
            t = self.t + k
            if self._open is not None:
                end, best_t, best = self._open
                if t < end:
                    if peak[k] > best:
                        self._open = (end, t, peak[k])
                    continue
                events.append(self._close())
            if fires[k] and t >= self.ready_at:
                self._open = (t + self.window, t, peak[k])
        self.t += conf.shape[1]
        return events

    def _close(self) -> DetectionEvent:
        _, best_t, best = self._open
        self._open = None
        self.ready_at = best_t + self.refractory
        return DetectionEvent(int(best_t), float(best))

    def flush(self) -> list[DetectionEvent]:
        """Close a window left open at the end of the stream."""
        return [self._close()] if self._open is not None else []


def pick_events(conf, thresholds, window=PEAK_WINDOW, refractory=REFRACTORY) -> list[DetectionEvent]:
    """Events for a (T,) or (C, T) confidence track."""
    conf = np.asarray(conf, dtype=np.float64)
    if conf.size == 0:
        return []
    picker = EventPicker(thresholds, window, refractory)
    return picker.push(conf) + picker.flush()


def posteriors(model, bank, mode="single", state=None) -> np.ndarray:
    """Per-frame confidence tracks, shape (C_out, T).

    ``bank`` is a (C, T, 40) feature stack.  Single and attention models yield
    one track; ensembles yield one per member; oracle mode runs a single
    network over every channel and keeps all tracks so the caller can take
    the best.
    """
    z = np.asarray(bank, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    if mode not in DETECT_MODES:
        raise ConfigError(f"unknown detection mode {mode!r}; expected one of {DETECT_MODES}")
    if mode == "attention":
        if not isinstance(model, AttentionKws):
            raise ConfigError("attention mode needs an attention model")
        post, _ = model.forward(z, state=state)
        return post[None]
    if mode == "ensemble":
        if not isinstance(model, EnsembleKws):
            raise ConfigError("ensemble mode needs an ensemble model")
        if z.shape[0] != len(model.members):
            raise ShapeError(f"bank has {z.shape[0]} channels, ensemble has {len(model.members)} members")
        return np.stack([m.forward(z[i], state=None if state is None else state[i])[0]
                         for i, m in enumerate(model.members)])
    if not isinstance(model, KwsNetwork):
        raise ConfigError(f"{mode} mode needs a base network")
    if mode == "single":
        if z.shape[0] != 1:
            raise ShapeError("single mode takes exactly one channel")
        return model.forward(z[0], state=state)[0][None]
    return model.forward(z, state=state)[0]


def init_stream_state(model, mode="single", n_channels=1):
    if mode == "ensemble":
        return [m.init_state() for m in model.members]
    if mode == "oracle":
        return model.init_state((n_channels,))
    return model.init_state()


def detect_stream(model, bank, thresholds, mode="single", chunk_frames=None) -> list[DetectionEvent]:
    """Detection events for one feature bank.

    With ``chunk_frames`` the bank is fed through the model in stateful
    chunks, exactly as a live stream would be; the resulting posteriors are
    bitwise identical to a single batched pass.
    """
    z = np.asarray(bank, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    if z.shape[-2] == 0:
        return []
    if chunk_frames is None:
        conf = posteriors(model, z, mode)
    else:
        state = init_stream_state(model, mode, z.shape[0])
        conf = np.concatenate([posteriors(model, z[:, i:i + chunk_frames], mode, state)
                               for i in range(0, z.shape[1], chunk_frames)], axis=1)
    if mode == "oracle":
        conf = oracle_fuse(conf)
    return pick_events(conf, thresholds)
