"""Stream a synthetic recording through a detector checkpoint in 100 ms chunks.

Usage: python stream_detect.py MODEL.ckpt [THRESHOLD]

Without a trained checkpoint, pass "random" to use an untrained network (it
will fire on nothing useful, but shows the streaming path).
"""

import sys

import numpy as np

from mkws import synth
from mkws.array_sim import ArrayGeometry, SourceSpec, propagate
from mkws.detect import EventPicker, init_stream_state, posteriors
from mkws.frontend import log_mel
from mkws.net import build_base, load_checkpoint


def main(model_path="random", threshold=0.5):
    model = build_base("desk", seed=0) if model_path == "random" else load_checkpoint(model_path)[0]
    geom = ArrayGeometry.default()
    sr = geom.sample_rate
    noise = synth.synth_noise("street", 12.0, 1, sr)
    chans = propagate(geom, SourceSpec(30.0, noise, 60.0)).channels
    onsets = (2 * sr, 7 * sr)
    for k, onset in enumerate(onsets):
        kw = synth.synth_keyword("male" if k else "female", k, sr)
        chans = chans + propagate(geom, SourceSpec(250.0, kw, 66.0), chans.shape[1], onset).channels
    frames = log_mel(chans[0], sr).frames[None]
    state = init_stream_state(model)
    picker = EventPicker(np.array([threshold]))
    events = []
    for i in range(0, frames.shape[1], 10):
        events += picker.push(posteriors(model, frames[:, i:i + 10], "single", state))
    events += picker.flush()
    print("keywords start at", [f"{o / sr:.2f} s" for o in onsets])
    for e in events:
        print(f"event at {e.frame_index / 100:.2f} s, confidence {e.confidence:.3f}")
    if not events:
        print("no events")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "random", float(sys.argv[2]) if len(sys.argv) > 2 else 0.5)
