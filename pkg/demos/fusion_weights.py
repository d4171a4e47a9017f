"""Show how the attention keys network splits each Mel bin between channels.

Feeds a clean omni channel and a copy with loud noise added to the lower Mel
bins through a randomly initialised keys network, then prints the mean weight
per channel for the low and high halves of the filterbank.
"""

import numpy as np

from mkws.frontend import log_mel, stack_bank
from mkws.net import AttentionKeysNet, fuse, preset


def main(seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(32000) / 16000
    tone = 0.1 * np.sin(2 * np.pi * 1200 * t) * (1 + np.sin(2 * np.pi * 3 * t))
    hum = tone + 0.3 * np.sin(2 * np.pi * 180 * t) + 0.05 * rng.standard_normal(t.size)
    bank = stack_bank([log_mel(tone, channel_tag="omni"), log_mel(hum, channel_tag="noisy")])
    keys = AttentionKeysNet(preset("desk", "keys"), seed=seed, zero_output=False)
    e, _, _ = keys.forward(bank)
    fused = fuse(bank, e)
    for c, tag in enumerate(("omni", "noisy")):
        a = fused.alpha[c]
        print(f"{tag:6s} weight: low bins {a[..., :20].mean():.3f}, high bins {a[..., 20:].mean():.3f}")
    print("weights sum to one per bin:", np.allclose(fused.alpha.sum(axis=0), 1.0))


if __name__ == "__main__":
    main()
