"""Parametric keyword and noise generators.

The keyword is a three-vowel harmonic phrase ("a", "i", "u") whose pitch and
formant scale depend on the voice preset.  Non-keyword phrases reuse the same
synthesizer with other vowel orders, which gives confusable negatives.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

SAMPLE_RATE = 16000

# (F1, F2, F3) in Hz for an adult male speaker.
VOWEL_FORMANTS = {
    "a": (730.0, 1090.0, 2440.0),
    "i": (270.0, 2290.0, 3010.0),
    "u": (300.0, 870.0, 2240.0),
    "e": (530.0, 1840.0, 2480.0),
    "o": (570.0, 840.0, 2410.0),
    "ae": (660.0, 1720.0, 2410.0),
}
KEYWORD_VOWELS = ("a", "i", "u")
# background talkers (babble, tv) avoid keyword vowels so overlapping streams never spell the keyword
BACKGROUND_VOWELS = ("e", "o", "ae")

# preset -> (f0 Hz, formant scale)
VOICE_PRESETS = {
    "male": (120.0, 1.0),
    "female": (210.0, 1.15),
    "child": (300.0, 1.3),
}

NOISE_TYPES = ("white", "pink", "babble", "am_tone", "kitchen", "street", "vacuum", "tv")
LAB_NOISE_TYPES = ("kitchen", "street", "vacuum", "white", "pink", "tv")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _peak_normalize(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 0:
        x = x / peak
    return x


def _segment(vowel, f0, scale, n, rng, sr):
    formants = np.array(VOWEL_FORMANTS[vowel]) * scale
    bandwidths = 60.0 + 0.08 * formants
    gains = np.array([1.0, 0.6, 0.3])
    glide = rng.uniform(-0.08, 0.08, size=2)
    f0_track = f0 * np.linspace(1.0 + glide[0], 1.0 + glide[1], n)
    phase = 2 * np.pi * np.cumsum(f0_track) / sr
    n_harm = int(5500.0 // f0_track.max())
    h = np.arange(1, n_harm + 1)[:, None]
    # harmonic amplitudes vary slowly with the glide, so evaluate them coarsely
    coarse = np.arange(0, n + 64, 32)
    fh = h * np.interp(coarse, np.arange(n), f0_track)
    amp = 0.02 / h + np.sum(
        gains[:, None, None] * np.exp(-0.5 * ((fh[None] - formants[:, None, None]) / bandwidths[:, None, None]) ** 2),
        axis=0,
    )
    pos = np.arange(n) / 32.0
    i0 = pos.astype(int)
    frac = pos - i0
    amp = amp[:, i0] * (1.0 - frac) + amp[:, i0 + 1] * frac
    offsets = rng.uniform(0, 2 * np.pi, size=(n_harm, 1))
    out = np.sum(amp * np.sin(h * phase + offsets), axis=0)
    return out


def synth_phrase(vowels, voice_preset="male", seed=0, segment_s=0.18, sample_rate=SAMPLE_RATE):
    """Synthesize a sequence of harmonic vowel segments, peak-normalized.

    Segment durations and pitch glides are jittered by ``seed`` so every
    (preset, seed) pair yields a distinct but reproducible rendition.
    """
    if voice_preset not in VOICE_PRESETS:
        raise ConfigError(f"unknown voice preset {voice_preset!r}; expected one of {sorted(VOICE_PRESETS)}")
    for v in vowels:
        if v not in VOWEL_FORMANTS:
            raise ConfigError(f"unknown vowel {v!r}")
    rng = _rng(seed)
    f0, scale = VOICE_PRESETS[voice_preset]
    f0 = f0 * rng.uniform(0.93, 1.07)
    xfade = int(0.015 * sample_rate)
    pieces = []
    for v in vowels:
        n = int(segment_s * rng.uniform(0.9, 1.1) * sample_rate)
        pieces.append(_segment(v, f0, scale, n + xfade, rng, sample_rate))
    total = sum(len(p) for p in pieces) - xfade * (len(pieces) - 1)
    out = np.zeros(total)
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, xfade))
    pos = 0
    for i, p in enumerate(pieces):
        p = p.copy()
        if i > 0:
            p[:xfade] *= ramp
        if i < len(pieces) - 1:
            p[-xfade:] *= ramp[::-1]
        out[pos:pos + len(p)] += p
        pos += len(p) - xfade
    edge = int(0.02 * sample_rate)
    env = np.ones(total)
    env[:edge] = np.linspace(0, 1, edge)
    env[-edge:] = np.linspace(1, 0, edge)
    return _peak_normalize(out * env)


def synth_keyword(voice_preset="male", seed=0, sample_rate=SAMPLE_RATE):
    """The activation phrase for one voice preset."""
    return synth_phrase(KEYWORD_VOWELS, voice_preset, seed, sample_rate=sample_rate)


def random_non_keyword_vowels(rng) -> tuple:
    """A random vowel sequence of length 1-4 that never contains the keyword's opening pair.

    A causal detector cannot tell the keyword from its own prefix until the
    last vowel arrives, so negatives that start like the keyword are left out.
    """
    rng = _rng(rng)
    names = sorted(VOWEL_FORMANTS)
    prefix = KEYWORD_VOWELS[:2]
    while True:
        n = int(rng.integers(1, 5))
        seq = tuple(names[i] for i in rng.integers(0, len(names), size=n))
        if not any(seq[i:i + 2] == prefix for i in range(len(seq) - 1)):
            return seq


def synth_distractor(seed=0, voice_preset=None, sample_rate=SAMPLE_RATE):
    """A speech-like non-keyword phrase; about a third reuse keyword vowels out of order."""
    rng = _rng(seed)
    if voice_preset is None:
        voice_preset = sorted(VOICE_PRESETS)[int(rng.integers(0, len(VOICE_PRESETS)))]
    if rng.random() < 0.35:
        partial = [("i", "u"), ("e", "i", "u"), ("a", "u", "i"), ("u", "i", "a"), ("a", "o", "u"), ("o", "i", "u")]
        vowels = partial[int(rng.integers(0, len(partial)))]
    else:
        vowels = random_non_keyword_vowels(rng)
    return synth_phrase(vowels, voice_preset, rng, sample_rate=sample_rate)


def _pink(n, rng, exponent=0.5):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n)
    scale = np.zeros_like(f)
    scale[1:] = f[1:] ** -exponent
    return np.fft.irfft(spec * scale, n)


def _unit(x):
    sd = np.std(x)
    return x / sd if sd > 0 else x


def _background_phrase(rng, sample_rate):
    preset = sorted(VOICE_PRESETS)[int(rng.integers(0, len(VOICE_PRESETS)))]
    vowels = tuple(BACKGROUND_VOWELS[i] for i in rng.integers(0, len(BACKGROUND_VOWELS), size=int(rng.integers(1, 5))))
    return synth_phrase(vowels, preset, rng, sample_rate=sample_rate)


def _fill_with_phrases(n, rng, sample_rate, gap_s=(0.05, 0.6)):
    out = np.zeros(n)
    pos = int(rng.uniform(0, 0.3) * sample_rate)
    while pos < n:
        p = _background_phrase(rng, sample_rate) * rng.uniform(0.5, 1.0)
        end = min(n, pos + len(p))
        out[pos:end] += p[:end - pos]
        pos = end + int(rng.uniform(*gap_s) * sample_rate)
    return out


def _decaying_bursts(n, rng, sample_rate, rate_hz, tau_s, tonal):
    out = np.zeros(n)
    n_events = rng.poisson(rate_hz * n / sample_rate)
    length = int(5 * tau_s * sample_rate)
    t = np.arange(length) / sample_rate
    for _ in range(n_events):
        start = int(rng.integers(0, n))
        env = np.exp(-t / tau_s)
        if tonal:
            burst = np.sin(2 * np.pi * rng.uniform(2000, 5000) * t) * env
        else:
            burst = np.diff(rng.standard_normal(length + 1)) * env
        end = min(n, start + length)
        out[start:end] += rng.uniform(0.3, 1.0) * burst[:end - start]
    return out


def synth_noise(noise_type, duration, seed=0, sample_rate=SAMPLE_RATE):
    """Generate ``duration`` seconds of a named noise, peak-normalized."""
    if duration <= 0:
        raise ConfigError("noise duration must be positive")
    if noise_type not in NOISE_TYPES:
        raise ConfigError(f"unknown noise type {noise_type!r}; expected one of {NOISE_TYPES}")
    rng = _rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    if noise_type == "white":
        x = rng.standard_normal(n)
    elif noise_type == "pink":
        x = _pink(n, rng)
    elif noise_type == "babble":
        x = sum(_fill_with_phrases(n, rng, sample_rate, gap_s=(0.0, 0.2)) for _ in range(6))
        x = _unit(x) + 0.1 * _unit(_pink(n, rng))
    elif noise_type == "am_tone":
        x = np.zeros(n)
        for _ in range(int(rng.integers(1, 4))):
            carrier = np.sin(2 * np.pi * rng.uniform(200, 3000) * t + rng.uniform(0, 2 * np.pi))
            mod = 1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(2, 8) * t + rng.uniform(0, 2 * np.pi))
            x += carrier * mod
    elif noise_type == "kitchen":
        base = _pink(n, rng)
        x = 0.3 * _unit(base)
        x += 3.0 * _decaying_bursts(n, rng, sample_rate, rate_hz=3.0, tau_s=0.03, tonal=False)
        x += 1.0 * _decaying_bursts(n, rng, sample_rate, rate_hz=0.7, tau_s=0.15, tonal=True)
    elif noise_type == "street":
        rumble = _unit(_pink(n, rng, exponent=1.0))
        swell = 1.0 + 0.6 * np.sin(2 * np.pi * rng.uniform(0.05, 0.3) * t + rng.uniform(0, 2 * np.pi))
        hiss = _pink(n, rng)
        x = rumble * swell + 0.3 * _unit(hiss)
    elif noise_type == "vacuum":
        f0 = rng.uniform(180, 250)
        x = sum(np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 12))
        hiss = np.diff(rng.standard_normal(n + 1))
        x = _unit(x) + 1.2 * _unit(hiss)
    else:  # tv
        speech = _fill_with_phrases(n, rng, sample_rate)
        chord = sum(np.sin(2 * np.pi * f * t) for f in rng.uniform(200, 800, size=3))
        gate = (np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t) > 0).astype(float)
        x = _unit(speech) + 0.4 * chord * gate + 0.1 * _unit(_pink(n, rng))
    return _peak_normalize(x)
