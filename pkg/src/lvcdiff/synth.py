"""Synthetic harmonic audio for tests and demos."""
from __future__ import annotations

import numpy as np

from .audio import AudioBuffer


def harmonic_clip(rng, num_samples=22050, sample_rate=22050, f0_range=(110.0, 330.0),
                  harmonics=(3, 5), noise_std=0.005, peak=0.5):
    """A sum of 3-5 harmonics of a random fundamental with mild vibrato and noise."""
    n_harm = int(rng.integers(harmonics[0], harmonics[1] + 1))
    f0 = rng.uniform(*f0_range)
    t = np.arange(num_samples) / sample_rate
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t)
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / sample_rate
    amps = rng.uniform(0.3, 1.0, n_harm) / np.arange(1, n_harm + 1)
    offsets = rng.uniform(0, 2 * np.pi, n_harm)
    x = sum(a * np.sin((h + 1) * phase + o) for h, (a, o) in enumerate(zip(amps, offsets)))
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    x = x * envelope
    x = peak * x / np.max(np.abs(x))
    x = x + noise_std * rng.standard_normal(num_samples)
    return AudioBuffer(x, sample_rate)


def harmonic_dataset(count, seed=0, **kwargs):
    rng = np.random.default_rng(seed)
    return [harmonic_clip(rng, **kwargs) for _ in range(count)]
