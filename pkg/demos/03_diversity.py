"""NDB/JSD on mel frames: a split-sample null versus a collapsed generator.

Run: python demos/03_diversity.py
"""
import numpy as np

from lvcdiff.audio import StftConfig, mel_filterbank, mel_spectrogram
from lvcdiff.metrics import ndb_jsd
from lvcdiff.synth import harmonic_dataset

stft = StftConfig()
fb = mel_filterbank(80, stft.fft_size, 22050)
clips = harmonic_dataset(40, seed=3)
frames = [mel_spectrogram(c, stft, fb).frames for c in clips]
pool = np.concatenate(frames)
order = np.random.default_rng(0).permutation(len(pool))
# two disjoint halves of one sample of frames: the null case
train, other_half = pool[order[: len(pool) // 2]], pool[order[len(pool) // 2:]]
# a "generator" that only ever reproduces one clip
collapsed = np.concatenate([frames[0]] * 20)
# whole unseen clips: each tone has its own pitch, so these bins shift too
unseen = np.concatenate([mel_spectrogram(c, stft, fb).frames for c in harmonic_dataset(10, seed=4)])

for label, gen in (("other half", other_half), ("unseen clips", unseen), ("one clip repeated", collapsed)):
    ndb, jsd = ndb_jsd(train, gen, k=50, alpha=0.05, seed=0)
    print(f"{label:>18}: ndb={ndb:2d}/50 jsd={jsd:.4f}")
