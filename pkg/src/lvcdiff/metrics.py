"""Objective comparisons between reference and generated audio."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.stats import norm

from .audio import LOG_FLOOR, StftConfig, stft

SNR_CAP_DB = 99.0


@dataclass
class MetricReport:
    mse: float = float("nan")
    snr_db: float = float("nan")
    lsd: float = float("nan")
    rtf: float | None = None
    ndb: int | None = None
    jsd: float | None = None

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    def csv_row(self):
        return ",".join("" if v is None else repr(v) for v in asdict(self).values())

    @staticmethod
    def csv_header():
        return "mse,snr_db,lsd,rtf,ndb,jsd"


def _samples(x):
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def mse(ref, gen):
    r, g = _samples(ref), _samples(gen)
    return float(np.mean((r - g) ** 2))


def snr_db(ref, gen):
    r, g = _samples(ref), _samples(gen)
    noise = float(np.sum((r - g) ** 2))
    signal = float(np.sum(r * r))
    if noise == 0.0:
        return SNR_CAP_DB
    if signal == 0.0:
        return -SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * math.log10(signal / noise))


def log_spectral_distance(ref, gen, cfg=StftConfig()):
    """Mean over frames of the RMS (over bins) natural-log magnitude difference."""
    a = np.log(np.maximum(np.abs(stft(_samples(ref), cfg)), LOG_FLOOR))
    b = np.log(np.maximum(np.abs(stft(_samples(gen), cfg)), LOG_FLOOR))
    return float(np.mean(np.sqrt(np.mean((a - b) ** 2, axis=1))))


def metrics(ref, gen, cfg=StftConfig()):
    r, g = _samples(ref), _samples(gen)
    if r.shape != g.shape:
        raise ValueError(f"reference has {r.size} samples, generated has {g.size}; trim first")
    return MetricReport(mse=mse(r, g), snr_db=snr_db(r, g), lsd=log_spectral_distance(r, g, cfg))


def jensen_shannon(p, q):
    """JS divergence (natural log) between two histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / m[mask])))

    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), math.log(2.0))


def ndb_jsd(train_frames, gen_frames, k=50, alpha=0.05, seed=0, iterations=50):
    """Number of statistically different bins and JS divergence.

    Train frames are clustered with k-means; both sets are binned by nearest
    centroid and each bin's proportions are compared by a two-sided
    two-proportion z-test at level ``alpha``.
    """
    train = np.asarray(train_frames, dtype=np.float64)
    gen = np.asarray(gen_frames, dtype=np.float64)
    if train.ndim == 1:
        train = train[:, None]
    if gen.ndim == 1:
        gen = gen[:, None]
    if len(train) == 0 or len(gen) == 0:
        raise ValueError("ndb_jsd needs non-empty train and generated sets")
    if k > len(train):
        raise ValueError(f"k={k} exceeds the {len(train)} training frames")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        centroids, _ = kmeans2(train, k, iter=iterations, minit="++", seed=np.random.default_rng(seed))
    return bin_statistics(_assign(train, centroids), _assign(gen, centroids), k, alpha)


def _assign(x, centroids):
    d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def bin_statistics(train_labels, gen_labels, k, alpha=0.05):
    """``(ndb, jsd)`` from two label vectors over ``k`` bins."""
    n1 = np.bincount(train_labels, minlength=k).astype(np.float64)
    n2 = np.bincount(gen_labels, minlength=k).astype(np.float64)
    N1, N2 = n1.sum(), n2.sum()
    p1, p2 = n1 / N1, n2 / N2
    pooled = (n1 + n2) / (N1 + N2)
    se = np.sqrt(pooled * (1.0 - pooled) * (1.0 / N1 + 1.0 / N2))
    z = np.zeros(k)
    nz = se > 0
    z[nz] = (p1[nz] - p2[nz]) / se[nz]
    crit = norm.ppf(1.0 - alpha / 2.0)
    ndb = int(np.sum(np.abs(z) > crit))
    return ndb, jensen_shannon(n1, n2)
