"""Noise predictor: waveform -> scalar ratio in (0, 1).

A compact stand-in for a GALR network with the same shape hyperparameters:
the waveform is cut into short windows, embedded, and passed through blocks
that mix locally (a 3-tap conv across neighbouring windows) and globally
(segment means pooled over the whole utterance and broadcast back).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .params import ParamStore, uniform_init

LOGIT_BOUND = 30.0


@dataclass(frozen=True)
class PhiConfig:
    window_length: int = 8
    segment_size: int = 64
    num_blocks: int = 2
    hidden: int = 128

    def __post_init__(self):
        if min(self.window_length, self.segment_size, self.num_blocks, self.hidden) < 1:
            raise ValueError("PhiConfig fields must all be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def micro(cls, **overrides):
        base = dict(window_length=8, segment_size=4, num_blocks=2, hidden=4)
        base.update(overrides)
        return cls(**base)


def init_phi(cfg, rng):
    p = ParamStore()
    H, W = cfg.hidden, cfg.window_length
    p.add("embed.w", uniform_init(rng, (H, W), W))
    p.add("embed.b", uniform_init(rng, (H,), W))
    for i in range(cfg.num_blocks):
        p.add(f"block{i}.local.w", uniform_init(rng, (H, H, 3), 3 * H))
        p.add(f"block{i}.local.b", uniform_init(rng, (H,), 3 * H))
        p.add(f"block{i}.global.w", uniform_init(rng, (H, H), H))
        p.add(f"block{i}.global.b", uniform_init(rng, (H,), H))
    p.add("head.w", uniform_init(rng, (1, H), H))
    p.add("head.b", np.zeros(1))
    return p


def _segment_pool_matrix(n_windows, segment_size):
    """(n_windows, n_segments) matrix averaging the windows of each segment."""
    n_seg = -(-n_windows // segment_size)
    pool = np.zeros((n_windows, n_seg))
    for s in range(n_seg):
        lo, hi = s * segment_size, min(n_windows, (s + 1) * segment_size)
        pool[lo:hi, s] = 1.0 / (hi - lo)
    return pool


def phi_forward(x_t, params, cfg):
    """Scalar Tensor strictly inside (0, 1). A trailing partial window is dropped."""
    x = np.asarray(x_t.data if isinstance(x_t, ag.Tensor) else x_t, dtype=np.float64).reshape(-1)
    W = cfg.window_length
    if x.size < W:
        raise ValueError(f"noise predictor needs at least {W} samples, got {x.size}")
    n_windows = x.size // W
    windows = x[:n_windows * W].reshape(n_windows, W)
    h = ag.linear(windows, params["embed.w"], params["embed.b"])  # (n_windows, H)
    h = ag.transpose(h, (1, 0))  # (H, n_windows)
    pool = _segment_pool_matrix(n_windows, cfg.segment_size)
    for i in range(cfg.num_blocks):
        local = ag.conv1d(h, params[f"block{i}.local.w"], params[f"block{i}.local.b"], padding="same")
        h = ag.add(h, ag.lrelu(local))
        seg_means = ag.matmul(h, pool)  # (H, n_seg)
        summary = ag.mean(seg_means, axis=1)  # (H,)
        g = ag.lrelu(ag.linear(summary, params[f"block{i}.global.w"], params[f"block{i}.global.b"]))
        h = ag.add(h, ag.reshape(g, (-1, 1)))
    pooled = ag.mean(h, axis=1)
    logit = ag.linear(pooled, params["head.w"], params["head.b"])
    # soft bound on the logit so the sigmoid never rounds to exactly 0 or 1
    bounded = ag.scale(ag.tanh(ag.scale(logit, 1.0 / LOGIT_BOUND)), LOGIT_BOUND)
    return ag.reshape(ag.sigmoid(bounded), ())


@dataclass
class NoisePredictor:
    cfg: PhiConfig
    params: ParamStore = field(repr=False)

    @classmethod
    def create(cls, cfg, seed=0):
        return cls(cfg, init_phi(cfg, np.random.default_rng(seed)))

    def forward(self, x_t):
        return phi_forward(x_t, self.params, self.cfg)

    def __call__(self, x_t):
        with ag.no_grad():
            return phi_forward(x_t, self.params, self.cfg).item()


def phi_stub(constant):
    """Noise predictor that ignores its input."""
    constant = float(constant)
    if not 0.0 < constant < 1.0:
        raise ValueError(f"stub ratio must lie in (0, 1), got {constant}")

    def phi(x_t):
        return constant

    return phi
