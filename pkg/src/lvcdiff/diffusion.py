"""Noise schedules, forward corruption, reverse steps and schedule search.

Indexing is 1-based in the maths (``beta_1 .. beta_T``); arrays are stored
0-based, so ``alpha[t - 1]`` is the amplitude product after ``t`` steps.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import autograd as ag

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class SearchDivergedError(RuntimeError):
    pass


class ConstraintViolation(ValueError):
    pass


class AlignmentClampWarning(UserWarning):
    pass


def amplitude_products(beta):
    """``alpha[t] = prod_{i<=t} sqrt(1 - beta_i)``."""
    return np.cumprod(np.sqrt(1.0 - np.asarray(beta, dtype=np.float64)))


@dataclass(frozen=True)
class TrainingSchedule:
    beta: np.ndarray
    beta_lo: float = float("nan")
    beta_hi: float = float("nan")

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ScheduleError("beta must be a non-empty vector")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ScheduleError("every beta must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)

    @property
    def T(self):
        return self.beta.size

    @property
    def alpha(self):
        return amplitude_products(self.beta)

    @property
    def delta(self):
        return np.sqrt(1.0 - self.alpha ** 2)

    def alpha_at(self, t):
        """Amplitude product at step ``t`` with ``alpha_0 = 1``."""
        return 1.0 if t == 0 else float(self.alpha[t - 1])

    def delta_at(self, t):
        return float(np.sqrt(1.0 - self.alpha_at(t) ** 2))


def linear_beta(T=1000, lo=1e-4, hi=0.005):
    """Linearly spaced betas with ``beta_1 = lo`` and ``beta_T = hi`` exactly."""
    if T < 1 or not (0 < lo <= hi < 1):
        raise ScheduleError(f"invalid linear schedule T={T}, lo={lo}, hi={hi}")
    if T == 1:
        beta = np.array([lo])
    else:
        beta = lo + (hi - lo) * np.arange(T) / (T - 1)
        beta[-1] = hi
    return TrainingSchedule(beta, lo, hi)


@dataclass(frozen=True)
class SamplingSchedule:
    beta_hat: np.ndarray
    t_m: np.ndarray | None = None

    def __post_init__(self):
        beta_hat = np.asarray(self.beta_hat, dtype=np.float64)
        if beta_hat.ndim != 1 or beta_hat.size < 1:
            raise ScheduleError("beta_hat must be a non-empty vector")
        if np.any(beta_hat <= 0) or np.any(beta_hat > 1):
            raise ScheduleError("beta_hat entries must lie in (0, 1]")
        object.__setattr__(self, "beta_hat", beta_hat)
        if self.t_m is not None:
            t_m = np.asarray(self.t_m, dtype=np.float64)
            if t_m.shape != beta_hat.shape:
                raise ScheduleError(f"t_m has {t_m.size} entries for {beta_hat.size} steps")
            object.__setattr__(self, "t_m", t_m)

    @property
    def T_m(self):
        return self.beta_hat.size

    @property
    def alpha_hat(self):
        return amplitude_products(self.beta_hat)

    def alpha_hat_at(self, s):
        return 1.0 if s == 0 else float(self.alpha_hat[s - 1])

    @property
    def aligned(self):
        return self.t_m is not None

    @classmethod
    def from_training(cls, sched):
        """The full ``T``-step schedule expressed as a sampling schedule."""
        return cls(sched.beta.copy(), np.arange(1, sched.T + 1, dtype=np.float64))


@dataclass(frozen=True)
class SchedulerHyper:
    tau: int = 200
    alpha_hat_N: float = 0.54
    beta_hat_N: float = 0.70
    N: int = 4

    def validate(self, T):
        if not 1 <= self.tau < T:
            raise ScheduleError(f"tau={self.tau} must be in [1, {T})")
        if not (0 < self.alpha_hat_N < 1 and 0 < self.beta_hat_N < 1):
            raise ScheduleError("alpha_hat_N and beta_hat_N must lie in (0, 1)")
        if self.N < 1:
            raise ScheduleError("N must be >= 1")


# --------------------------------------------------------------------------- forward process


def _check_step(t, T):
    if not 1 <= t <= T:
        raise ScheduleError(f"step {t} outside [1, {T}]")


def forward_diffuse(x0, t, eps, sched):
    """``alpha_t * x0 + delta_t * eps``."""
    _check_step(t, sched.T)
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    return sched.alpha_at(t) * x0 + sched.delta_at(t) * eps


def chained_diffuse(x0, t, sched, rng):
    """Apply ``q(x_i | x_{i-1})`` step by step; Monte-Carlo check of the closed form."""
    x = np.asarray(x0, dtype=np.float64).copy()
    for b in sched.beta[:t]:
        x = np.sqrt(1.0 - b) * x + np.sqrt(b) * rng.standard_normal(x.shape)
    return x


def score_loss(eps, eps_pred):
    """Mean squared error between the true and predicted noise."""
    diff = ag.sub(eps, eps_pred)
    return ag.mean(ag.square(diff))


def beta_hat_cap(t, sched, tau):
    """``min(1 - alpha_t^2, 1 - alpha_{t+tau}^2 / alpha_t^2)``."""
    if not tau <= t <= sched.T - tau:
        raise ScheduleError(f"step {t} outside the noise-predictor support [{tau}, {sched.T - tau}]")
    a_t = sched.alpha_at(t)
    a_next = sched.alpha_at(t + tau)
    return min(1.0 - a_t ** 2, 1.0 - a_next ** 2 / a_t ** 2)


def beta_hat_for_training(t, phi_out, sched, tau):
    """Scale the capped variance by the predictor's ratio; works on floats or Tensors."""
    cap = beta_hat_cap(t, sched, tau)
    if isinstance(phi_out, ag.Tensor):
        return ag.scale(phi_out, cap)
    return cap * float(phi_out)


def noise_predictor_loss(eps, eps_pred, beta_hat_t, delta_t):
    """``delta^2 / (2 (delta^2 - b)) * mean((eps - b / delta^2 * eps_pred)^2)``.

    ``beta_hat_t`` may be a scalar Tensor (gradient flows to it) or a float;
    ``eps_pred`` is always treated as a constant.
    """
    d2 = float(delta_t) ** 2
    b_tensor = ag.as_tensor(beta_hat_t)
    b = float(np.asarray(b_tensor.data).reshape(-1)[0])
    if not 0 < b < d2:
        raise ConstraintViolation(f"beta_hat={b} must lie strictly inside (0, delta^2={d2})")
    eps = np.asarray(eps.data if isinstance(eps, ag.Tensor) else eps, dtype=np.float64)
    pred = np.asarray(eps_pred.data if isinstance(eps_pred, ag.Tensor) else eps_pred, dtype=np.float64)
    resid = eps - (b / d2) * pred
    m = float(np.mean(resid * resid))
    w = d2 / (2.0 * (d2 - b))
    value = w * m
    dw = d2 / (2.0 * (d2 - b) ** 2)
    dm = float(np.mean(-2.0 * resid * pred)) / d2
    dloss = dw * m + w * dm

    def fn(g):
        return (np.reshape(g * dloss, b_tensor.shape),)

    return ag._make(np.asarray(value), (b_tensor,), fn)


def kl_constant(beta_t, alpha_t_sq, dim):
    """The additive constant of the noise-predictor KL bound (reporting only)."""
    one_minus = 1.0 - alpha_t_sq
    return 0.25 * np.log(one_minus / beta_t) + dim / 2.0 * (beta_t / one_minus - 1.0)


# --------------------------------------------------------------------------- reverse process


def posterior_std(s, sched):
    """Standard deviation of the ancestral step ``s`` (zero at ``s = 1``)."""
    b = sched.beta_hat[s - 1]
    a_s = sched.alpha_hat_at(s)
    a_prev = sched.alpha_hat_at(s - 1)
    return float(np.sqrt(b * (1.0 - a_prev ** 2) / (1.0 - a_s ** 2)))


def reverse_step(x_t, eps_pred, s, sched, z=None, last_step=False):
    """One ancestral step from level ``s`` of a sampling schedule."""
    if not 1 <= s <= sched.T_m:
        raise ScheduleError(f"sampling step {s} outside [1, {sched.T_m}]")
    b = sched.beta_hat[s - 1]
    delta = np.sqrt(1.0 - sched.alpha_hat_at(s) ** 2)
    mean = (x_t - (b / delta) * eps_pred) / np.sqrt(1.0 - b)
    if last_step or z is None:
        return mean
    return mean + posterior_std(s, sched) * z


def _reverse_step_explicit(x_t, eps_pred, beta, alpha_t, alpha_prev, z):
    """Ancestral step from explicit levels (used inside the schedule search)."""
    delta = np.sqrt(1.0 - alpha_t ** 2)
    mean = (x_t - (beta / delta) * eps_pred) / np.sqrt(1.0 - beta)
    var = beta * (1.0 - alpha_prev ** 2) / (1.0 - alpha_t ** 2)
    return mean + np.sqrt(max(var, 0.0)) * z


# --------------------------------------------------------------------------- schedule search / alignment


def align_level(alpha_s, train):
    """Real-valued training step whose amplitude product matches ``alpha_s``."""
    levels = train.alpha
    T = train.T
    if alpha_s > levels[0]:
        warnings.warn(f"alpha_hat={alpha_s:.6g} above l_1={levels[0]:.6g}; clamped to t_m=1",
                      AlignmentClampWarning, stacklevel=2)
        return 1.0
    if alpha_s < levels[-1]:
        warnings.warn(f"alpha_hat={alpha_s:.6g} below l_T={levels[-1]:.6g}; clamped to t_m={T}",
                      AlignmentClampWarning, stacklevel=2)
        return float(T)
    if alpha_s == levels[-1]:
        return float(T)
    # levels decrease; find t with l_{t+1} <= alpha_s <= l_t (1-based t)
    neg = -levels
    i = int(np.searchsorted(neg, -alpha_s, side="right"))  # first index with l < alpha_s
    t = i  # l_t = levels[i - 1] >= alpha_s > levels[i] = l_{t+1}
    l_t, l_next = levels[t - 1], levels[t]
    return t + (l_t - alpha_s) / (l_t - l_next)


def align_schedule(beta_hat, train):
    """Map every level of a sampling schedule onto the training step axis."""
    beta_hat = np.asarray(beta_hat.beta_hat if isinstance(beta_hat, SamplingSchedule) else beta_hat)
    alpha_hat = amplitude_products(beta_hat)
    t_m = np.array([align_level(a, train) for a in alpha_hat])
    return SamplingSchedule(beta_hat, t_m)


def noise_scheduling_search(phi, theta, hyper, train, x0, mel=None, rng=None):
    """Derive a short sampling schedule with a noise predictor.

    ``phi(x)`` returns a ratio in (0, 1) and ``theta(x, mel, t)`` predicts the
    noise at real-valued step ``t``. The search starts from the noisy seed
    ``alpha_hat_N * x0 + sqrt(1 - alpha_hat_N^2) * eps`` and walks down from
    ``N`` to 2, returning the collected betas in increasing-step order.
    """
    hyper.validate(train.T)
    rng = np.random.default_rng(0) if rng is None else rng
    x0 = np.asarray(x0, dtype=np.float64)
    alpha = hyper.alpha_hat_N
    beta = hyper.beta_hat_N
    x = alpha * x0 + np.sqrt(1.0 - alpha ** 2) * rng.standard_normal(x0.shape)
    betas = [beta]
    for t in range(hyper.N, 1, -1):
        alpha_prev = alpha / np.sqrt(1.0 - beta)
        if not 0.0 < alpha_prev < 1.0:
            raise SearchDivergedError(f"alpha_hat left (0, 1) at step {t - 1}: {alpha_prev}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", AlignmentClampWarning)
            t_cond = align_level(alpha, train)
        eps_pred = theta(x, mel, t_cond)
        x = _reverse_step_explicit(x, eps_pred, beta, alpha, alpha_prev, rng.standard_normal(x.shape))
        beta_prev = min(1.0 - alpha_prev ** 2, beta) * float(phi(x))
        log.debug("search t=%d alpha_hat=%.6g beta_hat=%.6g", t - 1, alpha_prev, beta_prev)
        if beta_prev < train.beta[0]:
            break
        betas.append(beta_prev)
        alpha, beta = alpha_prev, beta_prev
    return SamplingSchedule(np.array(betas[::-1]))


# --------------------------------------------------------------------------- continuous-noise variant


def continuous_alpha_sample(t, sched, rng):
    """Draw a noise level uniformly between ``alpha_t`` and ``alpha_{t-1}``."""
    _check_step(t, sched.T)
    lo, hi = sched.alpha_at(t), sched.alpha_at(t - 1)
    if lo == hi:
        return lo
    return float(rng.uniform(lo, hi))


def continuous_diffuse(x0, alpha_s, eps):
    return alpha_s * np.asarray(x0) + np.sqrt(1.0 - alpha_s ** 2) * np.asarray(eps)


def level_to_step(alpha_s, T=1000):
    """Conditioning value fed to the step encoding for a continuous noise level."""
    return T * (1.0 - alpha_s)


# --------------------------------------------------------------------------- schedule JSON


def schedule_to_dict(sched, train, source):
    if source not in ("grid", "predictor"):
        raise ValueError(f"source must be 'grid' or 'predictor', got {source!r}")
    return {
        "T": int(train.T),
        "beta_lo": float(train.beta[0]),
        "beta_hi": float(train.beta[-1]),
        "beta_hat": [float(b) for b in sched.beta_hat],
        "t_m": None if sched.t_m is None else [float(v) for v in sched.t_m],
        "source": source,
    }


_SCHEMA_KEYS = {"T", "beta_lo", "beta_hi", "beta_hat", "t_m", "source"}


def schedule_from_dict(d):
    """Returns ``(SamplingSchedule, TrainingSchedule, source)``; aligns if ``t_m`` is absent."""
    missing = _SCHEMA_KEYS - set(d) - {"t_m"}
    extra = set(d) - _SCHEMA_KEYS
    if missing or extra:
        raise ScheduleError(f"schedule JSON keys: missing {sorted(missing)}, unknown {sorted(extra)}")
    if d["source"] not in ("grid", "predictor"):
        raise ScheduleError(f"unknown schedule source {d['source']!r}")
    train = linear_beta(int(d["T"]), float(d["beta_lo"]), float(d["beta_hi"]))
    if d.get("t_m") is None:
        samp = align_schedule(d["beta_hat"], train)
    else:
        samp = SamplingSchedule(d["beta_hat"], d["t_m"])
    return samp, train, d["source"]


def save_schedule(path, sched, train, source):
    Path(path).write_text(json.dumps(schedule_to_dict(sched, train, source), indent=2) + "\n")


def load_schedule(path):
    return schedule_from_dict(json.loads(Path(path).read_text()))


def reference_schedule(name):
    """Shipped 4-step fixtures: ``"grid"`` or ``"predictor"``."""
    fname = {"grid": "grid_4step.json", "predictor": "predictor_4step.json"}[name]
    text = resources.files("lvcdiff.data").joinpath(fname).read_text()
    return schedule_from_dict(json.loads(text))


def reference_schedule_path(name):
    fname = {"grid": "grid_4step.json", "predictor": "predictor_4step.json"}[name]
    return resources.files("lvcdiff.data").joinpath(fname)
