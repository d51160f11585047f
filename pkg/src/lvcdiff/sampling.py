"""Ancestral sampling from a trained refiner and real-time-factor timing."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer, MelSpectrogram
from .diffusion import SamplingSchedule, TrainingSchedule, level_to_step, reverse_step

MODES = ("discrete_aligned", "discrete_full", "continuous")


class ScheduleNotAlignedError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRequest:
    mel: MelSpectrogram
    schedule: object
    seed: int = 0
    mode: str = "discrete_aligned"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def resolve_schedule(schedule, mode, train=None):
    """Turn the request's schedule into a sampling schedule for ``mode``."""
    if isinstance(schedule, TrainingSchedule):
        train = schedule
        schedule = SamplingSchedule.from_training(schedule)
    if mode == "discrete_full":
        if train is None:
            raise ValueError("discrete_full sampling needs the training schedule")
        return SamplingSchedule.from_training(train)
    if mode == "discrete_aligned" and not schedule.aligned:
        raise ScheduleNotAlignedError("discrete_aligned sampling needs a schedule with aligned t_m")
    return schedule


def sample(req, refiner, train=None, hop_size=None):
    """Generate ``frames * hop`` samples by iterating the reverse process.

    ``refiner(x, mel, t)`` returns predicted noise. In the discrete modes it is
    conditioned on ``t_m[s]``; in continuous mode on the noise level
    ``alpha_hat_s`` mapped through :func:`level_to_step`.
    """
    sched = resolve_schedule(req.schedule, req.mode, train)
    hop = hop_size or req.mel.hop_size
    length = req.mel.num_frames * hop
    T = train.T if train is not None else 1000
    rng = np.random.Generator(np.random.PCG64(req.seed))
    x = rng.standard_normal(length)
    for s in range(sched.T_m, 0, -1):
        if req.mode == "continuous":
            cond = level_to_step(sched.alpha_hat_at(s), T)
        else:
            cond = float(sched.t_m[s - 1])
        eps_pred = refiner(x, req.mel, cond)
        z = rng.standard_normal(length) if s > 1 else None
        x = reverse_step(x, eps_pred, s, sched, z, last_step=(s == 1))
    return AudioBuffer(x, req.mel.sample_rate_hz)


class CountingRefiner:
    """Wraps a refiner callable and counts its evaluations."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, x, mel, t):
        self.calls += 1
        return self.fn(x, mel, t)


def rtf_bench(refiner, schedule, mel, repeats=3, mode="discrete_aligned", train=None, seed=0):
    """Median synthesis wall-clock divided by audio duration."""
    counter = CountingRefiner(refiner)
    times = []
    audio = None
    for _ in range(repeats):
        counter.calls = 0
        start = time.perf_counter()
        audio = sample(SampleRequest(mel, schedule, seed, mode), counter, train)
        times.append(time.perf_counter() - start)
    seconds = float(np.median(times))
    return {
        "rtf": seconds / audio.duration_s,
        "seconds": seconds,
        "audio_seconds": audio.duration_s,
        "evaluations": counter.calls,
    }
