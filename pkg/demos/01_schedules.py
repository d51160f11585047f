"""Noise schedules: the training schedule, a searched 4-step schedule, and its alignment.

Run: python demos/01_schedules.py
"""
import warnings

import numpy as np

from lvcdiff.diffusion import (
    AlignmentClampWarning,
    SchedulerHyper,
    align_schedule,
    linear_beta,
    noise_scheduling_search,
    reference_schedule,
)
from lvcdiff.noise_predictor import phi_stub

train = linear_beta(1000, 1e-4, 0.005)
print(f"training schedule: T={train.T}, alpha_1={train.alpha_at(1):.6f}, alpha_T={train.alpha_at(train.T):.6f}")

# With a constant predictor the search is a pure recursion on the noise level.
hyper = SchedulerHyper(alpha_hat_N=0.54, beta_hat_N=0.70, N=4)
zero_theta = lambda x, mel, t: np.zeros_like(x)  # noqa: E731
for c in (0.5, 0.1, 1e-12):
    found = noise_scheduling_search(phi_stub(c), zero_theta, hyper, train, np.zeros(256))
    print(f"stub phi={c:g}: T_m={found.T_m} beta_hat={np.round(found.beta_hat, 6).tolist()}")

# Alignment maps each short-schedule noise level to a fractional training step.
found = noise_scheduling_search(phi_stub(0.5), zero_theta, hyper, train, np.zeros(256))
aligned = align_schedule(found.beta_hat, train)
print("aligned steps for the phi=0.5 schedule:", np.round(aligned.t_m, 3).tolist())

for name in ("predictor", "grid"):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", AlignmentClampWarning)
        sched, _, _ = reference_schedule(name)
    print(f"{name} fixture: beta_hat={sched.beta_hat.tolist()}")
    print(f"  alpha_hat={np.round(sched.alpha_hat, 6).tolist()} t_m={np.round(sched.t_m, 4).tolist()}")
    if name == "grid":
        # the shipped t_m were clamped when the fixture was built
        below = int(np.sum(sched.alpha_hat > train.alpha_at(1)))
        print(f"  {below} level(s) lie above alpha_1, so their t_m are clamped to 1")
