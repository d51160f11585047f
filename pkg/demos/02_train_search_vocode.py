"""Train a tiny vocoder on synthetic tones, search a short schedule, and compare samplers.

Everything runs at micro scale (about a minute on one core), so the audio is
far from speech quality; the point is the pipeline and the relative numbers.

Run: python demos/02_train_search_vocode.py
"""
import time

import numpy as np

from lvcdiff.audio import StftConfig
from lvcdiff.diffusion import SchedulerHyper, align_schedule, linear_beta, noise_scheduling_search
from lvcdiff.metrics import metrics
from lvcdiff.noise_predictor import PhiConfig
from lvcdiff.refiner import RefinerConfig
from lvcdiff.sampling import SampleRequest, sample
from lvcdiff.synth import harmonic_dataset
from lvcdiff.train import TrainConfig, _filterbank, conditioning_mel, train_noise_predictor, train_refiner

sched = linear_beta()
clips = harmonic_dataset(8, seed=1, num_samples=8192)
rcfg = RefinerConfig.micro(hidden_channels=8)

t0 = time.perf_counter()
theta = train_refiner(clips, TrainConfig(lr=2e-3, steps=1500, clip_len=4096, seed=0), refiner_cfg=rcfg, log_every=0)
losses = np.array(theta.losses)
print(f"refiner: loss {losses[:10].mean():.4f} -> {losses[-100:].mean():.4f} in {time.perf_counter() - t0:.0f} s")

phi = train_noise_predictor(clips, TrainConfig(lr=1e-2, steps=100, clip_len=4096, seed=0), theta.model,
                            phi_cfg=PhiConfig.micro(), log_every=0)
print(f"noise predictor: loss {np.mean(phi.losses[:10]):.4f} -> {np.mean(phi.losses[-10:]):.4f}")

stft = StftConfig()
fb = _filterbank(rcfg, stft, 22050)
held = harmonic_dataset(1, seed=42, num_samples=16 * 256)[0]
mel = conditioning_mel(held, stft, fb)

found = noise_scheduling_search(phi.model, theta.model, SchedulerHyper(), sched, held.samples, mel,
                                np.random.default_rng(0))
short = align_schedule(found.beta_hat, sched)
print(f"searched schedule: beta_hat={np.round(short.beta_hat, 5).tolist()} t_m={np.round(short.t_m, 2).tolist()}")

noise = np.random.default_rng(0).standard_normal(len(held)) * held.samples.std()
print(f"{'sampler':>18} {'steps':>6} {'seconds':>8} {'lsd':>6} {'snr_db':>7}")
print(f"{'noise baseline':>18} {'-':>6} {'-':>8} {metrics(held, noise).lsd:6.3f} {metrics(held, noise).snr_db:7.2f}")
for label, schedule, mode in (("searched", short, "discrete_aligned"), ("full T", sched, "discrete_full")):
    theta.model.calls = 0
    start = time.perf_counter()
    gen = sample(SampleRequest(mel, schedule, seed=0, mode=mode), theta.model, sched)
    rep = metrics(held, gen)
    print(f"{label:>18} {theta.model.calls:6d} {time.perf_counter() - start:8.2f} {rep.lsd:6.3f} {rep.snr_db:7.2f}")
