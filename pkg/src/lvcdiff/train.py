"""Training loops for the refiner and the noise predictor."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .audio import AudioBuffer, StftConfig, mel_filterbank, mel_spectrogram, random_crop
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .diffusion import (
    beta_hat_for_training,
    continuous_alpha_sample,
    level_to_step,
    linear_beta,
    noise_predictor_loss,
    score_loss,
)
from .noise_predictor import NoisePredictor, PhiConfig
from .optim import AdamW, clip_grad_norm
from .refiner import Refiner, RefinerConfig

log = logging.getLogger(__name__)

RNG_NAME = "numpy.PCG64"


class TrainingDivergedError(RuntimeError):
    pass


class FrozenRefinerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 1
    steps: int = 1000
    clip_len: int = 16000
    seed: int = 0
    tau: int = 200
    grad_clip: float | None = 10.0
    weight_decay: float = 0.0
    continuous: bool = False

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0 or self.clip_len < 1 or self.tau < 1:
            raise ValueError(f"invalid training configuration {self}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: object
    losses: list
    optimizer: AdamW
    steps_drawn: list = field(default_factory=list)


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def draw_step(rng, lo, hi):
    """Diffusion step uniform on ``{lo, ..., hi}``."""
    return int(rng.integers(lo, hi + 1))


def crop_length(clip_len, hop):
    """Crop length rounded up to a whole number of mel frames."""
    return -(-clip_len // hop) * hop


def prepare_clip(buf, length, rng):
    """Random crop of ``length`` samples, zero-padding short clips at the end."""
    if len(buf) < length:
        padded = np.concatenate([buf.samples, np.zeros(length - len(buf))])
        return AudioBuffer(padded, buf.sample_rate_hz), 0
    return random_crop(buf, length, rng)


def conditioning_mel(clip, stft_cfg, fb):
    """Mel frames aligned with ``clip``: one frame per hop."""
    mel = mel_spectrogram(clip, stft_cfg, fb)
    return mel.head(len(clip) // stft_cfg.hop_size)


class _ClipSource:
    def __init__(self, dataset, length, stft_cfg, fb):
        if not dataset:
            raise ValueError("training dataset is empty")
        self.dataset = list(dataset)
        self.length = length
        self.stft_cfg = stft_cfg
        self.fb = fb

    def draw(self, rng):
        idx = int(rng.integers(len(self.dataset)))
        clip, _ = prepare_clip(self.dataset[idx], self.length, rng)
        return idx, clip, conditioning_mel(clip, self.stft_cfg, self.fb)


def _filterbank(refiner_cfg, stft_cfg, sample_rate):
    return mel_filterbank(refiner_cfg.mel_bands, stft_cfg.fft_size, sample_rate, 0.0,
                          min(8000.0, sample_rate / 2))


def train_refiner(dataset, cfg, sched=None, refiner=None, refiner_cfg=None, stft_cfg=None,
                  trace_path=None, log_every=100):
    """Fit the noise-prediction network by noise regression at random steps."""
    sched = sched or linear_beta()
    refiner = refiner or Refiner.create(refiner_cfg or RefinerConfig(), seed=cfg.seed)
    rcfg = refiner.cfg
    stft_cfg = stft_cfg or StftConfig(hop_size=rcfg.hop_size)
    fb = _filterbank(rcfg, stft_cfg, dataset[0].sample_rate_hz if dataset else 22050)
    source = _ClipSource(dataset, crop_length(cfg.clip_len, rcfg.hop_size), stft_cfg, fb)
    rng = make_rng(cfg.seed)
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = list(refiner.params.values())
    losses, drawn = [], []

    for step in range(1, cfg.steps + 1):
        refiner.params.zero_grad()
        total = 0.0
        for _ in range(cfg.batch_size):
            clip_id, clip, mel = source.draw(rng)
            t = draw_step(rng, 1, sched.T)
            eps = rng.standard_normal(len(clip))
            if cfg.continuous:
                a_s = continuous_alpha_sample(t, sched, rng)
                x_t = a_s * clip.samples + math.sqrt(1.0 - a_s * a_s) * eps
                cond = level_to_step(a_s, sched.T)
            else:
                x_t = sched.alpha_at(t) * clip.samples + sched.delta_at(t) * eps
                cond = t
            drawn.append(t)
            loss = score_loss(eps[None, :], refiner.forward(x_t[None, :], mel, cond))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at step {step} (t={t}, clip {clip_id})")
            ag.backward(ag.scale(loss, 1.0 / cfg.batch_size))
            total += value
        if cfg.grad_clip:
            clip_grad_norm(params, cfg.grad_clip)
        opt.step(params)
        losses.append(total / cfg.batch_size)
        if log_every and step % log_every == 0:
            log.info("refiner step %d loss %.5f", step, losses[-1])

    if trace_path is not None:
        write_loss_trace(trace_path, losses)
    return TrainResult(refiner, losses, opt, drawn)


def train_noise_predictor(dataset, cfg, refiner, sched=None, phi=None, phi_cfg=None, stft_cfg=None,
                          trace_path=None, log_every=100):
    """Fit the noise predictor against a frozen refiner."""
    sched = sched or linear_beta()
    if not cfg.tau <= sched.T - cfg.tau:
        raise ValueError(f"tau={cfg.tau} leaves an empty step range for T={sched.T}")
    phi = phi or NoisePredictor.create(phi_cfg or PhiConfig(), seed=cfg.seed)
    rcfg = refiner.cfg
    stft_cfg = stft_cfg or StftConfig(hop_size=rcfg.hop_size)
    fb = _filterbank(rcfg, stft_cfg, dataset[0].sample_rate_hz if dataset else 22050)
    source = _ClipSource(dataset, crop_length(cfg.clip_len, rcfg.hop_size), stft_cfg, fb)
    rng = make_rng(cfg.seed)
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = list(phi.params.values())
    theta_params = list(refiner.params.values())
    refiner.params.zero_grad()
    losses, drawn = [], []

    for step in range(1, cfg.steps + 1):
        phi.params.zero_grad()
        total = 0.0
        for _ in range(cfg.batch_size):
            clip_id, clip, mel = source.draw(rng)
            t = draw_step(rng, cfg.tau, sched.T - cfg.tau)
            eps = rng.standard_normal(len(clip))
            x_t = sched.alpha_at(t) * clip.samples + sched.delta_at(t) * eps
            drawn.append(t)
            eps_pred = refiner(x_t, mel, t)
            beta_hat = beta_hat_for_training(t, phi.forward(x_t), sched, cfg.tau)
            loss = noise_predictor_loss(eps, eps_pred, beta_hat, sched.delta_at(t))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at step {step} (t={t}, clip {clip_id})")
            ag.backward(ag.scale(loss, 1.0 / cfg.batch_size))
            total += value
        if any(p.grad is not None and np.any(p.grad) for p in theta_params):
            raise FrozenRefinerError("refiner parameters received gradient during noise-predictor training")
        if cfg.grad_clip:
            clip_grad_norm(params, cfg.grad_clip)
        opt.step(params)
        losses.append(total / cfg.batch_size)
        if log_every and step % log_every == 0:
            log.info("noise predictor step %d loss %.5f", step, losses[-1])

    if trace_path is not None:
        write_loss_trace(trace_path, losses)
    return TrainResult(phi, losses, opt, drawn)


def noise_predictor_batch_loss(phi, refiner, batch, sched, tau):
    """Mean predictor loss over a fixed list of ``(x0, mel, t, eps)`` examples."""
    values = []
    with ag.no_grad():
        for x0, mel, t, eps in batch:
            x_t = sched.alpha_at(t) * x0 + sched.delta_at(t) * eps
            b = beta_hat_for_training(t, phi(x_t), sched, tau)
            values.append(noise_predictor_loss(eps, refiner(x_t, mel, t), b, sched.delta_at(t)).item())
    return float(np.mean(values))


def write_loss_trace(path, losses):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            writer.writerow([i, repr(float(v))])


def read_loss_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["loss"]) for r in rows]


# --------------------------------------------------------------------------- checkpoints of models


def save_refiner(path, refiner, train_cfg=None, sched=None, optimizer=None, global_step=0):
    sched = sched or linear_beta()
    config = {
        "refiner": refiner.cfg.to_dict(),
        "train": train_cfg.to_dict() if train_cfg else None,
        "schedule": {"T": sched.T, "beta_lo": float(sched.beta[0]), "beta_hi": float(sched.beta[-1])},
    }
    meta = {"rng": RNG_NAME}
    save_checkpoint(path, "refiner", refiner.params, config, global_step, optimizer, meta)


def load_refiner(path, expected_cfg=None):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "refiner":
        raise ValueError(f"{path} holds a {ckpt.kind!r} checkpoint, not a refiner")
    cfg = expected_cfg or RefinerConfig(**ckpt.config["refiner"])
    refiner = Refiner.create(cfg)
    load_into(refiner.params, ckpt)
    return refiner, ckpt


def save_noise_predictor(path, phi, train_cfg=None, optimizer=None, global_step=0):
    config = {"phi": phi.cfg.to_dict(), "train": train_cfg.to_dict() if train_cfg else None}
    save_checkpoint(path, "noise_predictor", phi.params, config, global_step, optimizer, {"rng": RNG_NAME})


def load_noise_predictor(path, expected_cfg=None):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "noise_predictor":
        raise ValueError(f"{path} holds a {ckpt.kind!r} checkpoint, not a noise predictor")
    cfg = expected_cfg or PhiConfig(**ckpt.config["phi"])
    phi = NoisePredictor.create(cfg)
    load_into(phi.params, ckpt)
    return phi, ckpt


def schedule_from_checkpoint(ckpt):
    s = ckpt.config.get("schedule") or {}
    return linear_beta(s.get("T", 1000), s.get("beta_lo", 1e-4), s.get("beta_hi", 0.005))


def read_dataset(directory):
    from .audio import read_wav

    paths = sorted(Path(directory).glob("*.wav"))
    if not paths:
        raise FileNotFoundError(f"no .wav files in {directory}")
    return [read_wav(p) for p in paths]
