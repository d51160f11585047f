"""Command-line entry point: ``lvcdiff <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, bad
config, missing input file).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .audio import StftConfig, mel_filterbank, mel_spectrogram, read_mel, read_wav, write_mel, write_wav
from .checkpoint import CheckpointError, file_checksum
from .diffusion import (
    SchedulerHyper,
    ScheduleError,
    align_schedule,
    linear_beta,
    load_schedule,
    noise_scheduling_search,
    save_schedule,
)
from .metrics import MetricReport, metrics, ndb_jsd
from .noise_predictor import PhiConfig, phi_stub
from .refiner import RefinerConfig
from .sampling import MODES, SampleRequest, rtf_bench, sample
from .synth import harmonic_clip
from .train import (
    TrainConfig,
    TrainingDivergedError,
    load_noise_predictor,
    load_refiner,
    read_dataset,
    save_noise_predictor,
    save_refiner,
    schedule_from_checkpoint,
    train_noise_predictor,
    train_refiner,
)

log = logging.getLogger("lvcdiff")


class UsageError(Exception):
    """Bad configuration or missing input; maps to exit code 2."""


# --------------------------------------------------------------------------- configuration

_SECTIONS = {
    "refiner": RefinerConfig,
    "phi": PhiConfig,
    "train": TrainConfig,
    "stft": StftConfig,
}
_SCHEDULE_KEYS = {"T", "beta_lo", "beta_hi"}
_SEARCH_KEYS = {"alpha_hat", "beta_hat", "N"}


def load_config(path):
    """Parse a TOML or JSON config and reject unknown sections or keys."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            import tomli

            raw = tomli.loads(text)
    except Exception as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    allowed = {name: {f.name for f in fields(cls)} for name, cls in _SECTIONS.items()}
    allowed["schedule"] = _SCHEDULE_KEYS
    allowed["search"] = _SEARCH_KEYS
    for section, values in raw.items():
        if section not in allowed:
            raise UsageError(f"unknown config section [{section}]; expected one of {sorted(allowed)}")
        if not isinstance(values, dict):
            raise UsageError(f"config section [{section}] must be a table")
        unknown = set(values) - allowed[section]
        if unknown:
            raise UsageError(f"unknown key(s) {sorted(unknown)} in [{section}]")
    return raw


def _build(cls, section, overrides):
    values = dict(section or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    for f in fields(cls):
        if f.name in values and isinstance(f.default, tuple):
            values[f.name] = tuple(values[f.name])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def _schedule(section):
    s = section or {}
    try:
        return linear_beta(int(s.get("T", 1000)), float(s.get("beta_lo", 1e-4)), float(s.get("beta_hi", 0.005)))
    except ValueError as exc:
        raise UsageError(f"invalid schedule: {exc}") from exc


def _need(path):
    if not Path(path).exists():
        raise UsageError(f"file not found: {path}")
    return path


# --------------------------------------------------------------------------- commands


def cmd_mel(args):
    cfg = load_config(args.config)
    stft_cfg = _build(StftConfig, cfg.get("stft"), {"fft_size": args.fft, "win_size": args.win,
                                                   "hop_size": args.hop})
    buf = read_wav(_need(args.inp))
    bands = args.bands or (cfg.get("refiner") or {}).get("mel_bands", 80)
    fb = mel_filterbank(bands, stft_cfg.fft_size, buf.sample_rate_hz, 0.0, min(8000.0, buf.sample_rate_hz / 2))
    mel = mel_spectrogram(buf, stft_cfg, fb)
    write_mel(mel, args.out)
    print(f"frames={mel.num_frames} bands={mel.bands}")
    return 0


def cmd_train_refiner(args):
    cfg = load_config(args.config)
    rcfg = _build(RefinerConfig, cfg.get("refiner"), {})
    tcfg = _build(TrainConfig, cfg.get("train"), {"steps": args.steps, "seed": args.seed, "lr": args.lr,
                                                  "clip_len": args.clip_len, "batch_size": args.batch_size})
    stft_cfg = _build(StftConfig, cfg.get("stft"), {"hop_size": rcfg.hop_size})
    sched = _schedule(cfg.get("schedule"))
    data = read_dataset(_need(args.data))
    trace = args.loss_csv or str(args.out) + ".loss.csv"
    res = train_refiner(data, tcfg, sched, refiner_cfg=rcfg, stft_cfg=stft_cfg, trace_path=trace)
    save_refiner(args.out, res.model, tcfg, sched, res.optimizer, global_step=tcfg.steps)
    final = res.losses[-1] if res.losses else float("nan")
    print(f"steps={tcfg.steps} final_loss={final:.6g} checkpoint={args.out} trace={trace}")
    return 0


def cmd_train_scheduler(args):
    cfg = load_config(args.config)
    pcfg = _build(PhiConfig, cfg.get("phi"), {})
    tcfg = _build(TrainConfig, cfg.get("train"), {"steps": args.steps, "seed": args.seed, "lr": args.lr,
                                                  "tau": args.tau, "clip_len": args.clip_len})
    refiner, ckpt = load_refiner(_need(args.theta))
    sched = schedule_from_checkpoint(ckpt)
    if not 1 <= tcfg.tau <= sched.T - tcfg.tau:
        raise UsageError(f"--tau {tcfg.tau} out of range for T={sched.T} (need 1 <= tau <= T - tau)")
    data = read_dataset(_need(args.data))
    before = file_checksum(args.theta)
    print(f"theta checksum before: {before:08x}")
    trace = args.loss_csv or str(args.out) + ".loss.csv"
    res = train_noise_predictor(data, tcfg, refiner, sched, phi_cfg=pcfg, trace_path=trace)
    save_noise_predictor(args.out, res.model, tcfg, res.optimizer, global_step=tcfg.steps)
    after = file_checksum(args.theta)
    print(f"theta checksum after:  {after:08x}")
    if before != after:
        raise RuntimeError("refiner checkpoint changed during noise-predictor training")
    return 0


def _context_audio(args, sample_rate, length):
    if args.wav:
        buf = read_wav(_need(args.wav))
        return buf
    return harmonic_clip(np.random.default_rng(args.seed), num_samples=length, sample_rate=sample_rate)


def cmd_search_schedule(args):
    cfg = load_config(args.config)
    search = cfg.get("search") or {}
    hyper = SchedulerHyper(
        alpha_hat_N=args.alpha_hat if args.alpha_hat is not None else search.get("alpha_hat", 0.54),
        beta_hat_N=args.beta_hat if args.beta_hat is not None else search.get("beta_hat", 0.70),
        N=args.N if args.N is not None else search.get("N", 4),
    )
    refiner, ckpt = load_refiner(_need(args.theta))
    sched = schedule_from_checkpoint(ckpt)
    try:
        hyper.validate(sched.T)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.phi_const is not None:
        phi = phi_stub(args.phi_const)
    elif args.phi:
        phi, _ = load_noise_predictor(_need(args.phi))
    else:
        raise UsageError("search-schedule needs --phi or --phi-const")
    rcfg = refiner.cfg
    stft_cfg = StftConfig(hop_size=rcfg.hop_size)
    buf = _context_audio(args, 22050, args.frames * rcfg.hop_size)
    frames = len(buf) // rcfg.hop_size
    if frames < 1:
        raise UsageError("context audio shorter than one hop")
    x0 = buf.samples[: frames * rcfg.hop_size]
    fb = mel_filterbank(rcfg.mel_bands, stft_cfg.fft_size, buf.sample_rate_hz, 0.0,
                        min(8000.0, buf.sample_rate_hz / 2))
    mel = mel_spectrogram(buf, stft_cfg, fb).head(frames)
    found = noise_scheduling_search(phi, refiner, hyper, sched, x0, mel, np.random.default_rng(args.seed))
    aligned = align_schedule(found, sched)
    save_schedule(args.out, aligned, sched, "predictor")
    print(f"T_m={aligned.T_m} beta_hat={list(aligned.beta_hat)} t_m={list(aligned.t_m)}")
    return 0


def cmd_vocode(args):
    refiner, _ = load_refiner(_need(args.theta))
    schedule, train, _ = load_schedule(_need(args.schedule))
    mel = read_mel(_need(args.mel))
    if mel.bands != refiner.cfg.mel_bands:
        raise UsageError(f"mel has {mel.bands} bands, checkpoint expects {refiner.cfg.mel_bands}")
    start = time.perf_counter()
    refiner.calls = 0
    audio = sample(SampleRequest(mel, schedule, args.seed, args.mode), refiner, train)
    seconds = time.perf_counter() - start
    write_wav(audio, args.out)
    print(f"steps={refiner.calls} rtf={seconds / audio.duration_s:.4g} samples={len(audio)}")
    return 0


def cmd_eval(args):
    ref = read_wav(_need(args.ref))
    gen = read_wav(_need(args.gen))
    n = min(len(ref), len(gen))
    report = metrics(ref.samples[:n], gen.samples[:n])
    if args.ndb_train:
        stft_cfg = StftConfig()
        fb = mel_filterbank(args.bands, stft_cfg.fft_size, ref.sample_rate_hz, 0.0,
                            min(8000.0, ref.sample_rate_hz / 2))
        train_frames = np.concatenate([mel_spectrogram(b, stft_cfg, fb).frames
                                       for b in read_dataset(_need(args.ndb_train))])
        gen_frames = mel_spectrogram(gen, stft_cfg, fb).frames
        try:
            report.ndb, report.jsd = ndb_jsd(train_frames, gen_frames, k=args.k, seed=args.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_bench(args):
    refiner, _ = load_refiner(_need(args.theta))
    schedule, train, _ = load_schedule(_need(args.schedule))
    if args.mel:
        mel = read_mel(_need(args.mel))
    else:
        from .audio import MelSpectrogram

        frames = np.full((args.frames, refiner.cfg.mel_bands), np.log(1e-2))
        mel = MelSpectrogram(frames, refiner.cfg.hop_size, 22050)
    result = rtf_bench(refiner, schedule, mel, args.repeats, args.mode, train)
    report = MetricReport(rtf=result["rtf"])
    print(json.dumps(dict(json.loads(report.to_json()), evaluations=result["evaluations"],
                          seconds=result["seconds"]), indent=2))
    return 0


# --------------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="lvcdiff", description="Diffusion vocoder with time-aware LVC.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mel", help="compute a log-mel spectrogram file from a WAV")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fft", type=int)
    s.add_argument("--win", type=int)
    s.add_argument("--hop", type=int)
    s.add_argument("--bands", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_mel)

    s = sub.add_parser("train-refiner", help="train the noise-prediction network")
    s.add_argument("--data", required=True, help="directory of .wav files")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--clip-len", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--loss-csv", help="loss trace path (default: <out>.loss.csv)")
    s.set_defaults(func=cmd_train_refiner)

    s = sub.add_parser("train-scheduler", help="train the noise predictor against a frozen refiner")
    s.add_argument("--data", required=True)
    s.add_argument("--theta", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tau", type=int)
    s.add_argument("--config")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--clip-len", type=int)
    s.add_argument("--loss-csv")
    s.set_defaults(func=cmd_train_scheduler)

    s = sub.add_parser("search-schedule", help="derive a short sampling schedule")
    s.add_argument("--theta", required=True)
    s.add_argument("--phi")
    s.add_argument("--phi-const", type=float, help="use a constant ratio instead of a trained predictor")
    s.add_argument("--N", type=int)
    s.add_argument("--alpha-hat", type=float)
    s.add_argument("--beta-hat", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--wav", help="context clip (default: a synthetic harmonic clip)")
    s.add_argument("--frames", type=int, default=32, help="synthetic context length in frames")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.set_defaults(func=cmd_search_schedule)

    s = sub.add_parser("vocode", help="synthesize a waveform from a mel file")
    s.add_argument("--mel", required=True)
    s.add_argument("--theta", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=MODES, default="discrete_aligned")
    s.set_defaults(func=cmd_vocode)

    s = sub.add_parser("eval", help="compare generated audio with a reference")
    s.add_argument("--ref", required=True)
    s.add_argument("--gen", required=True)
    s.add_argument("--ndb-train", help="directory of training WAVs for NDB/JSD")
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--bands", type=int, default=80)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="also write the JSON report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="measure the real-time factor")
    s.add_argument("--theta", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--mel")
    s.add_argument("--frames", type=int, default=86)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--mode", choices=MODES, default="discrete_aligned")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, ScheduleError) as exc:
        print(f"lvcdiff {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, CheckpointError, RuntimeError, ValueError) as exc:
        print(f"lvcdiff {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
