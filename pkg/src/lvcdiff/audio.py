"""Waveform I/O, STFT and log-mel features.

All functions are pure; randomness comes in through an explicit
``numpy.random.Generator``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "AudioBuffer",
    "StftConfig",
    "MelSpectrogram",
    "WavFormatError",
    "UnsupportedFormatError",
    "ClipTooShortError",
    "read_wav",
    "write_wav",
    "stft",
    "hann_window",
    "hz_to_mel",
    "mel_to_hz",
    "mel_filterbank",
    "mel_spectrogram",
    "num_frames",
    "random_crop",
    "read_mel",
    "write_mel",
    "LOG_FLOOR",
]

LOG_FLOOR = 1e-5

_PCM = 0x0001
_IEEE_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE data. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedFormatError(ValueError):
    pass


class ClipTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError("AudioBuffer needs a non-empty 1-D sample array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioBuffer samples must be finite")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    win_size: int = 1024
    hop_size: int = 256
    window: str = "hann"

    def __post_init__(self):
        if min(self.fft_size, self.win_size, self.hop_size) <= 0:
            raise ValueError("STFT sizes must be positive")
        if self.win_size > self.fft_size:
            raise ValueError(f"win_size {self.win_size} exceeds fft_size {self.fft_size}")
        if self.hop_size > self.win_size:
            raise ValueError(f"hop_size {self.hop_size} exceeds win_size {self.win_size}")
        if self.window.lower() != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def num_bins(self):
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel matrix with frames along axis 0, shape ``(F, B)``."""

    frames: np.ndarray
    hop_size: int = 256
    sample_rate_hz: int = 22050

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"mel frames must be a non-empty (F, B) matrix, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("mel entries must be finite")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def bands(self):
        return self.frames.shape[1]

    def head(self, n):
        """First ``n`` frames (used to align a clip of ``n * hop`` samples)."""
        return MelSpectrogram(self.frames[:n], self.hop_size, self.sample_rate_hz)


# --------------------------------------------------------------------------- WAV


def _parse_fmt(chunk, offset):
    if len(chunk) < 16:
        raise WavFormatError("fmt chunk shorter than 16 bytes", offset)
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", chunk[:16])
    if tag == _EXTENSIBLE:
        if len(chunk) < 40:
            raise WavFormatError("WAVE_FORMAT_EXTENSIBLE fmt chunk truncated", offset)
        tag = struct.unpack("<H", chunk[24:26])[0]
    if channels < 1:
        raise WavFormatError("channel count is zero", offset + 2)
    if tag == _PCM and bits == 16:
        dtype = np.dtype("<i2")
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
    else:
        raise UnsupportedFormatError(
            f"unsupported WAV codec: format tag 0x{tag:04x} with {bits} bits per sample "
            "(only PCM-16 and IEEE-float-32 are read)"
        )
    if block_align != channels * dtype.itemsize:
        raise WavFormatError(f"block align {block_align} inconsistent with {channels} channels", offset + 12)
    return tag, channels, rate, dtype


def read_wav(path):
    """Read a PCM-16 or float-32 WAV file as a mono buffer.

    Multichannel audio is averaged to mono. PCM is scaled by 1/32768.
    """
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise WavFormatError("file too short for a RIFF header", len(data))
    if data[:4] != b"RIFF":
        raise WavFormatError(f"expected 'RIFF' magic, found {data[:4]!r}", 0)
    if data[8:12] != b"WAVE":
        raise WavFormatError(f"expected 'WAVE' form type, found {data[8:12]!r}", 8)

    fmt = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack("<I", data[pos + 4:pos + 8])[0]
        body_start = pos + 8
        if cid == b"fmt ":
            if body_start + size > len(data):
                raise WavFormatError("fmt chunk runs past end of file", pos)
            fmt = _parse_fmt(data[body_start:body_start + size], body_start)
        elif cid == b"data":
            if fmt is None:
                raise WavFormatError("data chunk before fmt chunk", pos)
            _, channels, rate, dtype = fmt
            # tolerate writers that leave a bogus size on the final chunk
            size = min(size, len(data) - body_start)
            frame_bytes = channels * dtype.itemsize
            usable = size - size % frame_bytes
            raw = np.frombuffer(data, dtype=dtype, count=usable // dtype.itemsize, offset=body_start)
            if raw.size == 0:
                raise WavFormatError("data chunk holds no complete sample frame", body_start)
            frames = raw.reshape(-1, channels).astype(np.float64)
            if dtype.kind == "i":
                frames /= 32768.0
            return AudioBuffer(frames.mean(axis=1), rate)
        pos = body_start + size + (size & 1)
    if fmt is None:
        raise WavFormatError("no fmt chunk found", pos)
    raise WavFormatError("no data chunk found", pos)


def quantize_pcm16(samples):
    """Clamp to [-1, 1] and map to symmetric 16-bit integers in [-32767, 32767].

    Scaling by 32768 (the reader's inverse) before saturating makes
    write(read(f)) exact for every code except -32768.
    """
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.rint(clipped * 32768.0), -32767, 32767).astype("<i2")


def write_wav(buf, path):
    """Write ``buf`` as a mono PCM-16 little-endian WAV file."""
    pcm = quantize_pcm16(buf.samples).tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, _PCM, 1, buf.sample_rate_hz, buf.sample_rate_hz * 2, 2, 16)
    payload = header + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm
    path = Path(path)
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise OSError(f"could not write WAV to {path}: {exc}") from exc


# --------------------------------------------------------------------------- STFT


def hann_window(n):
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def num_frames(num_samples, hop_size):
    return num_samples // hop_size + 1


def _frame(samples, cfg):
    pad = cfg.fft_size // 2
    if samples.size > 1:
        padded = np.pad(samples, pad, mode="reflect")
    else:
        padded = np.pad(samples, pad, mode="constant")
    count = num_frames(samples.size, cfg.hop_size)
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop_size * np.arange(count)[:, None]
    window = np.zeros(cfg.fft_size)
    left = (cfg.fft_size - cfg.win_size) // 2
    window[left:left + cfg.win_size] = hann_window(cfg.win_size)
    return padded[idx] * window


def stft(buf, cfg=StftConfig()):
    """One-sided STFT, shape ``(F, fft_size // 2 + 1)``.

    Frames are centred: the signal is reflection-padded by ``fft_size // 2`` on
    both sides, giving ``len // hop + 1`` frames.
    """
    samples = buf.samples if isinstance(buf, AudioBuffer) else np.asarray(buf, dtype=np.float64)
    return np.fft.rfft(_frame(samples, cfg), n=cfg.fft_size, axis=-1)


# --------------------------------------------------------------------------- mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(bands=80, fft_size=1024, sample_rate_hz=22050, fmin=0.0, fmax=8000.0):
    """Triangular mel filters with unit peak, shape ``(bands, fft_size // 2 + 1)``."""
    if not 0 <= fmin < fmax <= sample_rate_hz / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= sr/2, got fmin={fmin}, fmax={fmax}, sr={sample_rate_hz}")
    if bands < 1:
        raise ValueError("bands must be >= 1")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), bands + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate_hz / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def filter_centers_hz(bands=80, fmin=0.0, fmax=8000.0):
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), bands + 2))[1:-1]


def mel_spectrogram(buf, cfg=StftConfig(), fb=None):
    """Natural-log mel magnitudes floored at ``LOG_FLOOR``."""
    if fb is None:
        fb = mel_filterbank(80, cfg.fft_size, buf.sample_rate_hz)
    if fb.shape[1] != cfg.num_bins:
        raise ValueError(f"filterbank has {fb.shape[1]} bins, STFT gives {cfg.num_bins}")
    mag = np.abs(stft(buf, cfg))
    frames = np.log(np.maximum(mag @ fb.T, LOG_FLOOR))
    return MelSpectrogram(frames, cfg.hop_size, buf.sample_rate_hz)


def random_crop(buf, length, rng):
    """Uniformly placed contiguous crop. Returns ``(AudioBuffer, start)``."""
    n = len(buf)
    if n < length:
        raise ClipTooShortError(f"buffer has {n} samples, crop needs {length}")
    start = int(rng.integers(0, n - length + 1))
    return AudioBuffer(buf.samples[start:start + length], buf.sample_rate_hz), start


# --------------------------------------------------------------------------- MEL1 files

_MEL_MAGIC = b"MEL1"


def write_mel(mel, path):
    header = _MEL_MAGIC + struct.pack("<IIII", mel.num_frames, mel.bands, mel.hop_size, mel.sample_rate_hz)
    Path(path).write_bytes(header + mel.frames.astype("<f4").tobytes())


def read_mel(path):
    data = Path(path).read_bytes()
    if data[:4] != _MEL_MAGIC:
        raise ValueError(f"{path}: not a MEL1 file")
    if len(data) < 20:
        raise ValueError(f"{path}: truncated MEL1 header")
    frames, bands, hop, rate = struct.unpack("<IIII", data[4:20])
    expected = 20 + 4 * frames * bands
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {frames}x{bands} mel, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=20).reshape(frames, bands)
    return MelSpectrogram(values.astype(np.float64), hop, rate)
