"""Noise-prediction network with time-aware location-variable convolutions.

Layout (all 1-D, channels first)::

    x_t --conv--> h0 --DBlock x3--> bottom
    bottom --UBlock(skip=d2)--> --UBlock(skip=d1)--> --UBlock(skip=h0)--> --conv--> eps

Each UBlock upsamples, adds the matching DBlock skip, and runs a stack of
gated convolutions whose per-segment kernels are predicted from the mel
frames and the diffusion-step embedding.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .audio import MelSpectrogram
from .params import ParamStore, uniform_init

PE_DIM = 128
_PE_FREQS = 10.0 ** (np.arange(64) * 4.0 / 63.0)


@dataclass(frozen=True)
class RefinerConfig:
    hidden_channels: int = 32
    down_ratios: tuple = (4, 8, 8)
    up_ratios: tuple = (8, 8, 4)
    lvc_layers_per_block: int = 4
    lvc_kernel_size: int = 3
    segment_length: int = 256
    pe_dim: int = PE_DIM
    embed_dim: int = 512
    kp_hidden: int = 64
    kp_kernel_size: int = 3
    mel_bands: int = 80
    hop_size: int = 256
    io_kernel_size: int = 7

    def __post_init__(self):
        object.__setattr__(self, "down_ratios", tuple(int(r) for r in self.down_ratios))
        object.__setattr__(self, "up_ratios", tuple(int(r) for r in self.up_ratios))
        if self.pe_dim != PE_DIM:
            raise ValueError("the step encoding is fixed at 128 dimensions")
        if len(self.down_ratios) != len(self.up_ratios):
            raise ValueError("need as many DBlocks as UBlocks")
        if tuple(reversed(self.down_ratios)) != self.up_ratios:
            raise ValueError(f"up ratios {self.up_ratios} must mirror down ratios {self.down_ratios}")
        if int(np.prod(self.up_ratios)) != self.hop_size:
            raise ValueError(f"upsample product {int(np.prod(self.up_ratios))} != hop size {self.hop_size}")
        if self.hop_size % self.segment_length:
            raise ValueError(f"segment length {self.segment_length} must divide hop size {self.hop_size}")
        for i in range(len(self.up_ratios)):
            if self.block_segment_length(i) < 1:
                raise ValueError(f"segment length {self.segment_length} too short for UBlock {i}")

    def block_segment_length(self, i):
        """Segment length at the output rate of UBlock ``i``."""
        rate = int(np.prod(self.up_ratios[:i + 1]))
        return self.segment_length * rate // self.hop_size

    def segments_per_frame(self):
        return self.hop_size // self.segment_length

    def kernel_coefficients(self):
        c, k = self.hidden_channels, self.lvc_kernel_size
        return 2 * self.lvc_layers_per_block * c * c * k

    def to_dict(self):
        d = asdict(self)
        d["down_ratios"] = list(self.down_ratios)
        d["up_ratios"] = list(self.up_ratios)
        return d

    @classmethod
    def micro(cls, **overrides):
        """Tiny configuration for gradient checks and fast tests."""
        base = dict(hidden_channels=4, embed_dim=16, kp_hidden=8, mel_bands=8, io_kernel_size=3)
        base.update(overrides)
        return cls(**base)


# --------------------------------------------------------------------------- building blocks


def positional_encoding(t):
    """128-d sinusoidal encoding of a (real-valued) diffusion step."""
    phase = _PE_FREQS * float(t)
    return np.concatenate([np.sin(phase), np.cos(phase)])


def diffusion_embed(pe, params, prefix="embed"):
    """FC -> LReLU -> FC."""
    h = ag.linear(pe, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"])
    h = ag.lrelu(h)
    return ag.linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def kernel_predictor(c_block, emb, params, cfg, prefix):
    """Per-segment filter and gate kernels for every LVC layer of one block.

    ``c_block`` is ``(bands, K)``. Returns a tensor of shape
    ``(layers, K, 2C, C, k)``; along axis 2 the first ``C`` output channels
    are the filter kernels F and the last ``C`` the gate kernels G.
    """
    c_block = ag.as_tensor(c_block)
    if c_block.shape[0] != cfg.mel_bands or c_block.shape[1] < 1:
        raise ValueError(f"kernel predictor expects ({cfg.mel_bands}, K>=1) conditioning, got {c_block.shape}")
    h = ag.conv1d(c_block, params[f"{prefix}.cond.w"])
    e = ag.linear(emb, params[f"{prefix}.emb.w"])
    h = ag.lrelu(ag.add(h, ag.reshape(e, (-1, 1))))
    h = ag.lrelu(ag.conv1d(h, params[f"{prefix}.hidden.w"], padding="same"))
    out = ag.conv1d(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"], padding="same")
    n_frames = c_block.shape[1]
    c, k = cfg.hidden_channels, cfg.lvc_kernel_size
    out = ag.reshape(out, (cfg.lvc_layers_per_block, 2 * c, c, k, n_frames))
    return ag.transpose(out, (0, 4, 1, 2, 3))


def split_kernels(kernels):
    """``(..., 2C, C, k)`` -> filter and gate halves as numpy arrays."""
    data = kernels.data if isinstance(kernels, ag.Tensor) else np.asarray(kernels)
    c = data.shape[-3] // 2
    return data[..., :c, :, :], data[..., c:, :, :]


def split(x, segment_len):
    """Partition ``x`` (``(C, D)`` or ``(D,)``) into ``D / M`` contiguous segments."""
    x = np.asarray(x)
    d = x.shape[-1]
    if d % segment_len:
        raise ValueError(f"length {d} is not divisible by segment length {segment_len}")
    return [x[..., i:i + segment_len] for i in range(0, d, segment_len)]


def lvc_layer(x, kernels, segment_len, q):
    """Residual gated location-variable convolution with dilation ``3**q``.

    ``kernels`` is ``(K, 2C, C, k)``, filter kernels stacked over gate kernels.
    """
    return ag.add(x, ag.gated_segment_conv1d(x, kernels, segment_len, 3 ** q))


def dblock(x, ratio, params, prefix):
    """Strided conv (kernel ``2 * ratio``) -> LReLU -> conv3 -> LReLU."""
    if x.shape[1] % ratio:
        raise ValueError(f"DBlock input length {x.shape[1]} not divisible by ratio {ratio}")
    h = ag.conv1d(x, params[f"{prefix}.down.w"], params[f"{prefix}.down.b"],
                  stride=ratio, padding=ratio // 2)
    h = ag.lrelu(h)
    h = ag.conv1d(h, params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"], padding="same")
    return ag.lrelu(h)


def ublock(x, skip, c_block, emb, ratio, params, cfg, index, kernels=None):
    """Upsample, add the skip, then run the time-aware LVC stack."""
    prefix = f"up{index}"
    h = ag.conv_transpose1d(x, params[f"{prefix}.up.w"], params[f"{prefix}.up.b"], stride=ratio)
    if skip is not None:
        if skip.shape != h.shape:
            raise ValueError(f"UBlock {index}: skip {skip.shape} does not match upsampled {h.shape}")
        h = ag.add(h, skip)
    if kernels is None:
        kernels = kernel_predictor(c_block, emb, params, cfg, f"kp{index}")
    seg = cfg.block_segment_length(index)
    for q in range(cfg.lvc_layers_per_block):
        h = lvc_layer(h, kernels[q], seg, q)
    return h


# --------------------------------------------------------------------------- network


def init_refiner(cfg, rng):
    """Fresh parameters: uniform(+-sqrt(1/fan_in)); kernel-predictor outputs start at zero."""
    p = ParamStore()
    C, E = cfg.hidden_channels, cfg.embed_dim
    kio = cfg.io_kernel_size

    def dense(name, shape, fan_in, out_axis=0):
        p.add(f"{name}.w", uniform_init(rng, shape, fan_in))
        p.add(f"{name}.b", uniform_init(rng, (shape[out_axis],), fan_in))

    dense("embed.fc1", (E, cfg.pe_dim), cfg.pe_dim)
    dense("embed.fc2", (E, E), E)
    dense("input", (C, 1, kio), kio)
    for i, r in enumerate(cfg.down_ratios):
        dense(f"down{i}.down", (C, C, 2 * r), C * 2 * r)
        dense(f"down{i}.conv", (C, C, 3), C * 3)
    H, kk = cfg.kp_hidden, cfg.kp_kernel_size
    for i, r in enumerate(cfg.up_ratios):
        # transposed-conv weights are (C_in, C_out, k); each output sees 2 taps per input channel
        dense(f"up{i}.up", (C, C, 2 * r), C * 2, out_axis=1)
        p.add(f"kp{i}.cond.w", uniform_init(rng, (H, cfg.mel_bands, 1), cfg.mel_bands))
        p.add(f"kp{i}.emb.w", uniform_init(rng, (H, E), E))
        p.add(f"kp{i}.hidden.w", uniform_init(rng, (H, H, kk), H * kk))
        p.add(f"kp{i}.out.w", np.zeros((cfg.kernel_coefficients(), H, kk)))
        p.add(f"kp{i}.out.b", np.zeros(cfg.kernel_coefficients()))
    dense("output", (1, C, kio), C * kio)
    return p


def _conditioning(mel, cfg):
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cfg.mel_bands:
        raise ValueError(f"mel must be (frames, {cfg.mel_bands}), got {frames.shape}")
    c = frames.T
    rep = cfg.segments_per_frame()
    return np.repeat(c, rep, axis=1) if rep > 1 else c


def refiner_forward(x_t, mel, t, params, cfg, zero_kernels=False):
    """Predict the noise in ``x_t`` (shape ``(1, L)`` or ``(L,)``) given the mel and step ``t``.

    ``L`` must equal ``frames * hop_size``. Returns a ``(1, L)`` Tensor.
    ``zero_kernels`` bypasses the kernel predictor (all LVC kernels zero),
    leaving only the conv/upsample skeleton.
    """
    x = ag.as_tensor(x_t)
    if x.data.ndim == 1:
        x = ag.reshape(x, (1, -1))
    c = _conditioning(mel, cfg)
    n_frames = c.shape[1] // cfg.segments_per_frame()
    length = x.shape[1]
    if length != n_frames * cfg.hop_size:
        raise ValueError(f"waveform length {length} != {n_frames} mel frames x hop {cfg.hop_size}")

    emb = diffusion_embed(positional_encoding(t), params)
    h = ag.conv1d(x, params["input.w"], params["input.b"], padding="same")
    skips = [h]
    for i, r in enumerate(cfg.down_ratios):
        h = dblock(h, r, params, f"down{i}")
        skips.append(h)
    h = skips.pop()
    for i, r in enumerate(cfg.up_ratios):
        kernels = None
        if zero_kernels:
            seg_count = c.shape[1]
            C, k = cfg.hidden_channels, cfg.lvc_kernel_size
            kernels = ag.Tensor(np.zeros((cfg.lvc_layers_per_block, seg_count, 2 * C, C, k)))
        h = ublock(h, skips.pop(), c, emb, r, params, cfg, i, kernels=kernels)
    return ag.conv1d(h, params["output.w"], params["output.b"], padding="same")


def skeleton_forward(x_t, params, cfg):
    """Conv/upsample path alone, evaluated directly with numpy (no LVC stack)."""
    x = np.asarray(x_t, dtype=np.float64).reshape(1, -1)
    with ag.no_grad():
        h = ag.conv1d(x, params["input.w"], params["input.b"], padding="same")
        skips = [h]
        for i, r in enumerate(cfg.down_ratios):
            h = dblock(h, r, params, f"down{i}")
            skips.append(h)
        h = skips.pop()
        for i, r in enumerate(cfg.up_ratios):
            h = ag.conv_transpose1d(h, params[f"up{i}.up.w"], params[f"up{i}.up.b"], stride=r)
            h = ag.add(h, skips.pop())
        out = ag.conv1d(h, params["output.w"], params["output.b"], padding="same")
    return out.data


@dataclass
class Refiner:
    """Configuration plus parameters; calling it runs inference without a graph."""

    cfg: RefinerConfig
    params: ParamStore = field(repr=False)
    calls: int = 0

    @classmethod
    def create(cls, cfg, seed=0):
        return cls(cfg, init_refiner(cfg, np.random.default_rng(seed)))

    def forward(self, x_t, mel, t):
        return refiner_forward(x_t, mel, t, self.params, self.cfg)

    def __call__(self, x_t, mel, t):
        self.calls += 1
        with ag.no_grad():
            out = refiner_forward(x_t, mel, t, self.params, self.cfg)
        return out.data.reshape(np.shape(x_t))
