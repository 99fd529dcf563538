"""Complex-valued convolutional-recurrent mask estimator with bottleneck adapters.

Feature maps are pairs ``(re, im)`` of real tensors shaped
``(batch, channels, time, freq)``. Frequency is the last axis so that the
frequency-axis linear maps (FSMN projection, adapter cells) run as plain
matrix products. Every layer takes and returns such a pair.

Layout of :class:`MaskNet` (default sizes for a 512-point STFT)::

    Y (1 x 257)  -> enc0 (8 x 128) -> enc1 (16 x 64) -> enc2 (32 x 32) -> enc3 (32 x 16)
                    [adapter]         [adapter]         [adapter]         [adapter]
    bottleneck FSMN over the flattened 32*16 features
    dec3 <- cat(d, gate3(e3)) ... dec0 <- cat(d, gate0(e0)) -> mask (1 x 257)

Each encoder CR block is a causal strided complex conv, a leaky ReLU on both
planes and an FSMN layer. Its output (after the optional adapter) feeds both
the next block and, through an attention gate, the matching decoder block.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError

Planes = tuple[torch.Tensor, torch.Tensor]

LEAK = 0.1


def _check_planes(x: Planes, what: str):
    re, im = x
    if re.shape != im.shape:
        raise ValidationError(f"{what}: real/imag planes differ in shape {tuple(re.shape)} vs {tuple(im.shape)}")
    if re.dim() != 4:
        raise ValidationError(f"{what}: expected (batch, C, T, F) planes, got {tuple(re.shape)}")


def crelu(x: Planes) -> Planes:
    return F.leaky_relu(x[0], LEAK), F.leaky_relu(x[1], LEAK)


def _block_weight(wr: torch.Tensor, wi: torch.Tensor, transposed: bool) -> torch.Tensor:
    # one real conv over stacked [re; im] channels equals the four-conv complex product
    if transposed:
        # ConvTranspose2d weights are (in, out, ...)
        return torch.cat([torch.cat([wr, wi], 1), torch.cat([-wi, wr], 1)], 0)
    return torch.cat([torch.cat([wr, -wi], 1), torch.cat([wi, wr], 1)], 0)


class ComplexConv2d(nn.Module):
    """Complex convolution over (time, freq), causal along time.

    out_r = conv(x_r; W_r) - conv(x_i; W_i) + b_r
    out_i = conv(x_i; W_r) + conv(x_r; W_i) + b_i

    ``kernel`` and ``stride`` are given as (freq, time).
    """

    def __init__(self, in_ch: int, out_ch: int, kernel=(3, 2), stride=(2, 1), freq_pad: int = 1):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        kf, kt = kernel
        self.time_kernel, self.freq_pad = kt, freq_pad
        self.stride = (stride[1], stride[0])
        bound = 1.0 / math.sqrt(in_ch * kf * kt)
        self.weight_r = nn.Parameter(torch.empty(out_ch, in_ch, kt, kf).uniform_(-bound, bound))
        self.weight_i = nn.Parameter(torch.empty(out_ch, in_ch, kt, kf).uniform_(-bound, bound))
        self.bias_r = nn.Parameter(torch.zeros(out_ch))
        self.bias_i = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x: Planes) -> Planes:
        _check_planes(x, "complex conv")
        if x[0].shape[1] != self.in_ch:
            raise ValidationError(f"complex conv expects {self.in_ch} channels, got {x[0].shape[1]}")
        xx = torch.cat(x, 1)
        # left-pad time only, so frame l never sees frames > l
        xx = F.pad(xx, (self.freq_pad, self.freq_pad, self.time_kernel - 1, 0))
        w = _block_weight(self.weight_r, self.weight_i, transposed=False)
        out = F.conv2d(xx, w, torch.cat([self.bias_r, self.bias_i]), self.stride)
        return out[:, : self.out_ch], out[:, self.out_ch :]


class ComplexConvTranspose2d(nn.Module):
    """Complex transposed convolution upsampling frequency; causal in time."""

    def __init__(self, in_ch: int, out_ch: int, kernel=(3, 2), stride=(2, 1), freq_pad: int = 1, out_pad: int = 1):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        kf, kt = kernel
        self.time_kernel = kt
        self.stride = (stride[1], stride[0])
        self.padding = (0, freq_pad)
        self.output_padding = (0, out_pad)
        bound = 1.0 / math.sqrt(out_ch * kf * kt)
        self.weight_r = nn.Parameter(torch.empty(in_ch, out_ch, kt, kf).uniform_(-bound, bound))
        self.weight_i = nn.Parameter(torch.empty(in_ch, out_ch, kt, kf).uniform_(-bound, bound))
        self.bias_r = nn.Parameter(torch.zeros(out_ch))
        self.bias_i = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x: Planes) -> Planes:
        _check_planes(x, "complex transposed conv")
        if x[0].shape[1] != self.in_ch:
            raise ValidationError(f"transposed conv expects {self.in_ch} channels, got {x[0].shape[1]}")
        T = x[0].shape[2]
        w = _block_weight(self.weight_r, self.weight_i, transposed=True)
        out = F.conv_transpose2d(
            torch.cat(x, 1), w, torch.cat([self.bias_r, self.bias_i]),
            self.stride, self.padding, self.output_padding,
        )
        # the transposed conv spills kernel-1 frames past T; dropping them keeps causality
        out = out[:, :, :T]
        return out[:, : self.out_ch], out[:, self.out_ch :]


class FSMN(nn.Module):
    """Feedforward sequential memory layer.

    For every (channel, freq) position and frame l::

        out_l = proj(x_l) + sum_{tau=1..N} a_tau * x_{l - tau}

    ``proj`` is a complex linear map along the frequency axis (shared over
    channels), which lets the layer relate distant frequency bins; ``a_tau``
    are complex per-(channel, freq) memory taps. Frames before 0 count as zero.
    """

    def __init__(self, channels: int, freq: int, taps: int = 3):
        super().__init__()
        self.channels, self.freq, self.taps = channels, freq, taps
        self.proj_r = nn.Parameter(torch.eye(freq))
        self.proj_i = nn.Parameter(torch.zeros(freq, freq))
        self.proj_bias_r = nn.Parameter(torch.zeros(freq))
        self.proj_bias_i = nn.Parameter(torch.zeros(freq))
        self.taps_r = nn.Parameter(torch.zeros(taps, channels, freq))
        self.taps_i = nn.Parameter(torch.zeros(taps, channels, freq))

    def forward(self, x: Planes) -> Planes:
        _check_planes(x, "fsmn")
        xr, xi = x
        if (xr.shape[1], xr.shape[3]) != (self.channels, self.freq):
            raise ValidationError(
                f"fsmn expects (C, F) = {(self.channels, self.freq)}, got {(xr.shape[1], xr.shape[3])}"
            )
        out_r = F.linear(xr, self.proj_r, self.proj_bias_r) - F.linear(xi, self.proj_i)
        out_i = F.linear(xi, self.proj_r, self.proj_bias_i) + F.linear(xr, self.proj_i)
        T = xr.shape[2]
        for tau in range(1, min(self.taps, T - 1) + 1):
            ar = self.taps_r[tau - 1].unsqueeze(1)
            ai = self.taps_i[tau - 1].unsqueeze(1)
            pr, pi = xr[:, :, : T - tau], xi[:, :, : T - tau]
            mem_r = ar * pr - ai * pi
            mem_i = ar * pi + ai * pr
            out_r = out_r + F.pad(mem_r, (0, 0, tau, 0))
            out_i = out_i + F.pad(mem_i, (0, 0, tau, 0))
        return out_r, out_i


class AdapterCell(nn.Module):
    """Real bottleneck along frequency: ``W2 @ relu(W1 @ u + b1) + b2``.

    W2 and b2 start at zero, so a fresh cell outputs exactly zero. W1 is drawn
    uniformly from +-1/sqrt(F) so the hidden units differ from the first step.
    """

    def __init__(self, freq: int, generator: torch.Generator | None = None):
        super().__init__()
        if freq % 2:
            raise ValidationError(f"adapter frequency size must be even, got {freq}")
        self.freq = freq
        half = freq // 2
        bound = 1.0 / math.sqrt(freq)
        w1 = (torch.rand(half, freq, generator=generator, dtype=torch.float64) * 2 - 1) * bound
        self.W1 = nn.Parameter(w1.float())
        self.b1 = nn.Parameter(torch.zeros(half))
        self.W2 = nn.Parameter(torch.zeros(freq, half))
        self.b2 = nn.Parameter(torch.zeros(freq))

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        if u.shape[-1] != self.freq:
            raise ValidationError(f"adapter cell expects F={self.freq}, got {u.shape[-1]}")
        h = F.relu(F.linear(u, self.W1, self.b1))
        return F.linear(h, self.W2, self.b2)


class BottleneckAdapter(nn.Module):
    """Frequency-domain bottleneck adapter with a skip around the complex combination."""

    def __init__(self, freq: int, generator: torch.Generator | None = None):
        super().__init__()
        self.freq = freq
        self.cell_r = AdapterCell(freq, generator)
        self.cell_i = AdapterCell(freq, generator)

    def delta(self, x: Planes) -> Planes:
        ar, ai = x
        dr = self.cell_r(ar) - self.cell_i(ai)
        di = self.cell_r(ai) + self.cell_i(ar)
        return dr, di

    def forward(self, x: Planes) -> Planes:
        _check_planes(x, "adapter")
        dr, di = self.delta(x)
        return x[0] + dr, x[1] + di

    @staticmethod
    def param_count(freq: int) -> int:
        return 2 * (freq * (freq // 2) * 2 + freq // 2 + freq)


class AttentionGate(nn.Module):
    """Per-channel sigmoid gate driven by the mean magnitude of each channel."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.linear = nn.Linear(channels, channels)

    def gate(self, x: Planes) -> torch.Tensor:
        mag = torch.sqrt(x[0] ** 2 + x[1] ** 2 + 1e-12)
        desc = mag.mean(dim=(2, 3))
        return torch.sigmoid(self.linear(desc))[:, :, None, None]

    def forward(self, x: Planes) -> Planes:
        _check_planes(x, "attention gate")
        if x[0].shape[1] != self.channels:
            raise ValidationError(f"gate expects {self.channels} channels, got {x[0].shape[1]}")
        g = self.gate(x)
        return g * x[0], g * x[1]


@dataclass(frozen=True)
class ModelConfig:
    n_bins: int = 257
    channels: tuple[int, ...] = (8, 16, 32, 32)
    freq_kernel: int = 3
    time_kernel: int = 2
    fsmn_taps: int = 3
    adapters: tuple[bool, ...] = (True, True, True, True)
    gate: str = "channel_magnitude"
    input_compress: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "adapters", tuple(bool(a) for a in self.adapters))
        if len(self.adapters) != len(self.channels):
            raise ValidationError(
                f"{len(self.adapters)} adapter flags for {len(self.channels)} encoder blocks"
            )
        if self.gate != "channel_magnitude":
            raise ValidationError(f"unknown gate kind {self.gate!r}")
        if self.freq_kernel != 3:
            raise ValidationError("only freq_kernel=3 is supported (stride-2 halving)")
        sizes = self.freq_sizes()
        if min(sizes) < 1:
            raise ValidationError(f"too many encoder blocks for {self.n_bins} bins: {sizes}")

    @property
    def fft_size(self) -> int:
        return 2 * (self.n_bins - 1)

    def freq_sizes(self) -> list[int]:
        """Frequency size at the output of each encoder block."""
        f = self.n_bins
        out = []
        for i in range(len(self.channels)):
            pad = 0 if (i == 0 and f % 2) else 1
            f = (f + 2 * pad - 3) // 2 + 1
            out.append(f)
        return out

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValidationError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


class EncoderBlock(nn.Module):
    def __init__(self, in_ch, out_ch, freq_out, first_pad, cfg: ModelConfig):
        super().__init__()
        self.conv = ComplexConv2d(in_ch, out_ch, (cfg.freq_kernel, cfg.time_kernel), (2, 1), first_pad)
        self.fsmn = FSMN(out_ch, freq_out, cfg.fsmn_taps)

    def forward(self, x: Planes) -> Planes:
        return self.fsmn(crelu(self.conv(x)))


class MaskNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        sizes = cfg.freq_sizes()
        chans = (1,) + cfg.channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = nn.ModuleList()
            for i, f in enumerate(sizes):
                first_pad = 0 if (i == 0 and cfg.n_bins % 2) else 1
                self.encoder.append(EncoderBlock(chans[i], chans[i + 1], f, first_pad, cfg))
            self.gates = nn.ModuleList(AttentionGate(c) for c in cfg.channels)
            feat = cfg.channels[-1] * sizes[-1]
            self.bottleneck = FSMN(1, feat, cfg.fsmn_taps)
            self.decoder = nn.ModuleList()
            for i in range(len(sizes)):
                up_pad = 0 if (i == 0 and cfg.n_bins % 2) else 1
                out_pad = 0 if (i == 0 and cfg.n_bins % 2) else 1
                self.decoder.append(
                    ComplexConvTranspose2d(
                        2 * chans[i + 1], chans[i], (cfg.freq_kernel, cfg.time_kernel), (2, 1), up_pad, out_pad
                    )
                )
        self.adapters = nn.ModuleDict()
        # the base network has no adapters; flags in cfg are applied by insert_adapters
        self._adapter_seed = seed

    @property
    def placement(self) -> tuple[bool, ...]:
        return tuple(str(i) in self.adapters for i in range(len(self.encoder)))

    def config(self) -> ModelConfig:
        """Configuration describing the network as currently built."""
        return dataclasses.replace(self.cfg, adapters=self.placement)

    def forward(self, yr: torch.Tensor, yi: torch.Tensor, use_adapters: bool = True) -> Planes:
        """Estimate a complex mask for spectrogram planes of shape (batch, bins, frames)."""
        if yr.shape != yi.shape or yr.dim() != 3:
            raise ValidationError(f"expected (batch, bins, frames) planes, got {tuple(yr.shape)}")
        if yr.shape[1] != self.cfg.n_bins:
            raise ValidationError(f"model expects {self.cfg.n_bins} bins, got {yr.shape[1]}")
        x = _compress(yr, yi, self.cfg.input_compress)
        x = (x[0].transpose(1, 2).unsqueeze(1), x[1].transpose(1, 2).unsqueeze(1))
        skips = []
        for i, block in enumerate(self.encoder):
            x = block(x)
            if use_adapters and str(i) in self.adapters:
                x = self.adapters[str(i)](x)
            skips.append(x)
        B, C, T, Fq = x[0].shape
        flat = tuple(p.transpose(1, 2).reshape(B, 1, T, C * Fq) for p in x)
        flat = self.bottleneck(flat)
        d = tuple(p.reshape(B, T, C, Fq).transpose(1, 2) for p in flat)
        for i in reversed(range(len(self.encoder))):
            g = self.gates[i](skips[i])
            d = (torch.cat([d[0], g[0]], 1), torch.cat([d[1], g[1]], 1))
            d = self.decoder[i](d)
            if i > 0:
                d = crelu(d)
        return d[0].squeeze(1).transpose(1, 2), d[1].squeeze(1).transpose(1, 2)


def _compress(yr, yi, power: float):
    if power == 1.0:
        return yr, yi
    mag2 = yr * yr + yi * yi
    scale = (mag2 + 1e-12) ** ((power - 1.0) / 2)
    return yr * scale, yi * scale


def insert_adapters(model: MaskNet, flags, seed: int | None = None) -> MaskNet:
    """Add fresh adapters after the flagged encoder blocks, in place.

    Existing parameters are untouched; flagged positions that already hold an
    adapter keep it.
    """
    flags = tuple(bool(f) for f in flags)
    if len(flags) != len(model.encoder):
        raise ValidationError(f"{len(flags)} adapter flags for {len(model.encoder)} encoder blocks")
    gen = torch.Generator().manual_seed(model._adapter_seed if seed is None else seed)
    sizes = model.cfg.freq_sizes()
    dtype = next(model.parameters()).dtype
    for i, on in enumerate(flags):
        if on and str(i) not in model.adapters:
            model.adapters[str(i)] = BottleneckAdapter(sizes[i], gen).to(dtype)
    return model


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0, with_adapters: bool = True) -> MaskNet:
    """Network for ``cfg``; adapters are inserted per ``cfg.adapters`` unless disabled."""
    model = MaskNet(cfg, seed)
    if with_adapters and any(cfg.adapters):
        insert_adapters(model, cfg.adapters)
    return model


def model_forward(Y, model: MaskNet, mode: str = "with_adapters") -> np.ndarray:
    """Numpy convenience: complex ``(bins, frames)`` spectrogram in, complex mask out."""
    if mode not in ("with_adapters", "without_adapters"):
        raise ValidationError(f"unknown mode {mode!r}")
    Y = np.asarray(Y)
    dtype = next(model.parameters()).dtype
    yr = torch.as_tensor(Y.real, dtype=dtype)[None]
    yi = torch.as_tensor(Y.imag, dtype=dtype)[None]
    with torch.no_grad():
        mr, mi = model(yr, yi, use_adapters=(mode == "with_adapters"))
    return mr[0].double().numpy() + 1j * mi[0].double().numpy()


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
