"""STFT / inverse STFT with perfect reconstruction.

Spectrograms are stored as complex arrays of shape ``(bins, frames)`` so that
frequency comes first, matching the ``C x F x T`` layout of the network.
Frames are centred: the signal is reflect-padded by ``fft_size // 2`` on both
sides before framing.

Two implementations share the same conventions: a numpy one for analysis and
tests, and a torch one that is differentiable and used inside training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import LengthError, ValidationError

SAMPLE_RATE = 16000

WINDOWS = ("sqrt_hann", "hann", "rect")


def make_window(kind: str, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return the (analysis, synthesis) window pair for ``kind``.

    ``hann`` analyses with a periodic Hann window and synthesises with a
    rectangular one; ``sqrt_hann`` splits the Hann window evenly between both
    sides; ``rect`` is rectangular on both sides (diagnostic only).
    """
    idx = np.arange(n)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * idx / n)
    if kind == "sqrt_hann":
        w = np.sqrt(hann)
        return w, w.copy()
    if kind == "hann":
        return hann, np.ones(n)
    if kind == "rect":
        return np.ones(n), np.ones(n)
    raise ValidationError(f"unknown window kind {kind!r}; expected one of {WINDOWS}")


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    hop: int = 256
    window: str = "sqrt_hann"

    def __post_init__(self):
        n, hop = self.fft_size, self.hop
        if n < 2 or n & (n - 1):
            raise ValidationError(f"fft_size must be a power of two, got {n}")
        if hop <= 0 or n % hop or hop > n // 2:
            raise ValidationError(f"hop must divide fft_size and be <= fft_size/2, got hop={hop}")
        env = self.ola_envelope()
        if env.max() - env.min() > 1e-10 * env.max():
            raise ValidationError(f"window {self.window!r} is not COLA at hop {hop}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def windows(self) -> tuple[np.ndarray, np.ndarray]:
        return make_window(self.window, self.fft_size)

    def ola_envelope(self) -> np.ndarray:
        """One hop-period of the overlap-added analysis*synthesis product."""
        a, s = self.windows()
        prod = a * s
        return prod.reshape(-1, self.hop).sum(axis=0)

    def num_frames(self, length: int) -> int:
        padded = length + 2 * (self.fft_size // 2)
        return (padded - self.fft_size) // self.hop + 1


def _check_signal(x, cfg: StftConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"expected a 1-D waveform, got shape {x.shape}")
    if x.size < cfg.fft_size:
        raise LengthError(f"signal of {x.size} samples is shorter than one frame ({cfg.fft_size})")
    if not np.all(np.isfinite(x)):
        raise ValidationError("waveform contains non-finite samples")
    return x


def stft(x, cfg: StftConfig = StftConfig(), onesided: bool = True) -> np.ndarray:
    """Centred STFT of a 1-D signal, shape ``(bins, frames)``.

    With ``onesided=False`` all ``fft_size`` bins are returned (used to check
    Parseval's relation frame by frame).
    """
    x = _check_signal(x, cfg)
    pad = cfg.fft_size // 2
    xp = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.fft_size)[:: cfg.hop]
    analysis, _ = cfg.windows()
    framed = frames * analysis
    spec = np.fft.rfft(framed, axis=-1) if onesided else np.fft.fft(framed, axis=-1)
    return spec.T


def istft(spec, cfg: StftConfig = StftConfig(), length: int | None = None) -> np.ndarray:
    """Overlap-add inverse of :func:`stft`.

    Without ``length`` the raw synthesis of ``(frames - 1) * hop + fft_size``
    samples is returned, in padded coordinates. With ``length`` the centre
    padding is removed and the result is cropped or zero-padded to ``length``.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2:
        raise ValidationError(f"expected (bins, frames) spectrogram, got shape {spec.shape}")
    bins, n_frames = spec.shape
    if bins == cfg.bins:
        frames = np.fft.irfft(spec.T, n=cfg.fft_size, axis=-1)
    elif bins == cfg.fft_size:
        frames = np.fft.ifft(spec.T, axis=-1).real
    else:
        raise ValidationError(f"spectrogram has {bins} bins; config expects {cfg.bins}")
    if n_frames < 1:
        raise ValidationError("spectrogram has no frames")
    analysis, synthesis = cfg.windows()
    out_len = (n_frames - 1) * cfg.hop + cfg.fft_size
    out = np.zeros(out_len)
    env = np.zeros(out_len)
    prod = analysis * synthesis
    for l in range(n_frames):
        sl = slice(l * cfg.hop, l * cfg.hop + cfg.fft_size)
        out[sl] += frames[l] * synthesis
        env[sl] += prod
    nz = env > 1e-10
    out[nz] /= env[nz]
    if length is None:
        return out
    return _trim(out, cfg.fft_size // 2, length)


def _trim(y: np.ndarray, offset: int, length: int) -> np.ndarray:
    y = y[offset : offset + length]
    if y.size < length:
        y = np.pad(y, (0, length - y.size))
    return y


class TorchStft:
    """Differentiable STFT/iSTFT pair on batched real tensors.

    Spectrograms are ``(re, im)`` tensors of shape ``(batch, bins, frames)``.
    """

    def __init__(self, cfg: StftConfig = StftConfig()):
        self.cfg = cfg
        analysis, synthesis = cfg.windows()
        self._analysis = torch.from_numpy(analysis)
        self._synthesis = torch.from_numpy(synthesis)
        self._prod = torch.from_numpy(analysis * synthesis)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        cfg = self.cfg
        if x.shape[-1] < cfg.fft_size:
            raise LengthError(f"signal of {x.shape[-1]} samples is shorter than one frame ({cfg.fft_size})")
        pad = cfg.fft_size // 2
        xp = F.pad(x.unsqueeze(1), (pad, pad), mode="reflect").squeeze(1)
        frames = xp.unfold(-1, cfg.fft_size, cfg.hop)
        spec = torch.fft.rfft(frames * self._analysis.to(x.dtype), dim=-1)
        spec = spec.transpose(-1, -2)
        return spec.real, spec.imag

    def inverse(self, re: torch.Tensor, im: torch.Tensor, length: int) -> torch.Tensor:
        cfg = self.cfg
        if re.shape[-2] != cfg.bins:
            raise ValidationError(f"spectrogram has {re.shape[-2]} bins; config expects {cfg.bins}")
        spec = torch.complex(re, im).transpose(-1, -2)
        frames = torch.fft.irfft(spec, n=cfg.fft_size, dim=-1) * self._synthesis.to(re.dtype)
        n_frames = frames.shape[-2]
        out_len = (n_frames - 1) * cfg.hop + cfg.fft_size
        fold = lambda v: F.fold(
            v, output_size=(1, out_len), kernel_size=(1, cfg.fft_size), stride=(1, cfg.hop)
        ).reshape(v.shape[0], out_len)
        out = fold(frames.transpose(-1, -2))
        prod = self._prod.to(re.dtype).reshape(1, -1, 1).expand(1, -1, n_frames)
        env = fold(prod)
        env = torch.where(env > 1e-10, env, torch.ones_like(env))
        out = out / env
        pad = cfg.fft_size // 2
        out = out[:, pad : pad + length]
        if out.shape[-1] < length:
            out = F.pad(out, (0, length - out.shape[-1]))
        return out
