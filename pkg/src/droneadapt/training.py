"""SI-SNR loss, freeze policies and the training loop.

Gradients come from torch autograd; :class:`ParameterStore` wraps a model
with per-parameter frozen flags and gradient slots. Frozen parameters never
reach the optimizer, so their values stay bit-identical across steps.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dsp import StftConfig, TorchStft
from .errors import NonFiniteLossError, StateError, ValidationError
from .masking import apply_mask_planes
from .model import MaskNet

log = logging.getLogger(__name__)

EPS = 1e-8
POLICIES = ("full", "fine_tune", "adapter_tune", "frozen")


# ------------------------------------------------------------------ SI-SNR


def _check_pair(est, ref):
    if est.shape != ref.shape:
        raise ValidationError(f"length mismatch: estimate {tuple(est.shape)} vs reference {tuple(ref.shape)}")
    if est.shape[-1] < 1:
        raise ValidationError("signals must have at least one sample")


def si_snr_loss(est, ref, eps: float = EPS) -> tuple[float, np.ndarray]:
    """Negative SI-SNR in dB and its analytic gradient with respect to ``est``.

    With zero-mean signals, target = (<est, ref> / |ref|^2) ref and
    error = est - target; loss = -10 log10((|target|^2 + eps) / (|error|^2 + eps)).
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_pair(est, ref)
    rc = ref - ref.mean()
    rr = float(rc @ rc)
    if rr == 0.0:
        raise ValidationError("reference signal is silent (zero energy after mean removal)")
    xc = est - est.mean()
    target = (xc @ rc) / rr * rc
    err = xc - target
    a = float(target @ target)
    b = float(err @ err)
    loss = -10 * math.log10((a + eps) / (b + eps))
    # e and target are zero-mean, so the centring projection leaves the gradient unchanged
    grad = (10 / math.log(10)) * (2 * err / (b + eps) - 2 * target / (a + eps))
    return loss, grad


def si_snr_torch(est: torch.Tensor, ref: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Batched SI-SNR in dB (positive = better), shape ``(batch,)``."""
    _check_pair(est, ref)
    rc = ref - ref.mean(-1, keepdim=True)
    xc = est - est.mean(-1, keepdim=True)
    rr = (rc * rc).sum(-1, keepdim=True)
    if bool((rr == 0).any()):
        raise ValidationError("reference signal is silent (zero energy after mean removal)")
    target = (xc * rc).sum(-1, keepdim=True) / rr * rc
    err = xc - target
    return 10 * torch.log10(((target**2).sum(-1) + eps) / ((err**2).sum(-1) + eps))


# ---------------------------------------------------------- freeze policies


def is_trainable(name: str, policy: str) -> bool:
    if policy == "full":
        return True
    if policy == "frozen":
        return False
    if policy == "fine_tune":
        return name.startswith("gates.") or (name.startswith("encoder.") and ".fsmn." in name)
    if policy == "adapter_tune":
        return name.startswith("gates.") or name.startswith("adapters.")
    raise ValidationError(f"unknown freeze policy {policy!r}; expected one of {POLICIES}")


def apply_policy(model: torch.nn.Module, policy: str) -> list[str]:
    """Set ``requires_grad`` per policy and return the trainable parameter names."""
    names = []
    for name, p in model.named_parameters():
        on = is_trainable(name, policy)
        p.requires_grad_(on)
        if on:
            names.append(name)
    return names


def count_trainable(model: torch.nn.Module, policy: str) -> dict[str, int]:
    total = trainable = 0
    for name, p in model.named_parameters():
        total += p.numel()
        if is_trainable(name, policy):
            trainable += p.numel()
    return {"trainable": trainable, "total": total}


class ParameterStore:
    """Named parameters of a model with frozen flags and gradient slots."""

    def __init__(self, model: torch.nn.Module, policy: str = "full"):
        self.model = model
        self.policy = policy
        self.trainable = set(apply_policy(model, policy))
        self.params = dict(model.named_parameters())

    @property
    def frozen(self) -> dict[str, bool]:
        return {n: n not in self.trainable for n in self.params}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def backward(self, loss: torch.Tensor | None):
        """Populate gradient slots from a recorded forward pass."""
        if loss is None or not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
            raise StateError("backward called without a recorded forward pass")
        self.zero_grad()
        loss.backward()

    def gradients(self) -> dict[str, torch.Tensor]:
        out = {}
        for n, p in self.params.items():
            if n in self.trainable and p.grad is not None:
                out[n] = p.grad.detach().clone()
            else:
                out[n] = torch.zeros_like(p)
        return out

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.params.items()}

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for n, p in self.params.items() if n in self.trainable]


# ------------------------------------------------------------- enhancement


def masked_enhance(model: MaskNet, stft: TorchStft, y: torch.Tensor, use_adapters: bool = True) -> torch.Tensor:
    """stft -> mask estimate -> complex masking -> istft on a batch ``(B, N)``.

    Each input is scaled to unit RMS before analysis and the output is scaled
    back, so the network always sees a normalised level.
    """
    rms = torch.sqrt((y**2).mean(-1, keepdim=True)).clamp_min(1e-8)
    yn = y / rms
    yr, yi = stft.forward(yn)
    mr, mi = model(yr, yi, use_adapters=use_adapters)
    sr_, si_ = apply_mask_planes(mr, mi, yr, yi)
    return stft.inverse(sr_, si_, y.shape[-1]) * rms


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 2
    max_steps: int | None = None
    grad_clip: float = 5.0
    seed: int = 0
    val_every: int = 1


@dataclass
class TrainResult:
    model: MaskNet
    history: list[dict] = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    rng_state: dict = field(default_factory=dict)


def stack_records(records, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    mix = torch.as_tensor(np.stack([r.mixture for r in records]), dtype=dtype)
    clean = torch.as_tensor(np.stack([r.clean for r in records]), dtype=dtype)
    return mix, clean


def batch_loss(model, stft, mix, clean, use_adapters=True) -> torch.Tensor:
    est = masked_enhance(model, stft, mix, use_adapters)
    return -si_snr_torch(est, clean).mean()


def evaluate_sisnr(model, stft, records, batch_size: int = 8) -> float:
    """Mean SI-SNR (dB) of the enhanced mixtures in ``records``."""
    dtype = next(model.parameters()).dtype
    vals = []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            mix, clean = stack_records(records[i : i + batch_size], dtype)
            vals.append(si_snr_torch(masked_enhance(model, stft, mix), clean))
    return float(torch.cat(vals).mean())


def train(
    model: MaskNet,
    dataset,
    policy: str,
    cfg: TrainConfig = TrainConfig(),
    stft_cfg: StftConfig = StftConfig(),
    val=None,
    log_path=None,
) -> TrainResult:
    """Train the non-frozen parameters of ``model`` on mixture records.

    History holds one row per epoch with the mean training loss and, when a
    validation set is given, the validation SI-SNR.
    """
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    store = ParameterStore(model, policy)
    params = store.trainable_parameters()
    dtype = next(model.parameters()).dtype
    stft = TorchStft(stft_cfg)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999)) if params else None
    mix_all, clean_all = stack_records(dataset, dtype)
    history: list[dict] = []
    step = 0
    n = len(dataset)
    epoch = 0
    logf = open(log_path, "w", encoding="utf-8") if log_path else None
    if logf:
        logf.write("step\ttrain_loss\tval_sisnr\n")
    try:
        while epoch < cfg.epochs and (cfg.max_steps is None or step < cfg.max_steps):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            losses = []
            for b in range(0, n, cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                idx = torch.as_tensor(order[b : b + cfg.batch_size])
                mix, clean = mix_all[idx], clean_all[idx]
                if opt is None:
                    with torch.no_grad():
                        loss = batch_loss(model, stft, mix, clean)
                else:
                    loss = batch_loss(model, stft, mix, clean)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, step {step} (policy {policy})")
                if opt is not None:
                    store.backward(loss)
                    if cfg.grad_clip:
                        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                    opt.step()
                losses.append(float(loss.detach()))
                step += 1
            row = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)) if losses else float("nan")}
            if val is not None and (epoch + 1) % cfg.val_every == 0:
                row["val_sisnr"] = evaluate_sisnr(model, stft, val)
            history.append(row)
            log.info("policy=%s epoch=%d step=%d loss=%.3f val=%s", policy, epoch, step, row["train_loss"], row.get("val_sisnr"))
            if logf:
                logf.write(f"{step}\t{row['train_loss']:.6f}\t{row.get('val_sisnr', float('nan')):.6f}\n")
            epoch += 1
    finally:
        if logf:
            logf.close()
    store.zero_grad()
    return TrainResult(model, history, opt, step, {"seed": cfg.seed, "epoch": epoch})
