"""Complex ideal ratio mask (cIRM): computing targets and applying masks."""
from __future__ import annotations

import logging

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

EPS = 1e-8
CLAMP = 10.0


def _same_grid(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ValidationError(f"{what}: grid mismatch {a.shape} vs {b.shape}")


def compute_cirm(S, Y, eps: float = EPS) -> np.ndarray:
    """Mask M with M * Y == S wherever |Y|^2 >= eps.

    The denominator |Y|^2 is floored at ``eps`` so silent cells stay finite.
    """
    S = np.asarray(S)
    Y = np.asarray(Y)
    _same_grid(S, Y, "compute_cirm")
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    yr, yi = Y.real, Y.imag
    sr, si = S.real, S.imag
    den = np.maximum(yr * yr + yi * yi, eps)
    mr = (yr * sr + yi * si) / den
    mi = (yr * si - yi * sr) / den
    return mr + 1j * mi


def clamp_mask(M, limit: float = CLAMP) -> tuple[np.ndarray, float]:
    """Scale entries with |M| > limit back onto the circle of radius ``limit``.

    Returns the clamped mask and the fraction of entries that were clamped.
    """
    M = np.asarray(M)
    mag = np.abs(M)
    over = mag > limit
    rate = float(over.mean()) if M.size else 0.0
    if rate:
        log.debug("clamped %.4f%% of cIRM entries at |M| <= %g", 100 * rate, limit)
    out = np.where(over, M * (limit / np.maximum(mag, 1e-300)), M)
    return out, rate


def apply_mask(M, Y) -> np.ndarray:
    """Element-wise complex product M * Y."""
    M = np.asarray(M)
    Y = np.asarray(Y)
    _same_grid(M, Y, "apply_mask")
    return M * Y


def apply_mask_planes(mr, mi, yr, yi):
    """Complex product on separate real/imag planes (numpy or torch)."""
    return mr * yr - mi * yi, mr * yi + mi * yr
