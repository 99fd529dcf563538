"""Evaluation metrics (SI-SNR, ESTOI) and per-condition reports."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.signal

from .errors import LengthError, ValidationError
from .training import EPS, si_snr_loss

log = logging.getLogger(__name__)


def si_snr(est, ref, eps: float = EPS) -> float:
    """Scale-invariant SNR in dB; equals ``-si_snr_loss(est, ref)[0]``."""
    return -si_snr_loss(est, ref, eps)[0]


# --------------------------------------------------------------------- ESTOI

ESTOI_FS = 10000
FRAME = 256
NFFT = 512
N_BANDS = 15
MIN_FREQ = 150.0
SEGMENT = 30
DYN_RANGE = 40.0


@lru_cache(maxsize=None)
def third_octave_matrix(fs: int = ESTOI_FS, nfft: int = NFFT, n_bands: int = N_BANDS, min_freq: float = MIN_FREQ):
    """Binary (bands x bins) matrix grouping FFT bins into one-third-octave bands."""
    freqs = np.arange(nfft // 2 + 1) * fs / nfft
    k = np.arange(n_bands, dtype=np.float64)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, freqs.size))
    for i in range(n_bands):
        a = int(np.argmin(np.abs(freqs - lo[i])))
        b = int(np.argmin(np.abs(freqs - hi[i])))
        obm[i, a:b] = 1.0
    return obm


def _hann(n: int) -> np.ndarray:
    # symmetric Hann without the zero end points
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    if x.size < size:
        return np.zeros((0, size))
    return np.lib.stride_tricks.sliding_window_view(x, size)[::hop]


def remove_silent_frames(x, y, dyn_range=DYN_RANGE, size=FRAME, hop=FRAME // 2):
    """Drop frames whose clean-signal energy is more than ``dyn_range`` dB below the loudest one.

    Both signals are re-synthesised from the kept frames by overlap-add.
    """
    w = _hann(size)
    xf = _frames(x, size, hop) * w
    yf = _frames(y, size, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + 1e-12)
    keep = energy > energy.max() - dyn_range
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n, size = frames.shape
    out = np.zeros((n - 1) * hop + size if n else 0)
    for i in range(n):
        out[i * hop : i * hop + size] += frames[i]
    return out


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, FRAME, FRAME // 2) * _hann(FRAME), n=NFFT, axis=1)
    return np.sqrt(third_octave_matrix() @ (np.abs(spec) ** 2).T)


def _normalize(seg: np.ndarray, axis: int) -> np.ndarray:
    seg = seg - seg.mean(axis=axis, keepdims=True)
    norm = np.linalg.norm(seg, axis=axis, keepdims=True)
    return seg / np.where(norm > 0, norm, 1.0)


def estoi(clean, est, fs: int = 16000) -> float:
    """Extended short-time objective intelligibility of ``est`` against ``clean``.

    Both signals are resampled to 10 kHz, silent frames are removed, and
    one-third-octave envelopes are compared over 384 ms segments after
    normalising every band (row) and then every frame (column) to zero mean
    and unit norm.
    """
    clean = np.asarray(clean, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if clean.shape != est.shape:
        raise ValidationError(f"length mismatch: {clean.size} vs {est.size}")
    if fs != ESTOI_FS:
        g = math.gcd(fs, ESTOI_FS)
        clean = scipy.signal.resample_poly(clean, ESTOI_FS // g, fs // g)
        est = scipy.signal.resample_poly(est, ESTOI_FS // g, fs // g)
    if not np.any(clean):
        raise ValidationError("clean signal is silent")
    clean, est = remove_silent_frames(clean, est)
    X = _band_envelopes(clean)
    Y = _band_envelopes(est)
    n_frames = X.shape[1]
    if n_frames < SEGMENT:
        raise LengthError(f"only {n_frames} active frames; ESTOI needs at least {SEGMENT}")
    # every run of SEGMENT consecutive frames, shape (segments, bands, SEGMENT)
    xs = np.lib.stride_tricks.sliding_window_view(X, SEGMENT, axis=1).transpose(1, 0, 2)
    ys = np.lib.stride_tricks.sliding_window_view(Y, SEGMENT, axis=1).transpose(1, 0, 2)
    xn = _normalize(_normalize(xs, axis=2), axis=1)
    yn = _normalize(_normalize(ys, axis=2), axis=1)
    return float(np.sum(xn * yn) / (SEGMENT * xs.shape[0]))


# ------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    condition: str
    rows: list[dict] = field(default_factory=list)
    excluded: int = 0

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def mean_si_snr(self) -> float:
        return float(np.mean([r["si_snr_db"] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_estoi(self) -> float:
        return float(np.mean([r["estoi"] for r in self.rows])) if self.rows else float("nan")

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "n": self.n,
            "excluded": self.excluded,
            "mean_si_snr": round(self.mean_si_snr, 6),
            "mean_estoi": round(self.mean_estoi, 6),
            "rows": [
                {k: (round(v, 6) if isinstance(v, float) else v) for k, v in r.items()} for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["condition"], list(d["rows"]), d.get("excluded", 0))

    def to_tsv(self) -> str:
        lines = ["id\tsi_snr_db\testoi\tpesq"]
        for r in self.rows:
            pesq = r.get("pesq")
            lines.append(f"{r['id']}\t{r['si_snr_db']:.6f}\t{r['estoi']:.6f}\t{'' if pesq is None else f'{pesq:.4f}'}")
        return "\n".join(lines) + "\n"


def _score(enhancer, i, rec):
    est = rec.mixture if enhancer is None else enhancer(rec.mixture)
    try:
        return {
            "id": f"{i:04d}:{rec.clean_id}+{rec.noise_id}",
            "si_snr_db": si_snr(est, rec.clean),
            "estoi": estoi(rec.clean, est),
        }
    except (ValidationError, LengthError) as exc:
        return exc


def evaluate(enhancer, testset, condition: str = "noisy", workers: int = 1) -> EvalReport:
    """Score ``enhancer(mixture) -> estimate`` on every record; ``None`` scores the mixture itself.

    With ``workers > 1`` utterances are scored on a thread pool. Rows keep the
    test-set order, so the report does not depend on the worker count.
    """
    if len(testset) == 0:
        raise ValidationError("test set is empty")
    jobs = list(enumerate(testset))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda job: _score(enhancer, *job), jobs))
    else:
        results = [_score(enhancer, *job) for job in jobs]
    report = EvalReport(condition)
    for i, row in enumerate(results):
        if isinstance(row, Exception):
            log.warning("excluding utterance %d from %s: %s", i, condition, row)
            report.excluded += 1
        else:
            report.rows.append(row)
    if report.excluded:
        log.warning("%s: %d of %d utterances excluded", condition, report.excluded, len(testset))
    return report
