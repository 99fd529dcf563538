"""Audio ingestion, synthetic sources and SNR-controlled mixing.

Real recordings enter through :func:`read_wav` and a :class:`DatasetManifest`.
For self-contained runs, :func:`synth_drone_noise` produces rotor-like harmonic
noise, :func:`synth_speech` a speech-like stand-in (formant-filtered pulse
trains in syllable-sized bursts), and :func:`synth_generic_noise` the broadband
noise used for generic pretraining.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .dsp import SAMPLE_RATE
from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

ROLES = ("clean", "noise")
SPLITS = ("train", "val", "test")
NOISE_TYPES = ("constant", "dynamic", "-")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValidationError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


# --------------------------------------------------------------------- WAV I/O


def resample(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    """Polyphase resampling with a Kaiser-windowed sinc (beta=5) lowpass."""
    if sr_in == sr_out:
        return np.asarray(x, dtype=np.float64)
    g = gcd(sr_in, sr_out)
    return scipy.signal.resample_poly(x, sr_out // g, sr_in // g, window=("kaiser", 5.0))


def read_wav(path, target_rate: int | None = SAMPLE_RATE) -> Waveform:
    """Read a PCM16 or float32 WAV file, keeping only the first channel.

    PCM16 is scaled by 1/32768. With ``target_rate`` set, other rates are
    resampled; pass ``None`` to keep the file's rate.
    """
    try:
        sr, data = scipy.io.wavfile.read(os.fspath(path))
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, OSError) as exc:
        raise FormatError(f"{path}: not a readable RIFF/WAVE file ({exc})") from None
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}; need PCM16 or float32")
    if x.ndim == 2:
        x = x[:, 0]
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: non-finite samples")
    if target_rate is not None and sr != target_rate:
        x = resample(x, sr, target_rate)
        sr = target_rate
    return Waveform(x, sr)


def to_pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 32768.0), -32768, 32767).astype(np.int16)


def write_wav(path, w: Waveform | np.ndarray, sample_rate: int = SAMPLE_RATE):
    """Write mono PCM16, saturating samples outside [-1, 1)."""
    if isinstance(w, Waveform):
        x, sample_rate = w.samples, w.sample_rate
    else:
        x = np.asarray(w, dtype=np.float64)
    scipy.io.wavfile.write(os.fspath(path), sample_rate, to_pcm16(x))


# ----------------------------------------------------------- noise synthesis


@dataclass(frozen=True)
class NoiseSynthSpec:
    """Rotor-like harmonic noise.

    ``f0_hz`` holds control points spread evenly over the clip and linearly
    interpolated, so one value gives a constant rotor speed and two values a
    linear ramp. ``floor_db`` sets the broadband floor RMS relative to the
    harmonic part; ``-inf`` disables it.
    """

    f0_hz: tuple[float, ...] = (150.0,)
    n_harmonics: int = 20
    harmonic_gains: tuple[float, ...] | None = None
    floor_db: float = -20.0
    am_depth: float = 0.0
    am_rate_hz: float = 4.0
    seed: int = 0

    def gains(self) -> np.ndarray:
        if self.harmonic_gains is None:
            return 1.0 / np.sqrt(np.arange(1, self.n_harmonics + 1))
        g = np.asarray(self.harmonic_gains, dtype=np.float64)
        if g.size != self.n_harmonics:
            raise ValidationError(f"{g.size} harmonic gains for {self.n_harmonics} harmonics")
        return g

    def validate(self, sample_rate: int = SAMPLE_RATE):
        if not self.f0_hz:
            raise ValidationError("f0 trajectory is empty")
        if min(self.f0_hz) <= 0:
            raise ValidationError("fundamental frequencies must be positive")
        top = max(self.f0_hz) * self.n_harmonics
        if self.n_harmonics and top >= sample_rate / 2:
            raise ValidationError(
                f"harmonic {self.n_harmonics} reaches {top:.1f} Hz, above Nyquist ({sample_rate / 2:.0f} Hz)"
            )
        if not 0.0 <= self.am_depth < 1.0:
            raise ValidationError(f"AM depth must lie in [0, 1), got {self.am_depth}")


def synth_drone_noise(spec: NoiseSynthSpec, duration_s: float, sr: int = SAMPLE_RATE) -> Waveform:
    spec.validate(sr)
    n = int(round(duration_s * sr))
    rng = np.random.default_rng(spec.seed)
    t = np.arange(n) / sr
    knots = np.linspace(0.0, max(n - 1, 1) / sr, len(spec.f0_hz)) if len(spec.f0_hz) > 1 else None
    if knots is None:
        f0 = np.full(n, float(spec.f0_hz[0]))
    else:
        f0 = np.interp(t, knots, spec.f0_hz)
    # phase integrates the instantaneous frequency so ramps stay continuous
    base_phase = 2 * np.pi * np.concatenate([[0.0], np.cumsum(f0[:-1])]) / sr
    phases0 = rng.uniform(0, 2 * np.pi, spec.n_harmonics)
    harm = np.zeros(n)
    for h, (g, p0) in enumerate(zip(spec.gains(), phases0), start=1):
        harm += g * np.sin(h * base_phase + p0)
    if spec.am_depth > 0:
        harm *= 1.0 + spec.am_depth * np.sin(2 * np.pi * spec.am_rate_hz * t + rng.uniform(0, 2 * np.pi))
    out = harm
    if np.isfinite(spec.floor_db) and n:
        ref = np.sqrt(np.mean(harm**2)) if spec.n_harmonics else 1.0
        floor = _pink(rng, n)
        floor *= ref * 10 ** (spec.floor_db / 20) / max(np.sqrt(np.mean(floor**2)), 1e-12)
        out = harm + floor
    return Waveform(_peak_normalize(out, 0.5), sr)


def random_drone_spec(rng: np.random.Generator, noise_type: str = "constant", f0_range=(110.0, 180.0)) -> NoiseSynthSpec:
    """Draw one synthetic drone: its speed, harmonic signature and floor.

    ``dynamic`` drones ramp their fundamental by up to +-15% over the clip.
    """
    f0 = rng.uniform(*f0_range)
    if noise_type == "dynamic":
        f0s = (f0, f0 * rng.uniform(0.85, 1.15))
    elif noise_type == "constant":
        f0s = (f0,)
    else:
        raise ValidationError(f"noise type must be constant or dynamic, got {noise_type!r}")
    n_harm = int(min(40, 7000 // max(f0s)))
    gains = np.arange(1, n_harm + 1) ** -0.5 * 10 ** (rng.normal(0, 4, n_harm) / 20)
    return NoiseSynthSpec(
        f0_hz=tuple(float(f) for f in f0s),
        n_harmonics=n_harm,
        harmonic_gains=tuple(float(g) for g in gains),
        floor_db=float(rng.uniform(-25, -15)),
        am_depth=float(rng.uniform(0.0, 0.3)),
        am_rate_hz=float(rng.uniform(2, 8)),
        seed=int(rng.integers(2**31)),
    )


def _pink(rng: np.random.Generator, n: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n=n)


def _peak_normalize(x: np.ndarray, peak: float) -> np.ndarray:
    m = np.max(np.abs(x)) if x.size else 0.0
    return x * (peak / m) if m > 0 else x


# ---------------------------------------------------------- speech stand-in

# (F1, F2, F3) in Hz for a handful of vowels
_VOWELS = np.array(
    [
        (730, 1090, 2440),
        (270, 2290, 3010),
        (300, 870, 2240),
        (530, 1840, 2480),
        (660, 1720, 2410),
        (520, 920, 2560),
        (490, 1350, 1690),
        (400, 2000, 2550),
    ],
    dtype=np.float64,
)
_BANDWIDTHS = (90.0, 110.0, 170.0)


def _resonator(x, freq, bw, sr):
    r = math.exp(-math.pi * bw / sr)
    a = [1.0, -2 * r * math.cos(2 * math.pi * freq / sr), r * r]
    return scipy.signal.lfilter([1 - r], a, x)


def synth_speech(rng: np.random.Generator, duration_s: float, sr: int = SAMPLE_RATE, f0: float | None = None) -> Waveform:
    """Speech-like signal: voiced syllables with pitch glides, fricatives and pauses.

    Not intelligible speech, but it shares the properties the enhancer relies
    on: harmonic structure with moving pitch, formant envelopes, syllabic
    on/off modulation at 3-6 Hz and unvoiced high-frequency bursts.
    """
    n = int(round(duration_s * sr))
    out = np.zeros(n)
    speaker_f0 = rng.uniform(95, 230) if f0 is None else f0
    pos = int(rng.uniform(0.0, 0.25) * sr)
    while pos < n:
        if rng.random() < 0.3:
            m = int(rng.uniform(0.04, 0.12) * sr)
            noise = rng.standard_normal(m)
            sos = scipy.signal.butter(4, rng.uniform(2500, 4500), "highpass", fs=sr, output="sos")
            burst = scipy.signal.sosfilt(sos, noise) * np.hanning(m) * rng.uniform(0.05, 0.2)
            end = min(n, pos + m)
            out[pos:end] += burst[: end - pos]
            pos = end
        m = int(rng.uniform(0.12, 0.35) * sr)
        glide = np.linspace(1.0, rng.uniform(0.8, 1.2), m)
        f0_track = speaker_f0 * glide * (1 + 0.02 * np.sin(2 * np.pi * rng.uniform(4, 7) * np.arange(m) / sr))
        phase = np.cumsum(f0_track) / sr + rng.random()
        pulses = np.diff(np.floor(phase), prepend=np.floor(phase[0])).astype(np.float64)
        src = scipy.signal.lfilter([1.0], [1.0, -0.9], pulses)
        vowel = _VOWELS[rng.integers(len(_VOWELS))] * rng.uniform(0.9, 1.1, 3)
        voiced = sum(_resonator(src, f, bw, sr) * g for f, bw, g in zip(vowel, _BANDWIDTHS, (1.0, 0.6, 0.3)))
        env = np.sin(np.pi * np.linspace(0, 1, m)) ** 0.6 * rng.uniform(0.4, 1.0)
        end = min(n, pos + m)
        out[pos:end] += (voiced * env)[: end - pos]
        pos = end
        gap = rng.uniform(0.4, 0.8) if rng.random() < 0.15 else rng.uniform(0.02, 0.15)
        pos += int(gap * sr)
    return Waveform(_peak_normalize(out, 0.5), sr)


def synth_generic_noise(rng: np.random.Generator, duration_s: float, kind: str, sr: int = SAMPLE_RATE) -> Waveform:
    """Broadband noise for generic pretraining: ``pink``, ``babble`` or ``modulated``."""
    n = int(round(duration_s * sr))
    if kind == "pink":
        x = _pink(rng, n)
    elif kind == "babble":
        x = sum(synth_speech(rng, duration_s, sr).samples for _ in range(int(rng.integers(4, 8))))
    elif kind == "modulated":
        env = np.interp(np.arange(n), np.linspace(0, n, 12), rng.uniform(0.2, 1.0, 12))
        sos = scipy.signal.butter(2, [rng.uniform(100, 400), rng.uniform(2000, 6000)], "bandpass", fs=sr, output="sos")
        x = scipy.signal.sosfilt(sos, rng.standard_normal(n)) * env
    else:
        raise ValidationError(f"unknown generic noise kind {kind!r}")
    return Waveform(_peak_normalize(x, 0.5), sr)


# -------------------------------------------------------------------- mixing


@dataclass
class MixtureRecord:
    clean: np.ndarray
    noise: np.ndarray
    mixture: np.ndarray
    target_snr_db: float
    applied_noise_gain: float
    clean_id: str = ""
    noise_id: str = ""

    def realized_snr_db(self) -> float:
        scaled = self.applied_noise_gain * self.noise
        return 10 * math.log10(np.sum(self.clean**2) / np.sum(scaled**2))


def mix_at_snr(s, v, snr_db: float, clean_id: str = "", noise_id: str = "") -> MixtureRecord:
    """Scale ``v`` so that 10*log10(|s|^2 / |g v|^2) == snr_db and add it to ``s``."""
    s = np.asarray(s.samples if isinstance(s, Waveform) else s, dtype=np.float64)
    v = np.asarray(v.samples if isinstance(v, Waveform) else v, dtype=np.float64)
    if s.shape != v.shape:
        raise ValidationError(f"clean and noise lengths differ: {s.size} vs {v.size}")
    es, ev = float(np.sum(s**2)), float(np.sum(v**2))
    if es <= 0 or ev <= 0:
        raise ValidationError("cannot mix a zero-energy signal at a finite SNR")
    g = math.sqrt(es / (ev * 10 ** (snr_db / 10)))
    return MixtureRecord(s, v, s + g * v, float(snr_db), g, clean_id, noise_id)


# ------------------------------------------------------------------ manifest


@dataclass(frozen=True)
class ManifestEntry:
    role: str
    split: str
    noise_type: str
    id: str
    path: str


@dataclass
class DatasetManifest:
    """Line-based list of source clips: ``role split noise_type id path``.

    Fields are whitespace separated; the path is the remainder of the line and
    is resolved relative to the manifest's directory. ``#`` starts a comment.
    """

    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(None, 4)
            if len(parts) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            entries.append(ManifestEntry(*parts))
        m = cls(entries, path.parent)
        m.validate(decode=False)
        return m

    def dump(self, path):
        lines = ["# role\tsplit\tnoise_type\tid\tpath"]
        lines += ["\t".join((e.role, e.split, e.noise_type, e.id, e.path)) for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def validate(self, decode: bool = True):
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.role not in ROLES:
                raise FormatError(f"bad role {e.role!r} for {e.id}")
            if e.split not in SPLITS:
                raise FormatError(f"bad split {e.split!r} for {e.id}")
            if e.noise_type not in NOISE_TYPES:
                raise FormatError(f"bad noise type {e.noise_type!r} for {e.id}")
            key = f"{e.role}:{e.id}"
            if seen.setdefault(key, e.split) != e.split:
                raise ValidationError(f"source {e.id!r} appears in splits {seen[key]!r} and {e.split!r}")
            p = self.resolve(e)
            if not p.exists():
                raise FormatError(f"missing file {p} for {e.id}")
            if decode:
                read_wav(p)

    def select(self, role: str, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == role and e.split == split]

    def load_pool(self, role: str, split: str) -> list[tuple[str, np.ndarray]]:
        return [(e.id, read_wav(self.resolve(e)).samples) for e in self.select(role, split)]


# ------------------------------------------------------------- dataset build


@dataclass(frozen=True)
class DataConfig:
    snr_lo: float = -25.0
    snr_hi: float = -5.0
    crop_s: float = 2.0
    count: int = 600
    seed: int = 0


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Independent random stream for record ``index``; build order never matters."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _usable(pool, crop: int, what: str):
    keep = []
    for cid, x in pool:
        if x.size < crop:
            log.warning("skipping %s clip %s: %d samples < crop length %d", what, cid, x.size, crop)
        else:
            keep.append((cid, x))
    if not keep:
        raise ValidationError(f"no usable {what} clips of at least {crop} samples")
    return keep


def mix_pools(clean_pool, noise_pool, cfg: DataConfig, sr: int = SAMPLE_RATE) -> list[MixtureRecord]:
    """Random crops of random clean/noise clips mixed at uniformly drawn SNRs."""
    if cfg.count == 0:
        return []
    crop = int(round(cfg.crop_s * sr))
    clean_pool = _usable(clean_pool, crop, "clean")
    noise_pool = _usable(noise_pool, crop, "noise")
    records = []
    for i in range(cfg.count):
        rng = record_rng(cfg.seed, i)
        cid, cx = clean_pool[rng.integers(len(clean_pool))]
        nid, nx = noise_pool[rng.integers(len(noise_pool))]
        c0 = rng.integers(cx.size - crop + 1)
        n0 = rng.integers(nx.size - crop + 1)
        snr = rng.uniform(cfg.snr_lo, cfg.snr_hi)
        s = cx[c0 : c0 + crop]
        if not np.any(s):
            # an all-silent crop cannot carry a target SNR; shift to the clip start
            s = cx[:crop]
        records.append(mix_at_snr(s, nx[n0 : n0 + crop], snr, cid, nid))
    return records


def build_dataset(manifest: DatasetManifest, split: str, cfg: DataConfig) -> list[MixtureRecord]:
    if cfg.count == 0:
        return []
    return mix_pools(manifest.load_pool("clean", split), manifest.load_pool("noise", split), cfg)
