"""Enhancement sessions and the two-stage transfer-learning protocol.

Stage 1 trains a base network on speech mixed with generic broadband noise.
Stage 2 copies it, inserts fresh adapters and trains only the adapters and
attention gates on drone-like noise. The protocol scores every condition on
a held-out drone test set and writes a comparison report.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .datagen import (
    DataConfig,
    DatasetManifest,
    MixtureRecord,
    Waveform,
    mix_pools,
    random_drone_spec,
    synth_drone_noise,
    synth_generic_noise,
    synth_speech,
)
from .dsp import SAMPLE_RATE, StftConfig, TorchStft
from .errors import LengthError, ValidationError
from .metrics import EvalReport, evaluate
from .model import MaskNet, ModelConfig, insert_adapters
from .training import TrainConfig, count_trainable, masked_enhance, train

log = logging.getLogger(__name__)

CONDITIONS = ("noisy", "wo_tuning", "fine_tuning", "adapter_tuning")
SCRATCH = "wo_pretrained"


class UnitMask(torch.nn.Module):
    """Diagnostic mask estimator that always returns M = 1 + 0i."""

    def forward(self, yr, yi, use_adapters: bool = True):
        return torch.ones_like(yr), torch.zeros_like(yi)


@dataclass
class EnhancementSession:
    model: torch.nn.Module
    stft: StftConfig = field(default_factory=StftConfig)
    mode: str = "with_adapters"

    def __post_init__(self):
        if self.mode not in ("with_adapters", "without_adapters"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        cfg = getattr(self.model, "cfg", None)
        if cfg is not None and cfg.n_bins != self.stft.bins:
            raise ValidationError(f"STFT yields {self.stft.bins} bins but the model expects {cfg.n_bins}")


def enhance(y, session: EnhancementSession) -> np.ndarray:
    """Enhance one 16 kHz mono signal; the output has the input's length."""
    if isinstance(y, Waveform):
        if y.sample_rate != SAMPLE_RATE:
            raise ValidationError(f"input sample rate is {y.sample_rate} Hz; enhancement needs {SAMPLE_RATE} Hz")
        y = y.samples
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValidationError(f"expected mono 1-D input, got shape {y.shape}")
    if y.size < session.stft.fft_size:
        raise LengthError(f"input of {y.size} samples is shorter than one STFT frame")
    if not np.all(np.isfinite(y)):
        raise ValidationError("input contains non-finite samples")
    params = list(session.model.parameters())
    dtype = params[0].dtype if params else torch.float64
    with torch.no_grad():
        out = masked_enhance(
            session.model,
            TorchStft(session.stft),
            torch.as_tensor(y, dtype=dtype)[None],
            use_adapters=session.mode == "with_adapters",
        )
    return out[0].double().numpy()


# ------------------------------------------------------------- benchmark data


@dataclass(frozen=True)
class BenchmarkConfig:
    """Sizes of the synthetic transfer benchmark (durations in minutes)."""

    pretrain_minutes: float = 20.0
    adapt_minutes: float = 10.0
    crop_s: float = 2.0
    val_count: int = 10
    test_count: int = 40
    test_crop_s: float = 4.0
    clip_s: float = 10.0
    clean_train: int = 30
    clean_test: int = 10
    generic_noises: int = 40
    drones_train: int = 40
    drones_val: int = 2
    drones_test: int = 4
    snr_lo: float = -25.0
    snr_hi: float = -5.0


@dataclass
class Benchmark:
    pretrain: list[MixtureRecord]
    adapt: list[MixtureRecord]
    val: list[MixtureRecord]
    test: list[MixtureRecord]


def _speech_pool(seed, tag, count, clip_s, stream):
    return [
        (f"spk-{tag}{i:02d}", synth_speech(np.random.default_rng([seed, stream, i]), clip_s).samples)
        for i in range(count)
    ]


def _drone_pool(seed, tag, count, clip_s, stream):
    pool = []
    for i in range(count):
        rng = np.random.default_rng([seed, stream, i])
        kind = "dynamic" if i % 2 else "constant"
        spec = random_drone_spec(rng, kind)
        pool.append((f"drone-{tag}{i:02d}-{kind}", synth_drone_noise(spec, clip_s).samples))
    return pool


def synthetic_benchmark(cfg: BenchmarkConfig, seed: int, drone_manifest: DatasetManifest | None = None) -> Benchmark:
    """Generic-noise pretraining data plus drone adapt/val/test splits.

    Drone clips from ``drone_manifest`` (noise entries, by split) are added to
    the synthetic drone pools.
    """
    clean_tr = _speech_pool(seed, "tr", cfg.clean_train, cfg.clip_s, 11)
    clean_te = _speech_pool(seed, "te", cfg.clean_test, cfg.clip_s, 12)
    kinds = ("pink", "babble", "modulated")
    generic = [
        (f"generic-{kinds[i % 3]}{i:02d}", synth_generic_noise(np.random.default_rng([seed, 21, i]), cfg.clip_s, kinds[i % 3]).samples)
        for i in range(cfg.generic_noises)
    ]
    drones = {
        "train": _drone_pool(seed, "tr", cfg.drones_train, cfg.clip_s, 31),
        "val": _drone_pool(seed, "va", cfg.drones_val, cfg.clip_s, 32),
        "test": _drone_pool(seed, "te", cfg.drones_test, cfg.clip_s, 33),
    }
    if drone_manifest is not None:
        for split in drones:
            drones[split] += drone_manifest.load_pool("noise", split)

    def data(minutes=None, count=None, crop=cfg.crop_s, stream=0):
        n = count if count is not None else int(round(minutes * 60 / crop))
        return DataConfig(cfg.snr_lo, cfg.snr_hi, crop, n, seed * 1000 + stream)

    return Benchmark(
        pretrain=mix_pools(clean_tr, generic, data(cfg.pretrain_minutes, stream=1)),
        adapt=mix_pools(clean_tr, drones["train"], data(cfg.adapt_minutes, stream=2)),
        val=mix_pools(clean_te, drones["val"], data(count=cfg.val_count, stream=3)),
        test=mix_pools(clean_te, drones["test"], data(count=cfg.test_count, crop=cfg.test_crop_s, stream=4)),
    )


# ------------------------------------------------------------------ protocol


@dataclass(frozen=True)
class ProtocolConfig:
    seed: int = 1
    model: ModelConfig = ModelConfig()
    stft: StftConfig = StftConfig()
    pretrain: TrainConfig = TrainConfig(lr=1e-3, epochs=2)
    adapt: TrainConfig = TrainConfig(lr=3e-3, epochs=3)
    include_scratch: bool = False


@dataclass
class ProtocolResult:
    base: Checkpoint
    adapted: Checkpoint
    reports: dict[str, EvalReport]
    trainable: dict[str, dict]
    histories: dict[str, list]

    def summary_tsv(self) -> str:
        lines = ["condition\ttrainable_params\ttotal_params\tn\tmean_si_snr_db\tmean_estoi"]
        for name, rep in self.reports.items():
            t = self.trainable.get(name)
            tr = "-" if t is None else str(t["trainable"])
            tot = "-" if t is None else str(t["total"])
            lines.append(f"{name}\t{tr}\t{tot}\t{rep.n}\t{rep.mean_si_snr:.4f}\t{rep.mean_estoi:.4f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "conditions": [r.to_dict() for r in self.reports.values()],
            "trainable": self.trainable,
            "history": {k: [{kk: (round(v, 6) if isinstance(v, float) else v) for kk, v in row.items()} for row in h] for k, h in self.histories.items()},
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(self.summary_tsv(), encoding="utf-8")
        (out / "report.json").write_text(self.to_json(), encoding="utf-8")
        for name, rep in self.reports.items():
            (out / f"utterances_{name}.tsv").write_text(rep.to_tsv(), encoding="utf-8")
        (out / "base.ckpt").write_bytes(self.base.to_bytes())
        (out / "adapted.ckpt").write_bytes(self.adapted.to_bytes())


def _noise_ids(records) -> set[str]:
    return {r.noise_id for r in records}


def _session_fn(model, stft, mode="with_adapters"):
    session = EnhancementSession(model, stft, mode)
    return lambda y: enhance(y, session)


def transfer_protocol(bench: Benchmark, cfg: ProtocolConfig = ProtocolConfig(), workers: int = 1) -> ProtocolResult:
    """Pretrain (full), then adapt (adapter_tune) and fine-tune copies; score all conditions.

    ``workers`` threads score test utterances; it never changes the results.
    """
    overlap = _noise_ids(bench.pretrain) & _noise_ids(bench.adapt)
    if overlap:
        raise ValidationError(f"noise ids shared between pretraining and adaptation: {sorted(overlap)[:5]}")
    leak = (_noise_ids(bench.pretrain) | _noise_ids(bench.adapt)) & _noise_ids(bench.test)
    if leak:
        raise ValidationError(f"test noise ids also used for training: {sorted(leak)[:5]}")
    torch.set_num_threads(1)
    base_cfg = dataclasses.replace(cfg.model, adapters=(False,) * len(cfg.model.channels))
    stage = lambda tc, k: dataclasses.replace(tc, seed=cfg.seed * 100 + k)

    base = MaskNet(base_cfg, seed=cfg.seed)
    pre = train(base, bench.pretrain, "full", stage(cfg.pretrain, 1), cfg.stft, val=bench.val)
    base_ckpt = Checkpoint.from_model(base, pre.optimizer, pre.step, pre.rng_state)

    adapted = insert_adapters(copy.deepcopy(base), cfg.model.adapters, seed=cfg.seed)
    ada = train(adapted, bench.adapt, "adapter_tune", stage(cfg.adapt, 2), cfg.stft, val=bench.val)
    adapted_ckpt = Checkpoint.from_model(adapted, ada.optimizer, ada.step, ada.rng_state)

    tuned = copy.deepcopy(base)
    fin = train(tuned, bench.adapt, "fine_tune", stage(cfg.adapt, 3), cfg.stft, val=bench.val)

    reports = {
        "noisy": evaluate(None, bench.test, "noisy", workers),
        "wo_tuning": evaluate(_session_fn(base, cfg.stft), bench.test, "wo_tuning", workers),
        "fine_tuning": evaluate(_session_fn(tuned, cfg.stft), bench.test, "fine_tuning", workers),
        "adapter_tuning": evaluate(_session_fn(adapted, cfg.stft), bench.test, "adapter_tuning", workers),
    }
    trainable = {
        "fine_tuning": count_trainable(tuned, "fine_tune"),
        "adapter_tuning": count_trainable(adapted, "adapter_tune"),
    }
    histories = {"pretrain": pre.history, "adapter_tuning": ada.history, "fine_tuning": fin.history}
    if cfg.include_scratch:
        scratch = MaskNet(base_cfg, seed=cfg.seed + 1)
        scr = train(scratch, bench.adapt, "full", stage(cfg.adapt, 4), cfg.stft, val=bench.val)
        reports[SCRATCH] = evaluate(_session_fn(scratch, cfg.stft), bench.test, SCRATCH, workers)
        trainable[SCRATCH] = count_trainable(scratch, "full")
        histories[SCRATCH] = scr.history
    return ProtocolResult(base_ckpt, adapted_ckpt, reports, trainable, histories)
