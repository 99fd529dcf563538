"""Run configuration: nested dataclasses loaded from JSON with strict key checking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .datagen import DataConfig
from .dsp import StftConfig
from .errors import ValidationError
from .model import ModelConfig
from .pipeline import BenchmarkConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    stft: StftConfig = StftConfig()
    model: ModelConfig = ModelConfig()
    pretrain: TrainConfig = TrainConfig(lr=1e-3, epochs=2)
    adapt: TrainConfig = TrainConfig(lr=3e-3, epochs=3)
    data: DataConfig = DataConfig()
    benchmark: BenchmarkConfig = BenchmarkConfig()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ValidationError(f"{where}: expected an object, got {type(values).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in values.items():
        default = getattr(cls(), name) if name in fields else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path`` (if any), then ``overrides``.

    Override keys use dotted paths such as ``"adapt.lr"``.
    """
    values: dict = {}
    if path is not None:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = values
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return _build(RunConfig, values, "config")
