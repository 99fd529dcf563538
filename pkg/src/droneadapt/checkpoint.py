"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"DRADCKPT"
    version    uint32
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON (sorted keys)
    payload    float32 LE arrays, addressed by the header's tensor table
    crc32      uint32 over every preceding byte

The header carries the serialized ModelConfig, the tensor table
(name, offset in bytes, shape), the training step, optimizer hyperparameters
and per-parameter step counts, and the training RNG state. Tensor names are
``param/<name>`` for model parameters and ``adam.exp_avg/<name>`` /
``adam.exp_avg_sq/<name>`` for optimizer moments.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigMismatchError, FormatError
from .model import MaskNet, ModelConfig, build_model

MAGIC = b"DRADCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: dict = field(default_factory=dict)
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: MaskNet, optimizer: torch.optim.Optimizer | None = None, step: int = 0, rng=None):
        params = {n: p.detach().cpu().numpy().astype("<f4") for n, p in model.named_parameters()}
        opt_meta: dict = {}
        moments: dict[str, np.ndarray] = {}
        if optimizer is not None:
            group = optimizer.param_groups[0]
            opt_meta = {"lr": group["lr"], "betas": list(group["betas"]), "eps": group["eps"], "steps": {}}
            by_id = {id(p): n for n, p in model.named_parameters()}
            for p, st in optimizer.state.items():
                name = by_id[id(p)]
                opt_meta["steps"][name] = int(st["step"])
                moments[f"adam.exp_avg/{name}"] = st["exp_avg"].detach().cpu().numpy().astype("<f4")
                moments[f"adam.exp_avg_sq/{name}"] = st["exp_avg_sq"].detach().cpu().numpy().astype("<f4")
        return cls(model.config(), params, opt_meta, moments, int(step), dict(rng or {}))

    def to_bytes(self) -> bytes:
        table = []
        chunks = []
        offset = 0
        tensors = [(f"param/{n}", a) for n, a in self.params.items()] + sorted(self.moments.items())
        for name, arr in tensors:
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            table.append({"name": name, "offset": offset, "shape": list(arr.shape)})
            chunks.append(data)
            offset += len(data)
        header = {
            "config": json.loads(self.config.to_json()),
            "tensors": table,
            "payload_bytes": offset,
            "step": self.step,
            "optimizer": self.optimizer,
            "rng": self.rng,
        }
        hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = MAGIC + struct.pack("<II", VERSION, len(hdr)) + hdr + b"".join(chunks)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
            raise FormatError("not a checkpoint file (bad magic)")
        version, hdr_len = struct.unpack_from("<II", blob, len(MAGIC))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise FormatError("checkpoint is truncated or corrupt (checksum mismatch)")
        start = len(MAGIC) + 8
        try:
            header = json.loads(body[start : start + hdr_len].decode("utf-8"))
            config = ModelConfig(**header["config"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"checkpoint header is unreadable: {exc}") from None
        payload = body[start + hdr_len :]
        if len(payload) != header["payload_bytes"]:
            raise FormatError("checkpoint payload size does not match its header")
        params, moments = {}, {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=t["offset"]).reshape(t["shape"]).copy()
            kind, name = t["name"].split("/", 1)
            if kind == "param":
                params[name] = arr
            else:
                moments[t["name"]] = arr
        return cls(config, params, header["optimizer"], moments, header["step"], header["rng"])

    def build(self) -> MaskNet:
        """Model with this checkpoint's configuration and parameters."""
        model = build_model(self.config)
        expected = dict(model.named_parameters())
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise FormatError(f"checkpoint parameters do not match its config (missing {missing[:3]}, extra {extra[:3]})")
        with torch.no_grad():
            for n, p in expected.items():
                if tuple(p.shape) != self.params[n].shape:
                    raise FormatError(f"shape mismatch for {n}: {self.params[n].shape} vs {tuple(p.shape)}")
                p.copy_(torch.from_numpy(self.params[n]))
        return model

    def restore_optimizer(self, model: MaskNet, optimizer: torch.optim.Optimizer):
        named = dict(model.named_parameters())
        for name, steps in self.optimizer.get("steps", {}).items():
            p = named[name]
            optimizer.state[p] = {
                "step": torch.tensor(float(steps)),
                "exp_avg": torch.from_numpy(self.moments[f"adam.exp_avg/{name}"]).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(self.moments[f"adam.exp_avg_sq/{name}"]).to(p.dtype),
            }


def save_checkpoint(model: MaskNet | Checkpoint, path, optimizer=None, step: int = 0, rng=None) -> Checkpoint:
    ckpt = model if isinstance(model, Checkpoint) else Checkpoint.from_model(model, optimizer, step, rng)
    Path(path).write_bytes(ckpt.to_bytes())
    return ckpt


def read_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def load_checkpoint(path, config: ModelConfig | None = None) -> MaskNet:
    """Rebuild the model stored at ``path``.

    With ``config`` given, a checkpoint written for any other configuration
    raises :class:`ConfigMismatchError`.
    """
    ckpt = read_checkpoint(path)
    if config is not None and ckpt.config != config:
        raise ConfigMismatchError(f"checkpoint config {ckpt.config} does not match requested {config}")
    return ckpt.build()
