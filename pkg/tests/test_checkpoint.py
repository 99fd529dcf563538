import struct

import numpy as np
import pytest
import torch

from droneadapt.checkpoint import MAGIC, Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from droneadapt.datagen import mix_at_snr
from droneadapt.dsp import StftConfig
from droneadapt.errors import ConfigMismatchError, FormatError
from droneadapt.model import ModelConfig, build_model, model_forward
from droneadapt.training import TrainConfig, train

TINY = ModelConfig(n_bins=33, channels=(2, 3), adapters=(True, False))


def _trained():
    r = np.random.default_rng(0)
    recs = [mix_at_snr(r.standard_normal(800), r.standard_normal(800), -5.0) for _ in range(4)]
    m = build_model(TINY, seed=1)
    res = train(m, recs, "adapter_tune", TrainConfig(epochs=2, batch_size=2), StftConfig(64, 16))
    return m, res


def test_round_trip_exact(tmp_path):
    m, res = _trained()
    save_checkpoint(m, tmp_path / "a.ckpt", res.optimizer, res.step, res.rng_state)
    m2 = load_checkpoint(tmp_path / "a.ckpt", TINY)
    for (n, p), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n == n2 and torch.equal(p, p2)
    Y = np.random.default_rng(2).standard_normal((33, 9)) * (1 - 2j)
    assert np.array_equal(model_forward(Y, m), model_forward(Y, m2))
    # save -> load -> save is byte-identical
    ck = read_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(ck, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert ck.step == res.step and ck.rng == res.rng_state
    assert ck.optimizer["lr"] == pytest.approx(1e-3) and ck.optimizer["steps"]


def test_rebuilt_model_saves_identically(tmp_path):
    m, _ = _trained()
    save_checkpoint(m, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_optimizer_restore(tmp_path):
    m, res = _trained()
    ck = Checkpoint.from_model(m, res.optimizer, res.step)
    back = Checkpoint.from_bytes(ck.to_bytes())
    m2 = back.build()
    opt = torch.optim.Adam([p for n, p in m2.named_parameters() if n in back.optimizer["steps"]], lr=back.optimizer["lr"])
    back.restore_optimizer(m2, opt)
    for p, st in opt.state.items():
        assert st["exp_avg"].shape == p.shape


def test_layout(tmp_path):
    m, _ = _trained()
    blob = save_checkpoint(m, tmp_path / "a.ckpt").to_bytes()
    assert blob[:8] == MAGIC
    version, hdr_len = struct.unpack_from("<II", blob, 8)
    assert version == 1 and hdr_len > 0
    assert blob[16:17] == b"{"


@pytest.mark.parametrize("cut", [1, 10, 100, 1000])
def test_truncated(tmp_path, cut):
    m, _ = _trained()
    save_checkpoint(m, tmp_path / "a.ckpt")
    blob = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-cut])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.ckpt")


def test_corrupt_and_version(tmp_path):
    m, _ = _trained()
    blob = bytearray(save_checkpoint(m, tmp_path / "a.ckpt").to_bytes())
    flipped = bytearray(blob)
    flipped[-20] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        Checkpoint.from_bytes(bytes(flipped))
    bumped = bytearray(blob)
    bumped[8:12] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="version"):
        Checkpoint.from_bytes(bytes(bumped))
    with pytest.raises(FormatError, match="magic"):
        Checkpoint.from_bytes(b"NOTACKPT" + bytes(blob[8:]))


def test_config_mismatch(tmp_path):
    m, _ = _trained()
    save_checkpoint(m, tmp_path / "a.ckpt")
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(tmp_path / "a.ckpt", ModelConfig())
