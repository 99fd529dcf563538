import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from droneadapt.errors import ValidationError
from droneadapt.model import (
    FSMN,
    AdapterCell,
    AttentionGate,
    BottleneckAdapter,
    ComplexConv2d,
    ComplexConvTranspose2d,
    MaskNet,
    ModelConfig,
    build_model,
    insert_adapters,
    model_forward,
    param_count,
)

from fd import fd_check

TINY = ModelConfig(n_bins=33, channels=(2, 3), adapters=(True, True))


def planes(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype), torch.randn(*shape, generator=g, dtype=dtype)


def randomize(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)
    return module


# ----------------------------------------------------------------- conv


def test_conv_zero_input_gives_bias():
    conv = randomize(ComplexConv2d(2, 3).double())
    z = torch.zeros(1, 2, 5, 8, dtype=torch.float64)
    out = conv((z, z))
    assert torch.allclose(out[0], conv.bias_r[None, :, None, None].expand_as(out[0]))
    assert torch.allclose(out[1], conv.bias_i[None, :, None, None].expand_as(out[1]))


def test_conv_real_input_real_weights():
    conv = randomize(ComplexConv2d(2, 3).double())
    with torch.no_grad():
        conv.weight_i.zero_()
    xr, _ = planes(1, 2, 5, 8)
    _, oi = conv((xr, torch.zeros_like(xr)))
    assert torch.allclose(oi, conv.bias_i[None, :, None, None].expand_as(oi))


def test_conv_scalar_complex_product():
    conv = ComplexConv2d(1, 1, kernel=(1, 1), stride=(1, 1), freq_pad=0).double()
    a, b, c, d = 0.7, -1.3, 2.0, 0.5
    with torch.no_grad():
        conv.weight_r.fill_(a)
        conv.weight_i.fill_(b)
    x = (torch.full((1, 1, 3, 4), c, dtype=torch.float64), torch.full((1, 1, 3, 4), d, dtype=torch.float64))
    o = conv(x)
    assert torch.allclose(o[0], torch.tensor(a * c - b * d, dtype=torch.float64))
    assert torch.allclose(o[1], torch.tensor(a * d + b * c, dtype=torch.float64))


def test_conv_complex_linearity():
    conv = randomize(ComplexConv2d(2, 3).double())
    with torch.no_grad():
        conv.bias_r.zero_()
        conv.bias_i.zero_()
    xr, xi = planes(2, 2, 6, 10)
    zr, zi = 0.3, -1.7
    o = conv((xr, xi))
    s = conv((zr * xr - zi * xi, zr * xi + zi * xr))
    assert torch.allclose(s[0], zr * o[0] - zi * o[1], atol=1e-6)
    assert torch.allclose(s[1], zr * o[1] + zi * o[0], atol=1e-6)


def test_conv_shape_errors():
    conv = ComplexConv2d(2, 3)
    with pytest.raises(ValidationError):
        conv(planes(1, 3, 4, 8, dtype=torch.float32))
    with pytest.raises(ValidationError):
        conv((torch.zeros(1, 2, 4, 8), torch.zeros(1, 2, 4, 9)))


@pytest.mark.parametrize("layer", ["conv", "tconv", "fsmn"])
def test_causality(layer):
    mod = {
        "conv": lambda: ComplexConv2d(2, 2),
        "tconv": lambda: ComplexConvTranspose2d(2, 2),
        "fsmn": lambda: FSMN(2, 8, 3),
    }[layer]()
    randomize(mod.double())
    xr, xi = planes(1, 2, 10, 8)
    base = mod((xr, xi))
    l0 = 4
    yr, yi = xr.clone(), xi.clone()
    yr[:, :, l0 + 1 :] = 0
    yi[:, :, l0 + 1 :] = 7.0
    cut = mod((yr, yi))
    assert torch.equal(base[0][:, :, : l0 + 1], cut[0][:, :, : l0 + 1])
    assert torch.equal(base[1][:, :, : l0 + 1], cut[1][:, :, : l0 + 1])


# ----------------------------------------------------------------- FSMN


def test_fsmn_no_taps_is_identity():
    f = FSMN(3, 8, taps=0).double()
    x = planes(1, 3, 5, 8)
    o = f(x)
    assert torch.equal(o[0], x[0]) and torch.equal(o[1], x[1])


def test_fsmn_impulse_response():
    f = randomize(FSMN(1, 4, taps=2).double())
    xr = torch.zeros(1, 1, 8, 4, dtype=torch.float64)
    xr[:, :, 0] = 1.0
    # bias-free projection so only the memory spreads the impulse
    with torch.no_grad():
        f.proj_bias_r.zero_()
        f.proj_bias_i.zero_()
    o = f((xr, torch.zeros_like(xr)))
    energy = (o[0] ** 2 + o[1] ** 2).sum(dim=(0, 1, 3))
    assert torch.all(energy[:3] > 0) and torch.all(energy[3:] == 0)


def test_fsmn_hand_recurrence():
    f = FSMN(1, 3, taps=1).double()
    with torch.no_grad():
        f.taps_r.fill_(0.5)
    o = f((torch.ones(1, 1, 4, 3, dtype=torch.float64), torch.zeros(1, 1, 4, 3, dtype=torch.float64)))
    assert torch.allclose(o[0][0, 0, :, 0], torch.tensor([1.0, 1.5, 1.5, 1.5], dtype=torch.float64))
    assert not torch.any(o[1])


# -------------------------------------------------------------- adapters


def test_fresh_cell_outputs_zero():
    cell = AdapterCell(16)
    assert not torch.any(cell(torch.randn(2, 3, 5, 16)))
    assert torch.any(cell.W1 != 0)


def _cell2(w2=((1.0,), (1.0,))):
    cell = AdapterCell(2).double()
    with torch.no_grad():
        cell.W1.copy_(torch.tensor([[1.0, 1.0]]))
        cell.W2.copy_(torch.tensor(w2))
    return cell


def test_cell_hand_values():
    cell = _cell2()
    assert cell(torch.tensor([3.0, -1.0], dtype=torch.float64)).tolist() == [2.0, 2.0]
    assert cell(torch.tensor([-3.0, 1.0], dtype=torch.float64)).tolist() == [0.0, 0.0]


def test_cell_errors():
    with pytest.raises(ValidationError):
        AdapterCell(7)
    with pytest.raises(ValidationError):
        AdapterCell(8)(torch.zeros(1, 1, 1, 6))


class _Linear(torch.nn.Module):
    def __init__(self, k):
        super().__init__()
        self.k = k

    def forward(self, u):
        return self.k * u


def _diag_adapter(kr, ki):
    ad = BottleneckAdapter(2)
    ad.cell_r, ad.cell_i = _Linear(kr), _Linear(ki)
    return ad


def test_adapter_complex_combination():
    one = torch.ones(1, 1, 1, 2)
    o = _diag_adapter(2.0, 0.0)((one, one))
    assert o[0].flatten().tolist() == [3.0, 3.0] and o[1].flatten().tolist() == [3.0, 3.0]
    o = _diag_adapter(0.0, 1.0)((one, one))
    assert o[0].flatten().tolist() == [0.0, 0.0] and o[1].flatten().tolist() == [2.0, 2.0]


@given(st.integers(1, 3), st.sampled_from([2, 8, 16]), st.integers(0, 2**16))
def test_fresh_adapter_identity_and_shape(c, f, seed):
    x = planes(2, c, 4, f, seed=seed)
    o = BottleneckAdapter(f).double()(x)
    assert o[0].shape == x[0].shape
    assert torch.equal(o[0], x[0]) and torch.equal(o[1], x[1])


# ------------------------------------------------------------------ gate


def test_gate_half_and_saturation():
    gate = AttentionGate(3).double()
    x = planes(1, 3, 4, 5)
    with torch.no_grad():
        gate.linear.weight.zero_()
        gate.linear.bias.zero_()
    o = gate(x)
    assert torch.allclose(o[0], x[0] / 2) and torch.allclose(o[1], x[1] / 2)
    with torch.no_grad():
        gate.linear.bias.fill_(20.0)
    o = gate(x)
    assert torch.allclose(o[0], x[0], atol=1e-8, rtol=0)


def test_gate_zero_input_and_shape():
    gate = randomize(AttentionGate(4).double())
    z = torch.zeros(2, 4, 3, 6, dtype=torch.float64)
    o = gate((z, z))
    assert not torch.any(o[0]) and o[0].shape == z.shape
    g = gate.gate(planes(2, 4, 3, 6))
    assert torch.all((g > 0) & (g < 1))
    with pytest.raises(ValidationError):
        gate(planes(1, 3, 3, 6))


# ---------------------------------------------------------- whole model


def test_default_shapes_and_counts():
    cfg = ModelConfig()
    assert cfg.freq_sizes() == [128, 64, 32, 16]
    base = MaskNet(cfg)
    n0 = param_count(base)
    insert_adapters(base, (False,) * 4)
    assert param_count(base) == n0
    full = build_model(cfg)
    assert param_count(full) - n0 == sum(BottleneckAdapter.param_count(f) for f in (128, 64, 32, 16)) == 44240
    # frozen reference numbers for the default network
    assert n0 == 656826 and param_count(full) == 701066


def test_one_adapter_at_64():
    m = MaskNet()
    n0 = param_count(m)
    insert_adapters(m, (False, True, False, False))
    assert param_count(m) - n0 == 8384


def test_insert_keeps_existing_params():
    m = MaskNet(TINY, seed=3)
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    insert_adapters(m, TINY.adapters)
    for n, p in before.items():
        assert torch.equal(dict(m.named_parameters())[n], p)
    with pytest.raises(ValidationError):
        insert_adapters(m, (True,))


def test_identity_at_init_default():
    m = MaskNet(seed=5)
    Y = np.random.default_rng(0).standard_normal((257, 20)) * (1 + 0.5j)
    before = model_forward(Y, m, "without_adapters")
    insert_adapters(m, (True,) * 4)
    assert np.max(np.abs(model_forward(Y, m, "with_adapters") - before)) <= 1e-7
    assert np.array_equal(model_forward(Y, m, "without_adapters"), before)


def test_zero_input_finite_and_deterministic():
    m = build_model(seed=2)
    out = model_forward(np.zeros((257, 6), complex), m)
    assert np.all(np.isfinite(out))
    Y = np.random.default_rng(1).standard_normal((257, 6)) + 0j
    assert np.array_equal(model_forward(Y, m), model_forward(Y, m))
    assert np.array_equal(model_forward(Y, build_model(seed=2)), model_forward(Y, m))


def test_model_errors():
    m = MaskNet(TINY)
    with pytest.raises(ValidationError):
        model_forward(np.zeros((257, 4), complex), m)
    with pytest.raises(ValidationError):
        model_forward(np.zeros((33, 4), complex), m, mode="sideways")
    with pytest.raises(ValidationError):
        ModelConfig(adapters=(True,))


def test_mask_shape_tiny():
    m = build_model(TINY)
    assert model_forward(np.ones((33, 7), complex), m).shape == (33, 7)


def test_config_json_round_trip():
    cfg = dataclasses.replace(ModelConfig(), channels=(4, 8, 8), adapters=(True, False, True), fsmn_taps=2)
    text = cfg.to_json()
    assert ModelConfig.from_json(text) == cfg and ModelConfig.from_json(text).to_json() == text
    with pytest.raises(ValidationError):
        ModelConfig.from_json('{"n_bins": 257, "colour": 1}')


# ------------------------------------------------------ gradient checks


def _layer_cases():
    return {
        "complex_conv": (ComplexConv2d(2, 3), (1, 2, 4, 8)),
        "transposed_conv": (ComplexConvTranspose2d(2, 2), (1, 2, 4, 5)),
        "fsmn": (FSMN(2, 6, 3), (1, 2, 5, 6)),
        "adapter": (BottleneckAdapter(8), (1, 2, 3, 8)),
        "attention_gate": (AttentionGate(3), (2, 3, 4, 5)),
    }


@pytest.mark.parametrize("name", list(_layer_cases()))
def test_layer_gradients_match_fd(name):
    layer, shape = _layer_cases()[name]
    randomize(layer.double(), seed=11)
    xr, xi = planes(*shape, seed=12)
    xr.requires_grad_(True)
    xi.requires_grad_(True)
    wr, wi = planes(*layer((xr, xi))[0].shape, seed=13)

    def loss():
        o = layer((xr, xi))
        return (o[0] * wr).sum() + (o[1] ** 2 * wi).sum()

    params = dict(layer.named_parameters())
    params.update(x_r=xr, x_i=xi)
    worst = fd_check(params, loss)
    assert max(worst.values()) <= 1e-4, worst
