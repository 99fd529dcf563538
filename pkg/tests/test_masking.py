import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from droneadapt.errors import ValidationError
from droneadapt.masking import EPS, apply_mask, apply_mask_planes, clamp_mask, compute_cirm

cplx = st.complex_numbers(max_magnitude=100, allow_nan=False, allow_infinity=False)
grid = arrays(np.complex128, (6, 5), elements=cplx)


def test_noise_free_identity():
    S = np.random.default_rng(0).standard_normal((257, 10)) * (1 + 1j) + 3
    M = compute_cirm(S, S)
    np.testing.assert_allclose(M, 1 + 0j, atol=1e-12)


def test_silent_target():
    Y = np.random.default_rng(1).standard_normal((4, 4)) + 1j
    assert not np.any(compute_cirm(np.zeros_like(Y), Y))


def test_hand_value():
    M = compute_cirm(np.array([1 + 0j]), np.array([1 + 1j]))
    assert M[0] == pytest.approx(0.5 - 0.5j)
    assert apply_mask(M, np.array([1 + 1j]))[0] == pytest.approx(1 + 0j)


def test_floor_keeps_finite():
    M = compute_cirm(np.ones(3, complex), np.zeros(3, complex))
    assert np.all(np.isfinite(M))
    assert M == pytest.approx(np.zeros(3))


def test_identity_and_zero_masks():
    Y = np.random.default_rng(2).standard_normal((5, 7)) + 1j
    assert np.array_equal(apply_mask(np.ones_like(Y), Y), Y)
    assert not np.any(apply_mask(np.zeros_like(Y), Y))


def test_grid_mismatch():
    with pytest.raises(ValidationError):
        compute_cirm(np.zeros((3, 4)), np.zeros((4, 3)))
    with pytest.raises(ValidationError):
        apply_mask(np.zeros((3, 4)), np.zeros((3, 5)))
    with pytest.raises(ValidationError):
        compute_cirm(np.zeros(2), np.zeros(2), eps=0)


@given(grid, grid)
def test_oracle_recovery(S, Y):
    ok = np.abs(Y) ** 2 >= 10 * EPS
    rec = apply_mask(compute_cirm(S, Y), Y)
    err = np.abs(rec - S)[ok]
    assert np.all(err <= 1e-6 * np.maximum(np.abs(S[ok]), 1e-300) + 1e-12)


@given(grid, grid)
def test_conjugation(S, Y):
    np.testing.assert_allclose(compute_cirm(S.conj(), Y.conj()), compute_cirm(S, Y).conj(), rtol=1e-12, atol=1e-12)


@given(grid, grid, st.floats(0.01, 100) | st.floats(-100, -0.01))
def test_gain_invariance(S, Y, a):
    assume(np.all(np.abs(a * Y) ** 2 >= 10 * EPS) and np.all(np.abs(Y) ** 2 >= 10 * EPS))
    np.testing.assert_allclose(compute_cirm(a * S, a * Y), compute_cirm(S, Y), rtol=1e-9, atol=1e-12)


def test_clamp():
    M = np.array([3 + 4j, 30 + 40j, 0])
    out, rate = clamp_mask(M, 10)
    assert rate == pytest.approx(1 / 3)
    assert out[0] == M[0] and out[2] == 0
    assert out[1] == pytest.approx(6 + 8j)


def test_planes_match_complex():
    r = np.random.default_rng(4)
    M = r.standard_normal(9) + 1j * r.standard_normal(9)
    Y = r.standard_normal(9) + 1j * r.standard_normal(9)
    a, b = apply_mask_planes(M.real, M.imag, Y.real, Y.imag)
    np.testing.assert_allclose(a + 1j * b, M * Y)
