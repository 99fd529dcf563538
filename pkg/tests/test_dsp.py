import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from droneadapt.dsp import StftConfig, TorchStft, istft, make_window, stft
from droneadapt.errors import LengthError, ValidationError

CFG = StftConfig()
finite = st.floats(-1, 1, allow_nan=False, width=64)


def interior(cfg):
    return slice(cfg.fft_size, -cfg.fft_size)


def test_defaults():
    assert (CFG.fft_size, CFG.hop, CFG.window, CFG.bins) == (512, 256, "sqrt_hann", 257)


@pytest.mark.parametrize("kw", [dict(fft_size=500), dict(hop=200), dict(hop=512), dict(window="hann", hop=512)])
def test_bad_config(kw):
    with pytest.raises(ValidationError):
        StftConfig(**kw)


@pytest.mark.parametrize("window,hop", [("sqrt_hann", 256), ("sqrt_hann", 128), ("hann", 256), ("hann", 128), ("rect", 256)])
def test_cola_envelope_flat(window, hop):
    env = StftConfig(512, hop, window).ola_envelope()
    assert np.ptp(env) <= 1e-10 * env.max()


def test_frame_count():
    x = np.zeros(16000)
    assert stft(x).shape == (257, CFG.num_frames(16000))
    # centred frames: floor((len + fft - fft) / hop) + 1
    assert CFG.num_frames(16000) == 16000 // 256 + 1


def test_zero_in_zero_out():
    assert not np.any(stft(np.zeros(2048)))
    assert not np.any(istft(np.zeros((257, 9), complex)))


def test_bin_centred_cosine_rect():
    # one frame, rectangular window: the DFT of cos(2 pi k0 n / N) is N/2 at +-k0
    cfg = StftConfig(512, 256, "rect")
    k0 = 37
    n = np.arange(512)
    x = np.cos(2 * np.pi * k0 * n / 512)
    frame = np.fft.rfft(x)
    assert abs(frame[k0]) == pytest.approx(256, rel=1e-12)
    # full pipeline: centre frame of a long periodic signal sees a whole-period window
    long = np.cos(2 * np.pi * k0 * np.arange(4096) / 512)
    X = stft(long, cfg)
    mid = X[:, 8]
    others = np.delete(np.abs(mid), k0)
    assert others.max() < 1e-9 * np.abs(mid[k0])


def test_direct_dft_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(1024)
    X = stft(x)
    # frame 2 starts at sample 2*hop - fft/2 = 256 of the unpadded signal
    w, _ = CFG.windows()
    seg = x[256:768] * w
    n = np.arange(512)
    k = np.arange(257)[:, None]
    dft = (seg * np.exp(-2j * np.pi * k * n / 512)).sum(-1)
    assert np.max(np.abs(X[:, 2] - dft)) < 1e-10


def test_round_trip_1s():
    x = np.random.default_rng(1).uniform(-1, 1, 16000)
    y = istft(stft(x), length=x.size)
    assert np.max(np.abs(y - x)[interior(CFG)]) <= 1e-6
    # the centred policy makes the edges exact too
    assert np.max(np.abs(y - x)) <= 1e-6


def test_raw_istft_length():
    spec = stft(np.ones(5000))
    assert istft(spec).size == (spec.shape[1] - 1) * 256 + 512


def test_single_frame_inverse():
    cfg = StftConfig(512, 256, "rect")
    n = np.arange(512)
    frame = np.sin(2 * np.pi * 5.3 * n / 512) * np.hanning(512)
    out = istft(np.fft.rfft(frame)[:, None], cfg)
    assert np.max(np.abs(out - frame)) < 1e-12


@given(arrays(np.float64, st.integers(1024, 3000), elements=finite))
def test_round_trip_property(x):
    y = istft(stft(x), length=x.size)
    assert np.max(np.abs(y - x)[interior(CFG)], initial=0) <= 1e-6


@given(arrays(np.float64, 1536, elements=finite), arrays(np.float64, 1536, elements=finite), finite, finite)
def test_linearity(x, y, a, b):
    lhs = stft(a * x + b * y)
    rhs = a * stft(x) + b * stft(y)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


@given(arrays(np.float64, 2048, elements=finite))
def test_parseval_per_frame(x):
    full = stft(x, onesided=False)
    w, _ = CFG.windows()
    frames = np.lib.stride_tricks.sliding_window_view(np.pad(x, 256, mode="reflect"), 512)[::256] * w
    lhs = (frames**2).sum(-1)
    rhs = (np.abs(full) ** 2).sum(0) / 512
    np.testing.assert_allclose(lhs, rhs, rtol=1e-8, atol=1e-300)


def test_errors():
    with pytest.raises(LengthError):
        stft(np.zeros(100))
    with pytest.raises(ValidationError):
        stft(np.r_[np.zeros(600), np.nan])
    with pytest.raises(ValidationError):
        istft(np.zeros((200, 4), complex))
    with pytest.raises(ValidationError):
        make_window("kaiser", 8)


def test_torch_matches_numpy():
    x = np.random.default_rng(3).standard_normal(4000)
    ts = TorchStft(CFG)
    re, im = ts.forward(torch.as_tensor(x)[None])
    X = stft(x)
    assert np.max(np.abs(re[0].numpy() + 1j * im[0].numpy() - X)) < 1e-9
    back = ts.inverse(re, im, x.size)[0].numpy()
    assert np.max(np.abs(back - x)) < 1e-9
