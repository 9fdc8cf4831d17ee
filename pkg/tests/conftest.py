import numpy as np
import pytest
from hypothesis import settings

from ldrcnet.data import synth_pair, synthetic_scene, RainParams
from ldrcnet.tensor import Tensor

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=True)


def direct_conv(x, w, b=None, stride=1, padding=0, dilation=1):
    """Textbook quadruple loop, float64."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + dilation * (kh - 1) + 1 : dilation,
                       j * stride : j * stride + dilation * (kw - 1) + 1 : dilation]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    if b is not None:
        out += np.asarray(b, np.float64)[None, :, None, None]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_pairs():
    """Four 32x32 synthetic pairs."""
    pairs = []
    for i in range(4):
        params = RainParams(angle_deg=10.0 * i - 15, length_px=9, density=0.05, intensity=0.9, seed=50 + i)
        pairs.append(synth_pair(synthetic_scene(32, 32, i), params))
    return pairs
