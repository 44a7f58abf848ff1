import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tridf.metrics import gaussian_window, psnr, ssim

C1, C2 = 0.01 ** 2, 0.03 ** 2


def ssim_direct(a, b):
    """Window-by-window SSIM, written without any filtering library."""
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    a = a[..., None] if a.ndim == 2 else a
    b = b[..., None] if b.ndim == 2 else b
    per_channel = []
    for c in range(a.shape[2]):
        vals = []
        for i in range(a.shape[0] - 10):
            for j in range(a.shape[1] - 10):
                x, y = a[i:i + 11, j:j + 11, c], b[i:i + 11, j:j + 11, c]
                mx, my = (w * x).sum(), (w * y).sum()
                vx = (w * (x - mx) ** 2).sum()
                vy = (w * (y - my) ** 2).sum()
                cxy = (w * (x - mx) * (y - my)).sum()
                vals.append((2 * mx * my + C1) * (2 * cxy + C2) / ((mx ** 2 + my ** 2 + C1) * (vx + vy + C2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


def test_psnr_examples():
    a = np.full((8, 8, 3), 0.3)
    assert psnr(a, a) == math.inf
    assert abs(psnr(a, a + 0.1) - 20.0) <= 1e-9
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_identity_and_constants():
    rng = np.random.default_rng(0)
    a = rng.random((20, 24, 3))
    assert abs(ssim(a, a) - 1.0) <= 1e-12
    half = np.full((16, 16, 3), 0.5)
    assert ssim(half, half) == 1.0
    lo, hi = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    closed = (2 * 0 * 1 + C1) / (0 + 1 + C1)  # variances vanish, the C2 factors cancel
    assert abs(ssim(lo, hi) - closed) <= 1e-9
    assert abs(ssim(lo, hi) - ssim_direct(lo, hi)) <= 1e-9


def test_ssim_matches_direct_windows():
    rng = np.random.default_rng(1)
    a = rng.random((14, 15, 3))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim_direct(a, b)) <= 1e-12


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_ssim_translation_of_pair():
    rng = np.random.default_rng(2)
    a, b = rng.random((40, 40)), rng.random((40, 40))
    base = ssim(a[:29, :29], b[:29, :29])
    shifted = ssim(np.roll(a, (11, 11), (0, 1))[11:40, 11:40], np.roll(b, (11, 11), (0, 1))[11:40, 11:40])
    assert shifted == pytest.approx(base, abs=1e-15)


def test_window_normalised():
    assert gaussian_window().sum() == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1)))
def test_symmetry_and_range(a, b):
    assert psnr(a, b) == psnr(b, a)
    s = ssim(a, b)
    assert -1.0 <= s <= 1.0 + 1e-12
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
