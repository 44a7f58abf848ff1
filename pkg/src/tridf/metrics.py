"""Full-reference image quality: PSNR and single-scale SSIM."""

import math

import numpy as np
from scipy.ndimage import correlate1d

__all__ = ["psnr", "ssim", "gaussian_window"]

SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(reference, candidate):
    a = np.clip(np.asarray(reference, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(candidate, dtype=np.float64), 0.0, 1.0)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(reference, candidate) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` when identical."""
    a, b = _pair(reference, candidate)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(reference, candidate, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions, averaged over channels.

    Gaussian window 11x11 with sigma 1.5, K1 = 0.01, K2 = 0.03, data range 1.
    """
    a, b = _pair(reference, candidate)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images must be at least {window}x{window}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window(window, sigma)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
