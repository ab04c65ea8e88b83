"""Image fidelity metrics (PSNR, SSIM) with optional pixel masks.

Masked evaluation is strict: excluded pixels are never read, so holes can be
poisoned with arbitrary values without changing any score. Peak signal is
inferred from dtype — 255 for 8-bit images, 1.0 for floats.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve

PSNR_CAP_DB = 100.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


def _peak(a: np.ndarray, b: np.ndarray) -> float:
    if a.dtype == np.uint8 and b.dtype == np.uint8:
        return 255.0
    if np.issubdtype(a.dtype, np.floating) and np.issubdtype(b.dtype, np.floating):
        return 1.0
    raise TypeError(f"images must both be uint8 or both float, got {a.dtype}/{b.dtype}")


def _check_shapes(a: np.ndarray, b: np.ndarray, mask) -> np.ndarray | None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    if not mask.any():
        raise ValueError("mask selects no pixels")
    return mask


def psnr(a: np.ndarray, b: np.ndarray, mask=None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return the 100 dB cap."""
    a = np.asarray(a)
    b = np.asarray(b)
    mask = _check_shapes(a, b, mask)
    peak = _peak(a, b)
    diff = a.astype(np.float64) - b.astype(np.float64)
    if mask is not None:
        diff = diff[mask]
    mse = np.mean(diff**2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(peak**2 / mse)), PSNR_CAP_DB)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _ssim_single(a: np.ndarray, b: np.ndarray, mask: np.ndarray, peak: float) -> float:
    kernel = _gaussian_kernel(_SSIM_WINDOW, _SSIM_SIGMA)
    m = mask.astype(np.float64)

    def smooth(img):
        return convolve(img, kernel, mode="constant", cval=0.0)

    w = smooth(m)
    valid = mask & (w > 1e-12)
    wa = smooth(a * m)
    wb = smooth(b * m)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu_a = wa / w
        mu_b = wb / w
        var_a = smooth(a * a * m) / w - mu_a**2
        var_b = smooth(b * b * m) / w - mu_b**2
        cov = smooth(a * b * m) / w - mu_a * mu_b

    c1 = (_K1 * peak) ** 2
    c2 = (_K2 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean((num / den)[valid]))


def ssim(a: np.ndarray, b: np.ndarray, mask=None) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Local statistics are weighted by the window *and* the mask, so masked-out
    pixels contribute to no window; windows centered on masked-out pixels are
    dropped from the mean.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    mask = _check_shapes(a, b, mask)
    peak = _peak(a, b)
    if mask is None:
        mask = np.ones(a.shape[:2], dtype=bool)
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    if af.ndim == 2:
        return _ssim_single(af, bf, mask, peak)
    channels = [_ssim_single(af[..., c], bf[..., c], mask, peak) for c in range(af.shape[-1])]
    return float(np.mean(channels))
