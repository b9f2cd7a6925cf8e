"""Image quality metrics on [0, 1] images."""
from __future__ import annotations

import math

import numpy as np

from .errors import ContractError

PSNR_CAP = 60.0


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"psnr: shape {a.shape} != {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-cap / 10.0):
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the first two axes."""
    k = len(w)
    h, wd = img.shape[:2]
    rows = sum(w[i] * img[i:h - k + 1 + i] for i in range(k))
    return sum(w[i] * rows[:, i:wd - k + 1 + i] for i in range(k))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all channels with a Gaussian window, evaluated where the window fits."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"ssim: shape {a.shape} != {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ContractError(f"ssim: image {a.shape[:2]} smaller than the {window}x{window} window")
    w = _gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a ** 2
    var_b = _filter_valid(b * b, w) - mu_b ** 2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
