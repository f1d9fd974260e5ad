"""Training losses and evaluation metrics.

All loss functions accept either a graph Tensor (differentiable path) or
a plain array; metrics are array-only.  Dynamic range is 1.0 throughout;
PSNR against the 8-bit convention just rescales inside the log.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class LossError(ValueError):
    pass


def _as_graph(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value))


def _check_shapes(a, b):
    sa = a.data.shape if isinstance(a, Tensor) else np.asarray(a).shape
    sb = b.data.shape if isinstance(b, Tensor) else np.asarray(b).shape
    if sa != sb:
        raise LossError(f"shape mismatch {sa} vs {sb}")


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference."""
    _check_shapes(pred, target)
    pred = _as_graph(pred)
    target = _as_graph(target)
    return ad.mean(ad.absolute(ad.sub(pred, target)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred, target, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> Tensor:
    """Mean local structural similarity with a Gaussian window.

    Differentiable end to end when ``pred`` is a graph Tensor.  Inputs are
    (B, C, H, W) batches (3D inputs get a batch axis); spatial dims must
    cover the window.
    """
    _check_shapes(pred, target)
    pred = _as_graph(pred)
    target = _as_graph(target)
    if pred.data.ndim == 3:
        pred = ad.reshape(pred, (1,) + pred.data.shape)
        target = ad.reshape(target, (1,) + target.data.shape)
    if pred.data.ndim != 4:
        raise LossError(f"expected (B, C, H, W), got {pred.data.shape}")
    if pred.data.shape[2] < window or pred.data.shape[3] < window:
        raise LossError(
            f"image {pred.data.shape[2]}x{pred.data.shape[3]} smaller than window {window}"
        )
    kernel = gaussian_window(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    mu_p = ad.blur_valid(pred, kernel)
    mu_t = ad.blur_valid(target, kernel)
    mu_pp = ad.mul(mu_p, mu_p)
    mu_tt = ad.mul(mu_t, mu_t)
    mu_pt = ad.mul(mu_p, mu_t)
    var_p = ad.sub(ad.blur_valid(ad.mul(pred, pred), kernel), mu_pp)
    var_t = ad.sub(ad.blur_valid(ad.mul(target, target), kernel), mu_tt)
    cov = ad.sub(ad.blur_valid(ad.mul(pred, target), kernel), mu_pt)

    num = ad.mul(ad.add(ad.mul(mu_pt, 2.0), c1), ad.add(ad.mul(cov, 2.0), c2))
    den = ad.mul(ad.add(ad.add(mu_pp, mu_tt), c1), ad.add(ad.add(var_p, var_t), c2))
    return ad.mean(ad.div(num, den))


def combined_loss(pred, target, weight: float) -> Tensor:
    """L1 plus ``weight`` times the structural-dissimilarity term."""
    if weight < 0:
        raise LossError(f"negative loss weight {weight}")
    term = l1_loss(pred, target)
    if weight == 0:
        return term
    return ad.add(term, ad.mul(ad.sub(1.0, ssim(pred, target)), weight))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all channels jointly; +inf at zero MSE."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LossError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim_value(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Metric form of ssim for plain arrays."""
    return float(ssim(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), window, sigma).data)
