"""Training losses and image-quality metrics.

Losses operate on torch tensors in the ``[0, 1]`` domain and are
differentiable. PSNR and SSIM operate on numpy arrays in the 0-255 domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

MAX_PIXEL = 255.0


@dataclass
class LossBreakdown:
    l_r: torch.Tensor
    l_e: torch.Tensor
    l_d: torch.Tensor
    l_total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(v.detach()) for k, v in vars(self).items()}


def recon_loss(x: torch.Tensor, xhat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels and the batch."""
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(xhat.shape)}")
    return ((x - xhat) ** 2).mean()


def feature_loss(a: torch.Tensor, b: torch.Tensor, extractor, feats_a=None) -> torch.Tensor:
    """(1/m) ||h(a) - h(b)||^2, averaged over the batch.

    ``feats_a`` may carry precomputed features of ``a``.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    fa = extractor(a) if feats_a is None else feats_a
    return ((fa - extractor(b)) ** 2).mean()


def total_loss(x, y, yhat, xhat, lambda_e: float, lambda_d: float, extractor=None,
               track_features: bool = True) -> LossBreakdown:
    """Reconstruction loss minus weighted feature distances.

    The feature terms are computed whenever an extractor is given; with
    ``track_features=False`` they are computed without autograd and only
    logged, which requires both weights to be zero.
    """
    if lambda_e < 0 or lambda_d < 0:
        raise ValueError("loss weights must be non-negative")
    l_r = recon_loss(x, xhat)
    zero = torch.zeros((), dtype=l_r.dtype)
    if extractor is None:
        if lambda_e or lambda_d:
            raise ValueError("feature extractor required for non-zero loss weights")
        return LossBreakdown(l_r, zero, zero, l_r)
    if not track_features:
        if lambda_e or lambda_d:
            raise ValueError("untracked feature losses need zero weights")
        with torch.no_grad():
            fx = extractor(x)
            l_e = feature_loss(x, y, extractor, fx)
            l_d = feature_loss(x, yhat, extractor, fx)
        return LossBreakdown(l_r, l_e, l_d, l_r)
    fx = extractor(x).detach()
    l_e = feature_loss(x, y, extractor, fx)
    l_d = feature_loss(x, yhat, extractor, fx)
    return LossBreakdown(l_r, l_e, l_d, l_r - lambda_e * l_e - lambda_d * l_d)


# ---------------------------------------------------------------------------
# Metrics (0-255 domain)
# ---------------------------------------------------------------------------

def mse_255(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB with MAX = 255; identical inputs give ``inf``."""
    mse = mse_255(a, b)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(MAX_PIXEL ** 2 / mse)


def psnr_batch(a, b) -> np.ndarray:
    """Per-image PSNR for (batch, h, w, c) arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = ((a - b) ** 2).reshape(len(a), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(MAX_PIXEL ** 2 / mse)


SSIM_SIGMA = 1.5
SSIM_WIN = 11
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    c1 = (SSIM_K1 * MAX_PIXEL) ** 2
    c2 = (SSIM_K2 * MAX_PIXEL) ** 2
    radius = SSIM_WIN // 2
    blur = lambda im: ndimage.gaussian_filter(im, SSIM_SIGMA, truncate=radius / SSIM_SIGMA)
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    smap = num / den
    # drop the border where the window overhangs the image
    return float(smap[radius:-radius, radius:-radius].mean())


def ssim(a, b) -> float:
    """Single-scale SSIM of two (h, w[, c]) images in the 0-255 domain,
    Gaussian window (11 wide, sigma 1.5), averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    return float(np.mean([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[2])]))


def ssim_batch(a, b) -> np.ndarray:
    return np.array([ssim(x, y) for x, y in zip(a, b)])
