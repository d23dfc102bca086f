"""Image quality metrics in 8-bit [0, 255] units.

PSNR, SSIM, L-infinity, and MSE between two images of the same shape.
Inputs are [-1, 1] float tensors (or uint8 arrays); both are quantized to
8-bit before measuring, matching how stored images are compared.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from skimage.metrics import structural_similarity

PSNR_CAP = 100.0  # identical images report this instead of infinity


def to_uint8(image) -> np.ndarray:
    """[-1, 1] float (3, H, W) or (H, W, 3) to uint8 (H, W, 3)."""
    if isinstance(image, torch.Tensor):
        arr = image.detach().cpu().numpy()
    else:
        arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr if arr.ndim == 2 or arr.shape[-1] in (1, 3) else np.moveaxis(arr, 0, -1)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = np.moveaxis(arr, 0, -1)
    return np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) back to a [-1, 1] float tensor (3, H, W)."""
    x = torch.from_numpy(np.ascontiguousarray(arr)).float() / 127.5 - 1.0
    return x.permute(2, 0, 1)


def quality_metrics(a, b) -> dict:
    """{psnr, ssim, linf, mse} of two images, computed at 8-bit scale."""
    ua = to_uint8(a).astype(np.float64)
    ub = to_uint8(b).astype(np.float64)
    if ua.shape != ub.shape:
        raise ValueError(f"shape mismatch: {ua.shape} vs {ub.shape}")
    diff = ua - ub
    mse = float(np.mean(diff ** 2))
    linf = float(np.max(np.abs(diff)))
    psnr = PSNR_CAP if mse == 0 else min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))
    win = min(11, ua.shape[0] - (ua.shape[0] + 1) % 2)
    ssim = float(structural_similarity(
        ua, ub, channel_axis=-1, data_range=255.0, win_size=win,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False))
    return {"psnr": psnr, "ssim": ssim, "linf": linf, "mse": mse}


def psnr(a, b) -> float:
    return quality_metrics(a, b)["psnr"]
