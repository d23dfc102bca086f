"""Real (non-differentiable) evaluation transforms at fixed parameter points.

These are the benchmark's attack suite: reference-codec JPEG, PIL-style
geometric and photometric edits, uniform 8-bit noise, and a 3x3 mean
filter. Crop and resize parameters are area ratios; crops are re-expanded
to the working resolution before decoding. Each label maps to exactly one
parameterization.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image, ImageEnhance

from .metrics import from_uint8, to_uint8


@dataclass(frozen=True)
class TransformPoint:
    name: str
    kind: str
    param: float = 0.0


TRANSFORM_POINTS: dict[str, TransformPoint] = {
    p.name: p
    for p in [
        TransformPoint("None", "identity"),
        TransformPoint("Crop_01", "crop", 0.1),
        TransformPoint("Crop_05", "crop", 0.5),
        TransformPoint("Rot_25", "rotate", 25.0),
        TransformPoint("Rot_90", "rotate", 90.0),
        TransformPoint("Resize_0.3", "resize", 0.3),
        TransformPoint("Resize_0.7", "resize", 0.7),
        TransformPoint("Brightness_1.5", "brightness", 1.5),
        TransformPoint("Brightness_2.0", "brightness", 2.0),
        TransformPoint("JPEG_80", "jpeg", 80.0),
        TransformPoint("JPEG_50", "jpeg", 50.0),
        TransformPoint("Noise", "noise", 10.0),
        TransformPoint("Filter", "filter", 3.0),
    ]
}

DEFAULT_TRANSFORM_SET = list(TRANSFORM_POINTS)


def real_jpeg(arr: np.ndarray, quality: int) -> np.ndarray:
    """Reference-codec JPEG round trip on a uint8 (H, W, 3) array."""
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"))


def real_jpeg_bytes(arr: np.ndarray, quality: int) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(quality))
    return buf.getvalue()


def _apply_uint8(point: TransformPoint, arr: np.ndarray, seed: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if point.kind == "identity":
        return arr
    if point.kind == "crop":
        f = point.param ** 0.5
        ch, cw = max(1, round(h * f)), max(1, round(w * f))
        rng = np.random.default_rng(seed)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        patch = Image.fromarray(arr[top: top + ch, left: left + cw])
        return np.asarray(patch.resize((w, h), Image.BILINEAR))
    if point.kind == "rotate":
        deg = point.param
        if deg % 90 == 0:
            return np.ascontiguousarray(np.rot90(arr, k=int(deg // 90) % 4))
        img = Image.fromarray(arr).rotate(deg, resample=Image.BILINEAR, fillcolor=(0, 0, 0))
        return np.asarray(img)
    if point.kind == "resize":
        f = point.param ** 0.5
        dh, dw = max(1, round(h * f)), max(1, round(w * f))
        img = Image.fromarray(arr).resize((dw, dh), Image.BILINEAR).resize((w, h), Image.BILINEAR)
        return np.asarray(img)
    if point.kind == "brightness":
        img = ImageEnhance.Brightness(Image.fromarray(arr)).enhance(point.param)
        return np.asarray(img)
    if point.kind == "jpeg":
        return real_jpeg(arr, int(point.param))
    if point.kind == "noise":
        rng = np.random.default_rng(seed)
        noise = rng.uniform(-point.param, point.param, size=arr.shape)
        return np.clip(np.round(arr.astype(np.float64) + noise), 0, 255).astype(np.uint8)
    if point.kind == "filter":
        from scipy.ndimage import uniform_filter

        k = int(point.param)
        out = uniform_filter(arr.astype(np.float64), size=(k, k, 1), mode="reflect")
        return np.clip(np.round(out), 0, 255).astype(np.uint8)
    raise ValueError(f"unknown transform kind {point.kind!r}")


def transform(point: TransformPoint | str, image: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Apply one evaluation transform to a [-1, 1] image (or batch)."""
    if isinstance(point, str):
        try:
            point = TRANSFORM_POINTS[point]
        except KeyError:
            raise ValueError(f"unknown transform label {point!r}") from None
    if image.dim() == 4:
        return torch.stack([transform(point, im, seed=seed + i) for i, im in enumerate(image)])
    arr = to_uint8(image)
    return from_uint8(_apply_uint8(point, arr, seed))
