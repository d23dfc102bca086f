"""Synthetic labeled image corpus used for desk-scale training and evaluation.

Each image is a single colored shape on a dim, slowly varying background.
The shape class acts as the image's caption: shape geometry and color are
class-dependent while the background is class-independent, so conditioning
carries information about the foreground only.
"""

from __future__ import annotations

import numpy as np
import torch

CLASS_NAMES = ("disk", "square", "triangle", "cross")
NUM_CLASSES = len(CLASS_NAMES)

# Base RGB per class in [0, 1]; jittered per image.
_CLASS_COLORS = np.array(
    [
        [0.85, 0.25, 0.20],  # disk
        [0.20, 0.75, 0.30],  # square
        [0.25, 0.35, 0.85],  # triangle
        [0.85, 0.75, 0.20],  # cross
    ]
)


def _shape_sdf(kind: int, xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    """Signed distance to the class shape (negative inside)."""
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    if kind == 0:  # disk
        return np.hypot(dx, dy) - r
    if kind == 1:  # square
        return np.maximum(np.abs(u), np.abs(v)) - r
    if kind == 2:  # triangle (equilateral, pointing up)
        q = np.hypot(u, v)
        th = np.arctan2(v, u)
        # polygon SDF approximation via max over the three half planes
        d = -np.inf * np.ones_like(u)
        for k in range(3):
            phi = np.pi / 2 + 2 * np.pi * k / 3
            d = np.maximum(d, u * np.cos(phi) + v * np.sin(phi))
        del q, th
        return d - r * 0.5
    if kind == 3:  # cross (union of two bars)
        bar1 = np.maximum(np.abs(u) - r, np.abs(v) - 0.38 * r)
        bar2 = np.maximum(np.abs(v) - r, np.abs(u) - 0.38 * r)
        return np.minimum(bar1, bar2)
    raise ValueError(f"unknown shape kind {kind}")


def make_image(label: int, resolution: int, rng: np.random.Generator) -> np.ndarray:
    """Render one (3, H, W) float32 image in [-1, 1] for the given class."""
    h = w = resolution
    ys, xs = np.mgrid[0:h, 0:w]
    xx = (xs + 0.5) / w
    yy = (ys + 0.5) / h

    # class-independent background: dim constant plus a gentle linear ramp
    base = rng.uniform(0.08, 0.30)
    gx, gy = rng.uniform(-0.12, 0.12, size=2)
    bg_val = base + gx * (xx - 0.5) + gy * (yy - 0.5)
    bg_tint = rng.uniform(0.85, 1.15, size=3)
    bg = np.clip(bg_val[None] * bg_tint[:, None, None], 0.0, 1.0)

    # class-dependent foreground
    cx = rng.uniform(0.32, 0.68)
    cy = rng.uniform(0.32, 0.68)
    r = rng.uniform(0.16, 0.26)
    angle = rng.uniform(0, 2 * np.pi) if label != 0 else 0.0
    sdf = _shape_sdf(label, xx, yy, cx, cy, r, angle)
    edge = 1.0 / resolution
    alpha = np.clip(0.5 - sdf / (2 * edge), 0.0, 1.0)  # anti-aliased coverage

    color = np.clip(_CLASS_COLORS[label] + rng.uniform(-0.08, 0.08, size=3), 0.05, 0.95)
    shade = 1.0 - 0.25 * ((xx - cx) ** 2 + (yy - cy) ** 2) / max(r, 1e-6) ** 2
    fg = np.clip(color[:, None, None] * shade[None], 0.0, 1.0)

    img01 = bg * (1 - alpha[None]) + fg * alpha[None]
    return (2.0 * img01 - 1.0).astype(np.float32)


def make_dataset(n_images: int, resolution: int = 32, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic corpus: (images (N,3,H,W) in [-1,1], labels (N,))."""
    if n_images <= 0:
        raise ValueError("n_images must be positive")
    rng = np.random.default_rng(seed)
    images = np.empty((n_images, 3, resolution, resolution), dtype=np.float32)
    labels = np.empty(n_images, dtype=np.int64)
    for i in range(n_images):
        label = i % NUM_CLASSES
        images[i] = make_image(label, resolution, rng)
        labels[i] = label
    return torch.from_numpy(images), torch.from_numpy(labels)


def foreground_mask(image: torch.Tensor, label: int | None = None) -> torch.Tensor:
    """Rough foreground indicator used only by diagnostics and demos.

    Flags pixels that differ strongly from the median background level.
    Not part of the watermarking pipeline (masks there come from attention).
    """
    img01 = (image + 1.0) / 2.0
    med = img01.median(dim=-1).values.median(dim=-1).values  # per channel
    dist = (img01 - med[:, None, None]).abs().sum(dim=0)
    return (dist > 0.35).float()
