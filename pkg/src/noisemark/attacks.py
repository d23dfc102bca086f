"""Differentiable simulated corruption layer.

Six attack kinds, each controlled by one scalar intensity: identity, random
square crop (area-ratio, re-expanded), rotation (degrees, bilinear, black
fill), resize (area-ratio down/up), brightness (multiplicative on [0, 1]
intensities), and 8x8-DCT JPEG with straight-through rounding. Every attack
keeps the input resolution and carries gradients back to the input pixels,
so the embedding loss can be optimized through a sampled corruption.

Images are (B, 3, H, W) float tensors in [-1, 1]; a (3, H, W) image is
treated as a batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

ATTACK_KINDS = ("identity", "crop", "rotate", "resize", "brightness", "jpeg")


@dataclass
class AttackSpec:
    """One concrete corruption: a kind, its scalar intensity, and the seed
    driving any stochastic placement (crop position)."""

    kind: str
    intensity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "crop" and not (0.0 < self.intensity <= 1.0):
            raise ValueError(f"crop area ratio must be in (0, 1], got {self.intensity}")
        if self.kind == "resize" and not (0.0 < self.intensity <= 1.0):
            raise ValueError(f"resize area ratio must be in (0, 1], got {self.intensity}")
        if self.kind == "jpeg" and not (1.0 <= self.intensity <= 100.0):
            raise ValueError(f"jpeg quality must be in [1, 100], got {self.intensity}")
        if self.kind == "brightness" and self.intensity <= 0.0:
            raise ValueError(f"brightness factor must be > 0, got {self.intensity}")


@dataclass
class AttackTemplate:
    kind: str
    intensity_range: tuple[float, float] = (0.0, 0.0)


@dataclass
class AttackPool:
    """Templates with intensity ranges plus normalized sampling weights."""

    templates: list[AttackTemplate]
    weights: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.templates:
            raise ValueError("attack pool must not be empty")
        if not self.weights:
            self.weights = [1.0 / len(self.templates)] * len(self.templates)
        if len(self.weights) != len(self.templates):
            raise ValueError("one weight per template required")
        total = sum(self.weights)
        if total <= 0:
            raise ValueError("weights must sum to a positive value")
        self.weights = [w / total for w in self.weights]


def default_attack_pool() -> AttackPool:
    """Training-time pool bracketing the evaluation transform points."""
    return AttackPool(
        templates=[
            AttackTemplate("identity"),
            AttackTemplate("crop", (0.3, 1.0)),
            AttackTemplate("rotate", (-30.0, 30.0)),
            AttackTemplate("resize", (0.5, 1.0)),
            AttackTemplate("brightness", (0.8, 1.6)),
            AttackTemplate("jpeg", (50.0, 95.0)),
        ]
    )


def _batched(image: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if image.dim() == 3:
        return image.unsqueeze(0), True
    return image, False


# ---------------------------------------------------------------------------
# individual attacks
# ---------------------------------------------------------------------------


def crop_attack(image: torch.Tensor, area_ratio: float, seed: int = 0) -> torch.Tensor:
    """Random square crop keeping ``area_ratio`` of the area, re-expanded."""
    x, squeeze = _batched(image)
    b, _, h, w = x.shape
    f = math.sqrt(area_ratio)
    g = torch.Generator().manual_seed(seed)
    # per-image crop center, staying inside the frame
    max_off = 1.0 - f
    offs = (torch.rand(b, 2, generator=g) * 2.0 - 1.0) * max_off
    theta = torch.zeros(b, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = f
    theta[:, 1, 1] = f
    theta[:, 0, 2] = offs[:, 0]
    theta[:, 1, 2] = offs[:, 1]
    grid = F.affine_grid(theta, size=(b, 3, h, w), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.squeeze(0) if squeeze else out


def rotate_attack(image: torch.Tensor, degrees: float) -> torch.Tensor:
    """Rotate by an exact angle; corners fill with black, bilinear sampling."""
    x, squeeze = _batched(image)
    b, _, h, w = x.shape
    a = math.radians(degrees)
    ca, sa = math.cos(a), math.sin(a)
    theta = torch.tensor([[ca, -sa, 0.0], [sa, ca, 0.0]], dtype=x.dtype).expand(b, 2, 3)
    grid = F.affine_grid(theta, size=(b, 3, h, w), align_corners=False)
    x01 = (x + 1.0) / 2.0  # black fill = 0 in intensity units
    out01 = F.grid_sample(x01, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    out = 2.0 * out01 - 1.0
    return out.squeeze(0) if squeeze else out


def resize_attack(image: torch.Tensor, area_ratio: float) -> torch.Tensor:
    """Downscale to ``area_ratio`` of the area, then back up (detail loss)."""
    x, squeeze = _batched(image)
    h, w = x.shape[-2:]
    f = math.sqrt(area_ratio)
    h2, w2 = max(1, round(h * f)), max(1, round(w * f))
    down = F.interpolate(x, size=(h2, w2), mode="bilinear", align_corners=False, antialias=True)
    out = F.interpolate(down, size=(h, w), mode="bilinear", align_corners=False)
    return out.squeeze(0) if squeeze else out


def brightness_attack(image: torch.Tensor, factor: float) -> torch.Tensor:
    """Scale [0, 1] intensities by ``factor`` and clamp, like PIL enhancement."""
    x, squeeze = _batched(image)
    out = 2.0 * torch.clamp((x + 1.0) / 2.0 * factor, 0.0, 1.0) - 1.0
    return out.squeeze(0) if squeeze else out


# ---------------------------------------------------------------------------
# differentiable JPEG
# ---------------------------------------------------------------------------

_QT_Y = torch.tensor([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=torch.float32)

_QT_C = torch.tensor([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=torch.float32)


def _dct_matrix() -> torch.Tensor:
    n = torch.arange(8, dtype=torch.float32)
    k = n[:, None]
    c = torch.cos((2 * n[None] + 1) * k * math.pi / 16.0)
    c[0] *= 1.0 / math.sqrt(2.0)
    return c * 0.5


_DCT8 = _dct_matrix()


class _RoundSTE(torch.autograd.Function):
    """True rounding forward, identity gradient backward."""

    @staticmethod
    def forward(ctx, x):
        return torch.round(x)

    @staticmethod
    def backward(ctx, grad):
        return grad


def _quality_scaled_table(base: torch.Tensor, quality: torch.Tensor) -> torch.Tensor:
    """libjpeg linear quality scaling, clamped to [1, 255]. quality: (B,)."""
    scale = torch.where(quality < 50, 5000.0 / quality, 200.0 - 2.0 * quality)
    table = torch.floor((base[None] * scale[:, None, None] + 50.0) / 100.0)
    return table.clamp(1.0, 255.0)


def _blocks(chan: torch.Tensor) -> torch.Tensor:
    b, h, w = chan.shape
    return chan.reshape(b, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4).reshape(b, -1, 8, 8)


def _unblocks(blocks: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b = blocks.shape[0]
    return blocks.reshape(b, h // 8, w // 8, 8, 8).permute(0, 1, 3, 2, 4).reshape(b, h, w)


def _codec_channel(chan: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """DCT -> quantize (straight-through round) -> dequantize -> inverse DCT."""
    h, w = chan.shape[-2:]
    blocks = _blocks(chan) - 128.0
    coeff = _DCT8 @ blocks @ _DCT8.T
    quant = _RoundSTE.apply(coeff / table[:, None])
    recon = _DCT8.T @ (quant * table[:, None]) @ _DCT8
    return _unblocks(recon + 128.0, h, w)


def differentiable_jpeg(image: torch.Tensor, q) -> torch.Tensor:
    """Simulated JPEG at quality ``q`` (scalar or per-image tensor).

    YCbCr conversion, 4:2:0 chroma subsampling, 8x8 block DCT with the
    standard tables scaled by quality, straight-through rounding. Sides not
    divisible by 16 are reflect-padded and cropped back.
    """
    x, squeeze = _batched(image)
    b, _, h, w = x.shape
    q = torch.as_tensor(q, dtype=torch.float32)
    if q.dim() == 0:
        q = q.repeat(b)
    if ((q < 1.0) | (q > 100.0)).any():
        raise ValueError("jpeg quality must be in [1, 100]")

    pad_h = (-h) % 16
    pad_w = (-w) % 16
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
    hp, wp = x.shape[-2:]

    x255 = (x + 1.0) * 127.5
    r, g_, b_ = x255[:, 0], x255[:, 1], x255[:, 2]
    y = 0.299 * r + 0.587 * g_ + 0.114 * b_
    cb = -0.168736 * r - 0.331264 * g_ + 0.5 * b_ + 128.0
    cr = 0.5 * r - 0.418688 * g_ - 0.081312 * b_ + 128.0

    cb_s = F.avg_pool2d(cb.unsqueeze(1), 2).squeeze(1)
    cr_s = F.avg_pool2d(cr.unsqueeze(1), 2).squeeze(1)

    ty = _quality_scaled_table(_QT_Y, q)
    tc = _quality_scaled_table(_QT_C, q)
    y2 = _codec_channel(y, ty)
    cb2 = _codec_channel(cb_s, tc)
    cr2 = _codec_channel(cr_s, tc)

    cb2 = F.interpolate(cb2.unsqueeze(1), size=(hp, wp), mode="bilinear", align_corners=False).squeeze(1)
    cr2 = F.interpolate(cr2.unsqueeze(1), size=(hp, wp), mode="bilinear", align_corners=False).squeeze(1)

    r2 = y2 + 1.402 * (cr2 - 128.0)
    g2 = y2 - 0.344136 * (cb2 - 128.0) - 0.714136 * (cr2 - 128.0)
    b2 = y2 + 1.772 * (cb2 - 128.0)
    out = torch.stack([r2, g2, b2], dim=1).clamp(0.0, 255.0) / 127.5 - 1.0
    out = out[:, :, :h, :w]
    if not torch.isfinite(out).all():
        raise RuntimeError("jpeg simulation produced non-finite values")
    return out.squeeze(0) if squeeze else out


# ---------------------------------------------------------------------------
# dispatch and sampling
# ---------------------------------------------------------------------------


def apply(spec: AttackSpec, image: torch.Tensor) -> torch.Tensor:
    """Apply one corruption; output keeps the input resolution and gradient."""
    if spec.kind == "identity":
        return image
    if spec.kind == "crop":
        out = crop_attack(image, spec.intensity, seed=spec.seed)
    elif spec.kind == "rotate":
        out = rotate_attack(image, spec.intensity)
    elif spec.kind == "resize":
        out = resize_attack(image, spec.intensity)
    elif spec.kind == "brightness":
        out = brightness_attack(image, spec.intensity)
    elif spec.kind == "jpeg":
        out = differentiable_jpeg(image, spec.intensity)
    else:  # pragma: no cover - AttackSpec already validates
        raise ValueError(f"unknown attack kind {spec.kind!r}")
    if not torch.isfinite(out).all():
        raise RuntimeError(f"attack {spec.kind} produced non-finite values")
    return out


def sample_spec(pool: AttackPool, seed: int) -> AttackSpec:
    """Draw one spec from the pool: kind by weight, intensity uniform in range."""
    g = torch.Generator().manual_seed(seed)
    idx = int(torch.multinomial(torch.tensor(pool.weights, dtype=torch.float64), 1, generator=g))
    tpl = pool.templates[idx]
    lo, hi = tpl.intensity_range
    intensity = lo + (hi - lo) * float(torch.rand(1, generator=g))
    return AttackSpec(kind=tpl.kind, intensity=intensity, seed=seed + 0x9E37)


def sample_and_apply(pool: AttackPool, image: torch.Tensor, seed: int) -> tuple[torch.Tensor, AttackSpec]:
    """One weighted draw from the pool applied to the image (batch)."""
    spec = sample_spec(pool, seed)
    return apply(spec, image), spec
