"""Classical blind DWT-DCT watermark baseline.

One-level orthonormal Haar DWT of the luma channel, 8x8 DCT of the LL
band, and a mid-band coefficient-pair ordering code: for each bit two
fixed mid-band positions are pushed apart by a margin, with the sign of
their difference carrying the bit. Extraction only compares the pair, so
no original image is needed.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy.fft import dctn, idctn

from .codec import BitMessage
from .metrics import from_uint8, to_uint8

# mid-band positions used in difference pairs (u, v) within an 8x8 block
_PAIRS = (((0, 2), (2, 0)), ((1, 2), (2, 1)), ((0, 3), (3, 0)), ((1, 3), (3, 1)))
DEFAULT_MARGIN = 30.0


def _haar2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    a, b = x[0::2, 0::2], x[0::2, 1::2]
    c, d = x[1::2, 0::2], x[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, lh, hl, hh


def _ihaar2(ll, lh, hl, hh) -> np.ndarray:
    h, w = ll.shape
    out = np.empty((2 * h, 2 * w), dtype=np.float64)
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[0::2, 1::2] = (ll - lh + hl - hh) / 2.0
    out[1::2, 0::2] = (ll + lh - hl - hh) / 2.0
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return out


def _rgb_to_ycbcr(arr: np.ndarray) -> np.ndarray:
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    return np.stack([
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418688 * g - 0.081312 * b + 128.0,
    ], axis=-1)


def _ycbcr_to_rgb(arr: np.ndarray) -> np.ndarray:
    y, cb, cr = arr[..., 0], arr[..., 1], arr[..., 2]
    return np.stack([
        y + 1.402 * (cr - 128.0),
        y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0),
        y + 1.772 * (cb - 128.0),
    ], axis=-1)


def _capacity(resolution: int) -> int:
    ll = resolution // 2
    return (ll // 8) * (ll // 8) * len(_PAIRS)


def _bit_slots(k: int, n_blocks: int) -> list[tuple[int, int]]:
    return [(i % n_blocks, i // n_blocks) for i in range(k)]


def dwtdct_embed(image: torch.Tensor, message: BitMessage, margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Embed the message into the luma LL-band DCT mid-band pairs."""
    arr = to_uint8(image).astype(np.float64)
    h, w = arr.shape[:2]
    if h % 16 or w % 16:
        raise ValueError("resolution must be a multiple of 16 for one DWT level of 8x8 blocks")
    k = len(message)
    if k > _capacity(h):
        raise ValueError(f"message of {k} bits exceeds capacity {_capacity(h)} at {h}x{w}")

    ycc = _rgb_to_ycbcr(arr)
    ll, lh, hl, hh = _haar2(ycc[..., 0])
    nb = ll.shape[0] // 8
    bits = message.bits.tolist()
    for i, (block, pair) in enumerate(_bit_slots(k, nb * nb)):
        by, bx = divmod(block, nb)
        blk = ll[8 * by: 8 * by + 8, 8 * bx: 8 * bx + 8]
        coeff = dctn(blk, norm="ortho")
        (u1, v1), (u2, v2) = _PAIRS[pair]
        m = (coeff[u1, v1] + coeff[u2, v2]) / 2.0
        sign = 1.0 if bits[i] == 1 else -1.0
        coeff[u1, v1] = m + sign * margin / 2.0
        coeff[u2, v2] = m - sign * margin / 2.0
        ll[8 * by: 8 * by + 8, 8 * bx: 8 * bx + 8] = idctn(coeff, norm="ortho")

    ycc[..., 0] = _ihaar2(ll, lh, hl, hh)
    rgb = np.clip(np.round(_ycbcr_to_rgb(ycc)), 0, 255).astype(np.uint8)
    return from_uint8(rgb)


def dwtdct_extract(image: torch.Tensor, k: int) -> BitMessage:
    """Blind extraction: compare each mid-band pair's coefficients."""
    arr = to_uint8(image).astype(np.float64)
    h = arr.shape[0]
    if k > _capacity(h):
        raise ValueError(f"cannot extract {k} bits at {h}px (capacity {_capacity(h)})")
    y = _rgb_to_ycbcr(arr)[..., 0]
    ll, _, _, _ = _haar2(y)
    nb = ll.shape[0] // 8
    bits = []
    for block, pair in _bit_slots(k, nb * nb):
        by, bx = divmod(block, nb)
        coeff = dctn(ll[8 * by: 8 * by + 8, 8 * bx: 8 * bx + 8], norm="ortho")
        (u1, v1), (u2, v2) = _PAIRS[pair]
        bits.append(1 if coeff[u1, v1] > coeff[u2, v2] else 0)
    return BitMessage(torch.tensor(bits))
