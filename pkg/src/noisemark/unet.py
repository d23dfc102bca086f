"""Small conditional U-Net noise predictor with instrumented attention.

Two resolutions (full and half). Self-attention runs at the half resolution
only; cross-attention against the condition tokens runs at both. Every
attention layer can hand its softmax probabilities to a capture sink, which
is how downstream code obtains self-attention maps (structure control) and
cross-attention maps (foreground mask).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class AttentionBundle:
    """Attention probabilities captured at one denoising step.

    ``self_maps[layer]`` has shape (B, heads, N, N) and ``cross_maps[layer]``
    (B, heads, N, n_tokens), N being the layer's flattened spatial size.
    Rows are softmax-normalized.
    """

    step_index: int
    self_maps: dict[str, torch.Tensor] = field(default_factory=dict)
    cross_maps: dict[str, torch.Tensor] = field(default_factory=dict)

    def detach(self) -> "AttentionBundle":
        return AttentionBundle(
            step_index=self.step_index,
            self_maps={k: v.detach() for k, v in self.self_maps.items()},
            cross_maps={k: v.detach() for k, v in self.cross_maps.items()},
        )


class _TimestepEmbedding(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
        args = t.float()[:, None] * freqs[None]
        return self.mlp(torch.cat([args.sin(), args.cos()], dim=-1))


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _Attention(nn.Module):
    """Multi-head attention over spatial positions; cross when ctx_dim set."""

    def __init__(self, channels: int, heads: int, ctx_dim: int | None = None):
        super().__init__()
        self.heads = heads
        self.head_dim = channels // heads
        self.is_cross = ctx_dim is not None
        kv_dim = ctx_dim if self.is_cross else channels
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(kv_dim, channels, bias=False)
        self.to_v = nn.Linear(kv_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, ctx=None, sink=None, name=""):
        b, c, h, w = x.shape
        q_in = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        kv_in = ctx if self.is_cross else q_in
        q = self.to_q(q_in).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(kv_in).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(kv_in).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        if sink is not None:
            sink(name, self.is_cross, attn)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class CondUNet(nn.Module):
    """Noise predictor epsilon(x_t, t, tokens) at a fixed working resolution."""

    def __init__(self, resolution: int = 32, base_channels: int = 32, token_dim: int = 16, heads: int = 2,
                 time_dim: int = 128):
        super().__init__()
        if resolution % 2 != 0:
            raise ValueError("resolution must be even (one downsampling stage)")
        self.resolution = resolution
        self.token_dim = token_dim
        ch = base_channels
        self.time_embed = _TimestepEmbedding(64, time_dim)
        self.conv_in = nn.Conv2d(3, ch, 3, padding=1)
        self.down_block = _ResBlock(ch, ch, time_dim)
        self.down_cross = _Attention(ch, heads, ctx_dim=token_dim)
        self.downsample = nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1)
        self.mid_block1 = _ResBlock(2 * ch, 2 * ch, time_dim)
        self.mid_self = _Attention(2 * ch, heads)
        self.mid_cross = _Attention(2 * ch, heads, ctx_dim=token_dim)
        self.mid_block2 = _ResBlock(2 * ch, 2 * ch, time_dim)
        self.upsample = nn.ConvTranspose2d(2 * ch, ch, 4, stride=2, padding=1)
        self.up_block = _ResBlock(2 * ch, ch, time_dim)
        self.up_cross = _Attention(ch, heads, ctx_dim=token_dim)
        self.norm_out = nn.GroupNorm(8, ch)
        self.conv_out = nn.Conv2d(ch, 3, 3, padding=1)

    def attention_layer_names(self) -> dict[str, list[str]]:
        return {
            "self": ["mid.self"],
            "cross": ["down.cross", "mid.cross", "up.cross"],
        }

    def forward(self, x: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor, sink=None) -> torch.Tensor:
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValueError(f"expected {self.resolution}x{self.resolution} input, got {tuple(x.shape[-2:])}")
        temb = self.time_embed(t)
        h1 = self.down_block(self.conv_in(x), temb)
        h1 = self.down_cross(h1, ctx=tokens, sink=sink, name="down.cross")
        h2 = self.mid_block1(self.downsample(h1), temb)
        h2 = self.mid_self(h2, sink=sink, name="mid.self")
        h2 = self.mid_cross(h2, ctx=tokens, sink=sink, name="mid.cross")
        h2 = self.mid_block2(h2, temb)
        h = torch.cat([self.upsample(h2), h1], dim=1)
        h = self.up_block(h, temb)
        h = self.up_cross(h, ctx=tokens, sink=sink, name="up.cross")
        return self.conv_out(F.silu(self.norm_out(h)))
