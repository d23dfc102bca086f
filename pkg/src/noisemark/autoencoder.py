"""Toy compression autoencoder used as a learned-compression attack.

One model with a nested bottleneck: training randomly truncates the
bottleneck channels, so at inference any prefix width works as a quality
level. Narrower prefixes reconstruct worse, giving a monotone family of
compression strengths from a single checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

QUALITY_WIDTHS = (2, 4, 8, 16, 32)  # bottleneck channels per quality level 1..5


class CompressionAutoencoder(nn.Module):
    def __init__(self, resolution: int = 32, bottleneck: int = 32, channels: int = 32):
        super().__init__()
        if resolution % 4 != 0:
            raise ValueError("resolution must be divisible by 4")
        self.resolution = resolution
        self.bottleneck = bottleneck
        self.channels = channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, channels, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, bottleneck, 3, stride=2, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(bottleneck, channels, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(channels, 3, 4, stride=2, padding=1),
        )

    def forward(self, x: torch.Tensor, width: int | None = None) -> torch.Tensor:
        z = self.encoder(x)
        if width is not None:
            if not (1 <= width <= self.bottleneck):
                raise ValueError(f"width must be in [1, {self.bottleneck}]")
            keep = torch.zeros(self.bottleneck, device=z.device)
            keep[:width] = 1.0
            z = z * keep[None, :, None, None]
        return self.decoder(z).clamp(-1.0, 1.0)

    def save_checkpoint(self, path, seed: int | None = None, train_stats: dict | None = None) -> None:
        torch.save(
            {
                "format": "noisemark-autoencoder-v1",
                "arch": {"resolution": self.resolution, "bottleneck": self.bottleneck,
                         "channels": self.channels},
                "state_dict": self.state_dict(),
                "seed": seed,
                "train_stats": train_stats or {},
            },
            path,
        )

    @classmethod
    def load_checkpoint(cls, path) -> "CompressionAutoencoder":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format") != "noisemark-autoencoder-v1":
            raise ValueError(f"not an autoencoder checkpoint: {path}")
        model = cls(**payload["arch"])
        model.load_state_dict(payload["state_dict"])
        model.eval()
        return model


@dataclass
class AutoencoderTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3


def train_autoencoder(images: torch.Tensor, config: AutoencoderTrainConfig | None = None,
                      seed: int = 0, log_every: int = 0) -> tuple[CompressionAutoencoder, dict]:
    """Train with random bottleneck truncation so every prefix width works."""
    config = config or AutoencoderTrainConfig()
    if len(images) == 0:
        raise ValueError("dataset is empty")
    torch.manual_seed(seed)
    model = CompressionAutoencoder(resolution=images.shape[-1])
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    g = torch.Generator().manual_seed(seed + 1)
    widths = torch.tensor(QUALITY_WIDTHS)

    model.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(images), (config.batch_size,), generator=g)
        x = images[idx]
        width = int(widths[torch.randint(0, len(widths), (1,), generator=g)])
        loss = F.mse_loss(model(x, width=width), x)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite autoencoder loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and (step + 1) % log_every == 0:
            print(f"autoencoder step {step + 1}/{config.steps} loss {loss.item():.5f}")

    model.eval()
    with torch.no_grad():
        probe = images[: min(64, len(images))]
        per_level = {lvl + 1: float(F.mse_loss(model(probe, width=w), probe))
                     for lvl, w in enumerate(QUALITY_WIDTHS)}
    stats = {"recon_mse_per_level": per_level, "steps": config.steps, "seed": seed}
    return model, stats


def toy_autoencoder_attack(image: torch.Tensor, model: CompressionAutoencoder, quality_level: int) -> torch.Tensor:
    """Round-trip through the autoencoder at quality 1 (worst) .. 5 (best)."""
    if not (1 <= quality_level <= len(QUALITY_WIDTHS)):
        raise ValueError(f"quality_level must be in [1, {len(QUALITY_WIDTHS)}]")
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    if x.shape[-1] != model.resolution:
        raise ValueError(f"autoencoder expects {model.resolution}px input, got {x.shape[-1]}")
    model.eval()
    with torch.no_grad():
        out = model(x, width=QUALITY_WIDTHS[quality_level - 1])
    return out.squeeze(0) if squeeze else out
