"""Bit-message payloads and the convolutional watermark extractor.

The extractor follows the HiDDeN decoder shape: stacked conv blocks, global
average pooling, and a linear head with one output per message bit. It is
trained locally at toy scale against a throwaway residual encoder; only the
extractor is kept, since embedding happens later by optimizing inversion
noise rather than by running an encoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class BitMessage:
    """A k-bit payload; bits are 0/1 integers."""

    bits: torch.Tensor

    def __post_init__(self):
        self.bits = torch.as_tensor(self.bits, dtype=torch.int64).flatten()
        if self.bits.numel() == 0:
            raise ValueError("message must contain at least one bit")
        if not ((self.bits == 0) | (self.bits == 1)).all():
            raise ValueError("message bits must be 0 or 1")

    def __len__(self) -> int:
        return self.bits.numel()

    def to_string(self) -> str:
        return "".join(str(int(b)) for b in self.bits)

    @classmethod
    def from_string(cls, s: str) -> "BitMessage":
        s = s.strip()
        if not s or any(c not in "01" for c in s):
            raise ValueError("message string must be a nonempty run of 0/1 characters")
        return cls(torch.tensor([int(c) for c in s]))

    def as_float(self) -> torch.Tensor:
        return self.bits.to(torch.float32)


def sample_message(k: int, seed: int) -> BitMessage:
    """Uniform random k-bit message, deterministic given the seed."""
    if k <= 0:
        raise ValueError(f"message length must be positive, got {k}")
    g = torch.Generator().manual_seed(seed)
    return BitMessage(torch.randint(0, 2, (k,), generator=g))


def bit_accuracy(predicted, truth) -> float:
    """Fraction of matching bits between two equal-length messages."""
    a = predicted.bits if isinstance(predicted, BitMessage) else torch.as_tensor(predicted).flatten()
    b = truth.bits if isinstance(truth, BitMessage) else torch.as_tensor(truth).flatten()
    if a.numel() != b.numel():
        raise ValueError(f"message lengths differ: {a.numel()} vs {b.numel()}")
    return float((a == b).float().mean())


class _ConvBNRelu(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.layers(x)


class WatermarkDecoder(nn.Module):
    """Extracts k logits from an image; positive logit means bit 1."""

    def __init__(self, k: int, input_resolution: int = 32, channels: int = 48, blocks: int = 4):
        super().__init__()
        self.k = k
        self.input_resolution = input_resolution
        self.channels = channels
        self.blocks = blocks
        layers = [_ConvBNRelu(3, channels)]
        for _ in range(blocks - 1):
            layers.append(_ConvBNRelu(channels, channels))
        layers.append(_ConvBNRelu(channels, k))
        layers.append(nn.AdaptiveAvgPool2d(1))
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(k, k)
        # optional whitening of the logits, fit on clean images; off by default
        self.register_buffer("whiten_mu", torch.zeros(k))
        self.register_buffer("whiten_scale", torch.ones(k))
        self.whitening_enabled = False

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        r = self.input_resolution
        if image.shape[-2:] != (r, r):
            raise ValueError(f"decoder expects {r}x{r} input, got {tuple(image.shape[-2:])}")
        logits = self.head(self.features(image).flatten(1))
        if self.whitening_enabled:
            logits = (logits - self.whiten_mu) * self.whiten_scale
        return logits

    def save_checkpoint(self, path, seed: int | None = None, train_stats: dict | None = None) -> None:
        torch.save(
            {
                "format": "noisemark-decoder-v1",
                "arch": {"k": self.k, "input_resolution": self.input_resolution,
                         "channels": self.channels, "blocks": self.blocks},
                "state_dict": self.state_dict(),
                "whitening_enabled": self.whitening_enabled,
                "seed": seed,
                "train_stats": train_stats or {},
            },
            path,
        )

    @classmethod
    def load_checkpoint(cls, path) -> "WatermarkDecoder":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format") != "noisemark-decoder-v1":
            raise ValueError(f"not a decoder checkpoint: {path}")
        dec = cls(**payload["arch"])
        dec.load_state_dict(payload["state_dict"])
        dec.whitening_enabled = payload.get("whitening_enabled", False)
        dec.eval()
        return dec


def decode(image: torch.Tensor, decoder: WatermarkDecoder):
    """Soft logits plus thresholded hard bits for one image or a batch.

    Logits stay differentiable with respect to the image; hard bits are
    ``logit > 0``. A single image returns a BitMessage, a batch returns the
    (B, k) bit tensor.
    """
    single = image.dim() == 3
    logits = decoder(image)
    hard = (logits > 0).to(torch.int64)
    if single:
        return logits.squeeze(0), BitMessage(hard.squeeze(0))
    return logits, hard


def fit_whitening(decoder: WatermarkDecoder, images: torch.Tensor) -> None:
    """Fit the affine logit whitening on clean images and enable it."""
    decoder.eval()
    with torch.no_grad():
        logits = decoder(images)
    decoder.whiten_mu.copy_(logits.mean(dim=0))
    decoder.whiten_scale.copy_(1.0 / logits.std(dim=0).clamp_min(1e-6))
    decoder.whitening_enabled = True


class ResidualEncoder(nn.Module):
    """Throwaway message embedder used only while training the decoder."""

    def __init__(self, k: int, channels: int = 32):
        super().__init__()
        self.k = k
        self.pre = nn.Sequential(_ConvBNRelu(3, channels), _ConvBNRelu(channels, channels))
        self.post = nn.Sequential(
            _ConvBNRelu(channels + k + 3, channels),
            _ConvBNRelu(channels, channels),
            nn.Conv2d(channels, 3, 1),
        )

    def forward(self, image: torch.Tensor, message: torch.Tensor) -> torch.Tensor:
        b, _, h, w = image.shape
        msg_maps = (2.0 * message - 1.0)[:, :, None, None].expand(b, self.k, h, w)
        feat = self.pre(image)
        residual = self.post(torch.cat([feat, msg_maps, image], dim=1))
        return image + residual


@dataclass
class DecoderTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    image_weight: float = 0.7
    holdout: int = 64
    min_accuracy: float = 0.80


def message_loss(logits: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    """Squared error between sigmoid(logits) and the 0/1 bits."""
    return (torch.sigmoid(logits) - bits).pow(2).sum(dim=-1).mean()


def train_decoder(dataset: torch.Tensor, k: int, attack_pool=None,
                  config: DecoderTrainConfig | None = None, seed: int = 0,
                  eval_attack_pool=None, log_every: int = 0
                  ) -> tuple[WatermarkDecoder, ResidualEncoder, dict]:
    """Train the extractor against a residual encoder, under attacks.

    ``attack_pool`` is an AttackPool applied to encoded images during
    training (None disables it); ``eval_attack_pool`` (defaulting to the
    training pool) is used for the held-out attacked-accuracy report. The
    last ``holdout`` images are reserved for that report. Raises if the
    held-out accuracy misses ``min_accuracy``. The returned encoder exists
    only so callers can probe the trained pair; embedding never uses it.
    """
    from .attacks import sample_and_apply  # local import to avoid a cycle

    config = config or DecoderTrainConfig()
    images = dataset[0] if isinstance(dataset, tuple) else dataset
    if len(images) <= config.holdout:
        raise ValueError("dataset too small for the configured holdout")
    res = images.shape[-1]
    train_images, held = images[: -config.holdout], images[-config.holdout:]

    torch.manual_seed(seed)
    decoder = WatermarkDecoder(k, input_resolution=res)
    encoder = ResidualEncoder(k)
    opt = torch.optim.Adam(list(decoder.parameters()) + list(encoder.parameters()), lr=config.lr)
    g = torch.Generator().manual_seed(seed + 1)

    decoder.train()
    encoder.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(train_images), (config.batch_size,), generator=g)
        x = train_images[idx]
        bits = torch.randint(0, 2, (config.batch_size, k), generator=g).float()
        encoded = encoder(x, bits)
        attacked = encoded
        if attack_pool is not None:
            attacked, _ = sample_and_apply(attack_pool, encoded, seed=seed * 1_000_003 + step)
        logits = decoder(attacked)
        loss = message_loss(logits, bits) + config.image_weight * F.mse_loss(encoded, x)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite decoder training loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and (step + 1) % log_every == 0:
            print(f"decoder step {step + 1}/{config.steps} loss {loss.item():.4f}")

    decoder.eval()
    encoder.eval()
    eval_pool = eval_attack_pool if eval_attack_pool is not None else attack_pool

    def holdout_accuracy(attacked_eval: bool) -> float | None:
        if attacked_eval and eval_pool is None:
            return None
        g_eval = torch.Generator().manual_seed(seed + 2)
        correct = total = 0
        with torch.no_grad():
            for i in range(0, len(held), 32):
                x = held[i: i + 32]
                bits = torch.randint(0, 2, (len(x), k), generator=g_eval).float()
                enc = encoder(x, bits)
                if attacked_eval:
                    enc, _ = sample_and_apply(eval_pool, enc, seed=seed * 7_000_003 + i)
                pred = (decoder(enc) > 0).float()
                correct += float((pred == bits).sum())
                total += bits.numel()
        return correct / total

    stats = {
        "clean_accuracy": holdout_accuracy(False),
        "attacked_accuracy": holdout_accuracy(True),
        "steps": config.steps,
        "seed": seed,
        "k": k,
    }
    gate = stats["attacked_accuracy"] if attack_pool is not None else stats["clean_accuracy"]
    if config.steps > 0 and gate < config.min_accuracy:
        raise RuntimeError(
            f"decoder training missed the accuracy floor: {gate:.3f} < {config.min_accuracy} "
            f"(stats: {stats})")
    return decoder, encoder, stats
