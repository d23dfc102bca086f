"""Class-conditional denoising diffusion model with deterministic DDIM sampling.

The model couples a small U-Net with learned condition tokens: each class is
captioned by a fixed number of class-specific tokens prepended with shared
context tokens, plus one learned unconditional ("null") token sequence used
for classifier-free guidance. The shared context tokens give background
pixels somewhere to put their cross-attention mass, which keeps the
foreground mask derived from these maps non-degenerate.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedule import NoiseSchedule
from .unet import AttentionBundle, CondUNet


@dataclass
class ModelConfig:
    resolution: int = 32
    base_channels: int = 32
    token_dim: int = 16
    heads: int = 2
    num_classes: int = 4
    class_tokens: int = 4
    context_tokens: int = 2
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    default_inference_steps: int = 20

    @property
    def tokens_per_condition(self) -> int:
        return self.context_tokens + self.class_tokens


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    uncond_prob: float = 0.1  # classifier-free guidance dropout


@dataclass
class ConditionEmbedding:
    """Token sequence standing in for an image caption.

    ``content_start`` marks where the class-specific tokens begin; the
    foreground mask aggregates cross-attention mass on those tokens only.
    """

    tokens: torch.Tensor  # (n_tokens, token_dim)
    is_null: bool = False
    content_start: int = 0

    def expand(self, batch: int) -> torch.Tensor:
        return self.tokens.unsqueeze(0).expand(batch, -1, -1)


@dataclass
class DenoiserOutput:
    predicted_noise: torch.Tensor
    attention: AttentionBundle | None = None


def _as_tokens(cond, batch: int) -> torch.Tensor:
    if isinstance(cond, ConditionEmbedding):
        return cond.expand(batch)
    if cond.dim() == 2:
        return cond.unsqueeze(0).expand(batch, -1, -1)
    if cond.shape[0] != batch:
        raise ValueError(f"token batch {cond.shape[0]} does not match image batch {batch}")
    return cond


class DiffusionModel(nn.Module):
    """U-Net denoiser plus learned condition/null tokens and the schedule."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.unet = CondUNet(
            resolution=config.resolution,
            base_channels=config.base_channels,
            token_dim=config.token_dim,
            heads=config.heads,
        )
        n_tok = config.tokens_per_condition
        self.class_token_table = nn.Parameter(0.2 * torch.randn(config.num_classes, config.class_tokens, config.token_dim))
        self.context_token_table = nn.Parameter(0.2 * torch.randn(config.context_tokens, config.token_dim))
        self.null_token_table = nn.Parameter(0.2 * torch.randn(n_tok, config.token_dim))
        self.schedule = NoiseSchedule.linear(config.num_train_steps, config.beta_start, config.beta_end)

    # ------------------------------------------------------------------
    # conditioning
    # ------------------------------------------------------------------

    def condition_for(self, label: int) -> ConditionEmbedding:
        if not (0 <= label < self.config.num_classes):
            raise ValueError(f"label {label} out of range [0, {self.config.num_classes})")
        tokens = torch.cat([self.context_token_table, self.class_token_table[label]], dim=0)
        return ConditionEmbedding(tokens=tokens, is_null=False, content_start=self.config.context_tokens)

    def conditions_for(self, labels: torch.Tensor) -> torch.Tensor:
        """Batched condition tokens, shape (B, n_tokens, token_dim)."""
        ctx = self.context_token_table.unsqueeze(0).expand(len(labels), -1, -1)
        return torch.cat([ctx, self.class_token_table[labels]], dim=1)

    def null_condition(self) -> ConditionEmbedding:
        return ConditionEmbedding(tokens=self.null_token_table, is_null=True,
                                  content_start=self.config.context_tokens)

    # ------------------------------------------------------------------
    # noise prediction with classifier-free guidance
    # ------------------------------------------------------------------

    def guided_noise(self, x: torch.Tensor, train_t: int, cond, null, guidance: float,
                     capture_attention: bool = False, step_index: int = 0) -> tuple[torch.Tensor, AttentionBundle | None]:
        """eps_null + g * (eps_cond - eps_null) at training timestep ``train_t``.

        g = 0 and g = 1 collapse exactly to the null / conditional branch
        (single forward pass, no floating-point residue from the formula).
        Captured attention always comes from the conditional branch.
        """
        if guidance < 0:
            raise ValueError("guidance must be >= 0")
        b = x.shape[0]
        t_vec = torch.full((b,), float(train_t), device=x.device)
        bundle = AttentionBundle(step_index=step_index) if capture_attention else None

        def cond_sink(name, is_cross, attn):
            if bundle is None:
                return
            (bundle.cross_maps if is_cross else bundle.self_maps)[name] = attn

        if guidance == 0.0:
            eps = self.unet(x, t_vec, _as_tokens(null, b))
            if capture_attention:  # maps still taken from the conditional branch
                self.unet(x, t_vec, _as_tokens(cond, b), sink=cond_sink)
            return eps, bundle
        if guidance == 1.0:
            eps = self.unet(x, t_vec, _as_tokens(cond, b), sink=cond_sink)
            return eps, bundle

        def half_sink(name, is_cross, attn):
            # conditional half of the doubled batch
            (bundle.cross_maps if is_cross else bundle.self_maps)[name] = attn[b:]

        tokens = torch.cat([_as_tokens(null, b), _as_tokens(cond, b)], dim=0)
        eps_both = self.unet(torch.cat([x, x], dim=0), torch.cat([t_vec, t_vec], dim=0), tokens,
                             sink=half_sink if capture_attention else None)
        eps_null, eps_cond = eps_both.chunk(2)
        return eps_null + guidance * (eps_cond - eps_null), bundle

    # ------------------------------------------------------------------
    # DDIM stepping (eta = 0, deterministic)
    # ------------------------------------------------------------------

    def _ddim_move(self, x: torch.Tensor, eps: torch.Tensor, ab_src: torch.Tensor, ab_dst: torch.Tensor) -> torch.Tensor:
        ab_src = ab_src.to(x.dtype)
        ab_dst = ab_dst.to(x.dtype)
        x0_pred = (x - (1.0 - ab_src).sqrt() * eps) / ab_src.sqrt()
        return ab_dst.sqrt() * x0_pred + (1.0 - ab_dst).sqrt() * eps

    def denoise_step(self, x_t: torch.Tensor, t: int, cond, null, guidance: float,
                     capture_attention: bool = False, num_inference_steps: int | None = None
                     ) -> tuple[DenoiserOutput, torch.Tensor]:
        """One DDIM step from grid index ``t`` down to ``t - 1``.

        ``t`` indexes the DDIM grid, 1-based: t = T is the deepest noise,
        t = 1 produces the clean image estimate x_0.
        """
        T = num_inference_steps or self.config.default_inference_steps
        if not (1 <= t <= T):
            raise ValueError(f"t must be in [1, {T}], got {t}")
        squeeze = x_t.dim() == 3
        if squeeze:
            x_t = x_t.unsqueeze(0)
        taus = self.schedule.ddim_timesteps(T)
        tau_t = taus[t - 1]
        tau_prev = taus[t - 2] if t >= 2 else -1
        eps, bundle = self.guided_noise(x_t, tau_t, cond, null, guidance,
                                        capture_attention=capture_attention, step_index=t)
        x_prev = self._ddim_move(x_t, eps, self.schedule.alpha_bar(tau_t), self.schedule.alpha_bar(tau_prev))
        if squeeze:
            eps, x_prev = eps.squeeze(0), x_prev.squeeze(0)
        return DenoiserOutput(predicted_noise=eps, attention=bundle), x_prev

    def denoise_trajectory(self, x_start: torch.Tensor, cond, null_schedule, guidance: float,
                           capture_attention: bool = False, num_inference_steps: int | None = None,
                           start_step: int | None = None
                           ) -> tuple[list[torch.Tensor], list[AttentionBundle] | None]:
        """DDIM-denoise from grid step ``start_step`` down to the clean image.

        ``null_schedule`` is either a single null condition shared by all
        steps or a sequence with one entry per step (index t-1 for step t).
        Returns states ordered ``[x_0, ..., x_start]`` plus per-step
        attention bundles (deepest step first) when capture is on.
        """
        T = num_inference_steps or self.config.default_inference_steps
        s = T if start_step is None else start_step
        if not (0 <= s <= T):
            raise ValueError(f"start_step must be in [0, {T}]")
        per_step = isinstance(null_schedule, (list, tuple))
        if per_step and len(null_schedule) not in (1, T):
            raise ValueError(f"null_schedule must have 1 or {T} entries, got {len(null_schedule)}")
        states = [x_start]
        bundles: list[AttentionBundle] = []
        x = x_start
        for t in range(s, 0, -1):
            null_t = null_schedule[t - 1] if per_step and len(null_schedule) > 1 else (
                null_schedule[0] if per_step else null_schedule)
            out, x = self.denoise_step(x, t, cond, null_t, guidance,
                                       capture_attention=capture_attention, num_inference_steps=T)
            states.append(x)
            if capture_attention:
                bundles.append(out.attention)
        states.reverse()  # canonical order x_0 ... x_start
        return states, (bundles if capture_attention else None)

    def invert_step(self, x: torch.Tensor, t: int, cond, null, guidance: float,
                    num_inference_steps: int | None = None) -> torch.Tensor:
        """Reversed DDIM update moving x from grid level t-1 up to level t."""
        T = num_inference_steps or self.config.default_inference_steps
        if not (1 <= t <= T):
            raise ValueError(f"t must be in [1, {T}], got {t}")
        taus = self.schedule.ddim_timesteps(T)
        tau_t = taus[t - 1]
        tau_prev = taus[t - 2] if t >= 2 else -1
        eps, _ = self.guided_noise(x, tau_t, cond, null, guidance)
        return self._ddim_move(x, eps, self.schedule.alpha_bar(tau_prev), self.schedule.alpha_bar(tau_t))

    def forward_noise(self, x0: torch.Tensor, step: int, generator: torch.Generator,
                      num_inference_steps: int | None = None) -> torch.Tensor:
        """Sample q(x_step | x_0) at DDIM grid index ``step`` (1-based)."""
        T = num_inference_steps or self.config.default_inference_steps
        taus = self.schedule.ddim_timesteps(T)
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        return self.schedule.add_noise(x0, noise, taus[step - 1])

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def save_checkpoint(self, path, seed: int | None = None, train_stats: dict | None = None) -> None:
        payload = {
            "format": "noisemark-diffusion-v1",
            "config": asdict(self.config),
            "state_dict": self.state_dict(),
            "seed": seed,
            "train_stats": train_stats or {},
        }
        torch.save(payload, path)

    @classmethod
    def load_checkpoint(cls, path) -> "DiffusionModel":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format") != "noisemark-diffusion-v1":
            raise ValueError(f"not a diffusion checkpoint: {path}")
        model = cls(ModelConfig(**payload["config"]))
        model.load_state_dict(payload["state_dict"])
        model.eval()
        return model

    def weights_checksum(self) -> str:
        buf = io.BytesIO()
        torch.save([(k, v) for k, v in sorted(self.state_dict().items())], buf)
        import hashlib

        return hashlib.sha256(buf.getvalue()).hexdigest()


def _noise_mse(model: DiffusionModel, images: torch.Tensor, labels: torch.Tensor, seed: int) -> float:
    """Noise-prediction MSE on a fixed probe batch (fixed noise/timesteps)."""
    g = torch.Generator().manual_seed(seed)
    n = min(64, len(images))
    t = torch.randint(0, model.config.num_train_steps, (n,), generator=g)
    noise = torch.randn(images[:n].shape, generator=g)
    ab = model.schedule.alphas_cumprod[t].to(images.dtype)[:, None, None, None]
    x_t = ab.sqrt() * images[:n] + (1 - ab).sqrt() * noise
    with torch.no_grad():
        eps = model.unet(x_t, t.float(), model.conditions_for(labels[:n]))
    return float(F.mse_loss(eps, noise))


def train_toy_model(dataset: tuple[torch.Tensor, torch.Tensor], model_config: ModelConfig,
                    train_config: TrainConfig, seed: int = 0,
                    log_every: int = 0) -> tuple[DiffusionModel, dict]:
    """Train the denoiser on a labeled toy corpus.

    Returns the trained model and a stats dict holding the probe-batch
    noise MSE at initialization and at the end of training.
    """
    images, labels = dataset
    if len(images) == 0:
        raise ValueError("dataset is empty")
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected images of shape (N, 3, H, W), got {tuple(images.shape)}")
    if images.shape[-1] != model_config.resolution or images.shape[-2] != model_config.resolution:
        raise ValueError(
            f"dataset resolution {tuple(images.shape[-2:])} does not match model resolution {model_config.resolution}")
    if int(labels.max()) >= model_config.num_classes:
        raise ValueError("label out of range for configured num_classes")

    torch.manual_seed(seed)
    model = DiffusionModel(model_config)
    initial_mse = _noise_mse(model, images, labels, seed)

    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    g = torch.Generator().manual_seed(seed + 1)
    model.train()
    for step in range(train_config.steps):
        idx = torch.randint(0, len(images), (train_config.batch_size,), generator=g)
        x0 = images[idx]
        t = torch.randint(0, model_config.num_train_steps, (train_config.batch_size,), generator=g)
        noise = torch.randn(x0.shape, generator=g)
        ab = model.schedule.alphas_cumprod[t].to(x0.dtype)[:, None, None, None]
        x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * noise

        tokens = model.conditions_for(labels[idx])
        drop = torch.rand(train_config.batch_size, generator=g) < train_config.uncond_prob
        if drop.any():
            tokens = torch.where(drop[:, None, None], model.null_token_table.unsqueeze(0), tokens)

        loss = F.mse_loss(model.unet(x_t, t.float(), tokens), noise)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite training loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}/{train_config.steps} loss {loss.item():.4f}")

    model.eval()
    final_mse = _noise_mse(model, images, labels, seed)
    stats = {"initial_noise_mse": initial_mse, "final_noise_mse": final_mse,
             "steps": train_config.steps, "seed": seed}
    return model, stats
