"""Variance schedule for the denoising diffusion model.

A linear beta schedule over ``num_train_steps`` discrete timesteps, with the
cumulative alpha products that both forward noising and DDIM stepping are
expressed in. Inference subsamples the training grid to ``T`` DDIM steps by
even striding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class NoiseSchedule:
    """Beta increments and cumulative alpha products of a diffusion process.

    ``alphas_cumprod[t]`` is the running product of ``(1 - betas[i])`` for
    ``i <= t``; it is strictly decreasing and stays in (0, 1].
    """

    num_train_steps: int
    betas: torch.Tensor
    alphas_cumprod: torch.Tensor = field(init=False)

    def __post_init__(self):
        if self.num_train_steps <= 0:
            raise ValueError(f"num_train_steps must be positive, got {self.num_train_steps}")
        if self.betas.shape != (self.num_train_steps,):
            raise ValueError(
                f"betas must have shape ({self.num_train_steps},), got {tuple(self.betas.shape)}"
            )
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.betas = self.betas.to(torch.float64)
        self.alphas_cumprod = torch.cumprod(1.0 - self.betas, dim=0)

    @classmethod
    def linear(cls, num_train_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = torch.linspace(beta_start, beta_end, num_train_steps, dtype=torch.float64)
        return cls(num_train_steps=num_train_steps, betas=betas)

    def alpha_bar(self, t: int | torch.Tensor) -> torch.Tensor:
        """``alphas_cumprod[t]`` with t = -1 mapping to 1.0 (the clean image)."""
        if isinstance(t, int):
            if t == -1:
                return torch.tensor(1.0, dtype=torch.float64)
            return self.alphas_cumprod[t]
        out = torch.where(
            torch.as_tensor(t) >= 0,
            self.alphas_cumprod[torch.clamp(torch.as_tensor(t), min=0)],
            torch.tensor(1.0, dtype=torch.float64),
        )
        return out

    def ddim_timesteps(self, num_inference_steps: int) -> list[int]:
        """Evenly strided training timesteps used as the DDIM grid.

        Returns ``T`` indices increasing from low to high noise, the last one
        being the final training step. ``T = 0`` returns an empty grid.
        """
        if num_inference_steps < 0:
            raise ValueError("num_inference_steps must be >= 0")
        if num_inference_steps == 0:
            return []
        if num_inference_steps > self.num_train_steps:
            raise ValueError("cannot run more DDIM steps than training steps")
        stride = self.num_train_steps / num_inference_steps
        return [round((i + 1) * stride) - 1 for i in range(num_inference_steps)]

    def add_noise(self, x0: torch.Tensor, noise: torch.Tensor, t: int) -> torch.Tensor:
        """Forward-noise ``x0`` to training timestep ``t`` (q(x_t | x_0))."""
        ab = self.alpha_bar(t).to(x0.dtype)
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise

    def state_dict(self) -> dict:
        return {"num_train_steps": self.num_train_steps, "betas": self.betas.clone()}

    @classmethod
    def from_state_dict(cls, state: dict) -> "NoiseSchedule":
        return cls(num_train_steps=int(state["num_train_steps"]), betas=state["betas"])
