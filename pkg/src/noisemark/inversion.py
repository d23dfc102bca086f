"""DDIM inversion and per-step null-token optimization.

Inversion maps a clean image to a noise state by running the deterministic
DDIM update in reverse, producing a pivot trajectory. The null-token pass
then optimizes the unconditional embedding separately at each step so that
guided denoising tracks that pivot, which is what makes the later noise
optimization start from a faithful reconstruction.

All entry points accept batched images (B, 3, H, W); a single image is a
batch of one. Null embeddings are optimized per image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .diffusion import ConditionEmbedding, DiffusionModel, _as_tokens


@dataclass
class LatentTrajectory:
    """States x_0 ... x_T of one inversion, plus per-step null embeddings.

    ``states[0]`` is the clean image, ``states[-1]`` the deepest noise.
    ``null_embeddings[t-1]`` belongs to DDIM step t and has shape
    (B, n_tokens, token_dim). ``guidance`` is the scale reconstruction uses.
    """

    states: list[torch.Tensor]
    null_embeddings: list[torch.Tensor]
    guidance: float
    cond_tokens: torch.Tensor
    cond_content_start: int = 0
    step_losses: list[tuple[float, float]] = field(default_factory=list)  # (initial, final) per step, deep first

    def __post_init__(self):
        if self.null_embeddings and len(self.null_embeddings) != len(self.states) - 1:
            raise ValueError("null_embeddings must have one entry per DDIM step")
        for s in self.states:
            if not torch.isfinite(s).all():
                raise ValueError("trajectory contains non-finite states")

    @property
    def num_steps(self) -> int:
        return len(self.states) - 1

    def save(self, path, model_checksum: str = "") -> None:
        torch.save(
            {
                "format": "noisemark-trajectory-v1",
                "states": [s.clone() for s in self.states],
                "null_embeddings": [p.clone() for p in self.null_embeddings],
                "guidance": self.guidance,
                "cond_tokens": self.cond_tokens.clone(),
                "cond_content_start": self.cond_content_start,
                "step_losses": self.step_losses,
                "model_checksum": model_checksum,
            },
            path,
        )

    @classmethod
    def load(cls, path, expect_checksum: str | None = None) -> "LatentTrajectory":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format") != "noisemark-trajectory-v1":
            raise ValueError(f"not a trajectory archive: {path}")
        if expect_checksum is not None and payload["model_checksum"] != expect_checksum:
            raise ValueError("trajectory was produced by a different model checkpoint")
        return cls(
            states=payload["states"],
            null_embeddings=payload["null_embeddings"],
            guidance=payload["guidance"],
            cond_tokens=payload["cond_tokens"],
            cond_content_start=payload["cond_content_start"],
            step_losses=payload["step_losses"],
        )


def _check_image(model: DiffusionModel, x0: torch.Tensor) -> torch.Tensor:
    if x0.dim() == 3:
        x0 = x0.unsqueeze(0)
    r = model.config.resolution
    if x0.shape[-2:] != (r, r) or x0.shape[1] != 3:
        raise ValueError(f"expected (B, 3, {r}, {r}) input, got {tuple(x0.shape)}")
    if not torch.isfinite(x0).all():
        raise ValueError("input image has non-finite values")
    if x0.min() < -1.001 or x0.max() > 1.001:
        raise ValueError("input image must be scaled to [-1, 1]")
    return x0


@torch.no_grad()
def ddim_invert(model: DiffusionModel, x0: torch.Tensor, cond, guidance: float = 1.0,
                num_inference_steps: int | None = None) -> LatentTrajectory:
    """Reverse-DDIM a clean image into its pivot trajectory x_0 ... x_T."""
    x0 = _check_image(model, x0)
    T = num_inference_steps if num_inference_steps is not None else model.config.default_inference_steps
    cond_tokens = _as_tokens(cond, x0.shape[0])
    null = model.null_condition()
    states = [x0]
    x = x0
    for t in range(1, T + 1):
        x = model.invert_step(x, t, cond_tokens, null, guidance, num_inference_steps=T)
        states.append(x)
    nulls = [null.expand(x0.shape[0]).clone() for _ in range(T)]
    content_start = cond.content_start if isinstance(cond, ConditionEmbedding) else model.config.context_tokens
    return LatentTrajectory(states=states, null_embeddings=nulls, guidance=guidance,
                            cond_tokens=cond_tokens.detach().clone(), cond_content_start=content_start)


def null_text_optimize(model: DiffusionModel, pivot: LatentTrajectory, cond=None, guidance: float = 4.5,
                       inner_iters: int = 10, lr: float = 1e-2, early_stop: float = 1e-5,
                       max_halvings: int = 3) -> LatentTrajectory:
    """Optimize per-step null tokens so guided denoising follows the pivot.

    Plain gradient descent on each step's reconstruction error with a
    halving backtrack: a step that would increase the error is retried at
    half the rate (up to ``max_halvings``) and dropped if still worse, so
    the per-step loss never goes up. Model weights and condition tokens
    are left untouched.
    """
    if inner_iters < 1:
        raise ValueError("inner_iters must be >= 1")
    T = pivot.num_steps
    batch = pivot.states[0].shape[0]
    cond_tokens = (pivot.cond_tokens if cond is None else _as_tokens(cond, batch)).detach()

    # only phi receives gradients; freezing the weights keeps the graph lean
    frozen = [p for p in model.parameters() if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)

    x_cur = pivot.states[T]
    optimized: list[torch.Tensor] = [None] * T
    losses: list[tuple[float, float]] = []
    phi = pivot.null_embeddings[T - 1].detach().clone()

    def step_loss(phi_t: torch.Tensor, x_t: torch.Tensor, target: torch.Tensor, t: int) -> torch.Tensor:
        _, x_prev = model.denoise_step(x_t, t, cond_tokens, phi_t, guidance)
        return (x_prev - target).pow(2).flatten(1).mean(dim=1)

    try:
        for t in range(T, 0, -1):
            target = pivot.states[t - 1]
            lr_vec = torch.full((batch,), lr)
            active = torch.ones(batch, dtype=torch.bool)
            with torch.no_grad():
                loss_vec = step_loss(phi, x_cur, target, t)
            initial = loss_vec.clone()
            for _ in range(inner_iters):
                active = active & (loss_vec > early_stop)
                if not active.any():
                    break
                phi_var = phi.detach().requires_grad_(True)
                cur = step_loss(phi_var, x_cur, target, t)
                (grad,) = torch.autograd.grad(cur.sum(), phi_var)
                with torch.no_grad():
                    for _ in range(max_halvings + 1):
                        trial = phi - (lr_vec * active)[:, None, None] * grad
                        trial_loss = step_loss(trial, x_cur, target, t)
                        worse = active & (trial_loss > loss_vec)
                        if not worse.any():
                            break
                        lr_vec = torch.where(worse, lr_vec * 0.5, lr_vec)
                    improved = active & (trial_loss <= loss_vec)
                    phi = torch.where(improved[:, None, None], trial, phi)
                    loss_vec = torch.where(improved, trial_loss, loss_vec)
                if not torch.isfinite(loss_vec).all():
                    raise RuntimeError(f"non-finite null-text loss at step {t}")
            losses.append((float(initial.mean()), float(loss_vec.mean())))
            optimized[t - 1] = phi.detach().clone()
            with torch.no_grad():  # pivot chaining: next step starts from the optimized output
                _, x_cur = model.denoise_step(x_cur, t, cond_tokens, phi, guidance)
    finally:
        for p in frozen:
            p.requires_grad_(True)

    return LatentTrajectory(states=list(pivot.states), null_embeddings=optimized, guidance=guidance,
                            cond_tokens=pivot.cond_tokens, cond_content_start=pivot.cond_content_start,
                            step_losses=losses)


@torch.no_grad()
def reconstruct(model: DiffusionModel, traj: LatentTrajectory, capture_attention: bool = False):
    """Denoise the trajectory's deepest state through its null schedule.

    Returns the reconstructed image batch, or (image, bundles) when
    attention capture is requested.
    """
    if not traj.null_embeddings:
        raise ValueError("trajectory has no null embeddings (T=0 or stripped archive)")
    states, bundles = model.denoise_trajectory(
        traj.states[-1], traj.cond_tokens, traj.null_embeddings, traj.guidance,
        capture_attention=capture_attention, num_inference_steps=traj.num_steps)
    return (states[0], bundles) if capture_attention else states[0]
