"""Watermark embedding by optimizing inversion noise.

The pipeline inverts the image, optimizes the per-step null tokens, freezes
a reference copy of the noise together with its self-attention maps and
cross-attention foreground mask, and then runs first-order optimization on
the noise itself: each iteration denoises, blends through the mask, pushes
the result through one sampled corruption, and descends a weighted sum of
decode error, self-attention drift, and masked pixel distance.

Everything is batched over images; per-image messages and per-image
attention maps keep the optimization independent across the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .attacks import AttackPool, AttackSpec, apply as apply_attack, sample_spec
from .codec import BitMessage, WatermarkDecoder
from .diffusion import DiffusionModel, _as_tokens
from .inversion import LatentTrajectory, ddim_invert, null_text_optimize
from .seeds import derive_seed
from .unet import AttentionBundle


@dataclass
class PseudoMask:
    """Foreground mask from aggregated cross-attention.

    ``soft`` is (B, 1, H, W) in [0, 1] with per-image maximum 1; ``hard``
    binarizes it at a strict 0.5 threshold when requested. ``source_map``
    keeps the un-normalized aggregate for diagnostics.
    """

    soft: torch.Tensor
    hard: torch.Tensor | None
    upsampling_mode: str
    source_map: torch.Tensor


@dataclass
class EmbedConfig:
    alpha: float = 100.0
    beta: float = 80.0
    gamma: float = 20.0
    iterations: int = 120
    lr: float = 1e-2
    mask_mode: str = "soft"  # none | soft | hard
    upsampling: str = "bilinear"  # nearest | bilinear
    guidance: float = 4.5
    num_inference_steps: int | None = None
    attack_pool: AttackPool | None = None
    null_inner_iters: int = 10
    null_lr: float = 1e-2

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.mask_mode not in ("none", "soft", "hard"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.upsampling not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsampling {self.upsampling!r}")


@dataclass
class EmbedResult:
    watermarked_image: torch.Tensor
    optimized_noise: torch.Tensor
    loss_history: list[dict]
    mask: PseudoMask | None
    clean_bit_accuracy: float
    per_image_accuracy: list[float]
    messages: torch.Tensor  # (B, k)
    attack_log: list[AttackSpec] = field(default_factory=list)
    trajectory: LatentTrajectory | None = None
    failed: bool = False


# ---------------------------------------------------------------------------
# pseudo mask
# ---------------------------------------------------------------------------


def compute_pseudo_mask(bundles: list[AttentionBundle], content_start: int, target_resolution: int,
                        upsampling: str = "bilinear", harden: bool = False, is_null: bool = False) -> PseudoMask:
    """Aggregate cross-attention mass on the class tokens into a mask.

    For every captured cross-attention layer the mass each spatial position
    assigns to the class-specific tokens is averaged over heads and steps;
    per-resolution averages are upsampled to the image grid, averaged, and
    normalized by their per-image maximum. Hardening applies the strict
    0.5 threshold.
    """
    if is_null:
        raise ValueError("cannot build a foreground mask from the null condition (degenerate attention)")
    if not bundles or not bundles[0].cross_maps:
        raise ValueError("no cross-attention maps captured; denoise with capture_attention=True")
    if upsampling not in ("nearest", "bilinear"):
        raise ValueError(f"unknown upsampling {upsampling!r}")

    per_layer: dict[str, torch.Tensor] = {}
    counts: dict[str, int] = {}
    for bundle in bundles:
        for name, attn in bundle.cross_maps.items():
            mass = attn[..., content_start:].sum(dim=-1).mean(dim=1)  # (B, N): mean over heads
            per_layer[name] = per_layer.get(name, 0) + mass
            counts[name] = counts.get(name, 0) + 1

    by_res: dict[int, list[torch.Tensor]] = {}
    for name, total in per_layer.items():
        mean_map = total / counts[name]
        n = mean_map.shape[-1]
        res = int(round(n ** 0.5))
        if res * res != n:
            raise ValueError(f"cross-attention map of layer {name} is not square ({n} positions)")
        by_res.setdefault(res, []).append(mean_map.reshape(-1, 1, res, res))

    upsampled = []
    for res, maps in by_res.items():
        avg = torch.stack(maps).mean(dim=0)
        if res != target_resolution:
            if upsampling == "bilinear":
                avg = F.interpolate(avg, size=(target_resolution, target_resolution),
                                    mode="bilinear", align_corners=False)
            else:
                avg = F.interpolate(avg, size=(target_resolution, target_resolution), mode="nearest")
        upsampled.append(avg)
    p = torch.stack(upsampled).mean(dim=0)

    peak = p.amax(dim=(1, 2, 3), keepdim=True)
    if (peak <= 0).any():
        raise ValueError("cross-attention aggregate is identically zero; cannot normalize the mask")
    soft = (p / peak).clamp(0.0, 1.0)
    hard = (soft > 0.5).to(soft.dtype) if harden else None
    return PseudoMask(soft=soft.detach(), hard=hard.detach() if hard is not None else None,
                      upsampling_mode=upsampling, source_map=p.detach())


def blend_with_mask(x_hat: torch.Tensor, x0: torch.Tensor, mask: PseudoMask | None,
                    mask_mode: str = "soft") -> torch.Tensor:
    """x_hat * M + x0 * (1 - M); M = 1 when masking is off.

    The literal product form keeps the extremes exact: pixels with M = 0
    are bitwise the originals, pixels with M = 1 are bitwise x_hat.
    """
    if mask is None or mask_mode == "none":
        return x_hat
    m = mask.hard if mask_mode == "hard" else mask.soft
    if m is None:
        raise ValueError("hard blending requested but the mask was not hardened")
    return x_hat * m + x0 * (1.0 - m)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def loss_decode(image: torch.Tensor, decoder: WatermarkDecoder, message) -> torch.Tensor:
    """Squared error between sigmoid(decoder logits) and the target bits.

    Summed over bits, averaged over the batch; differentiable in the image.
    """
    bits = message.as_float() if isinstance(message, BitMessage) else torch.as_tensor(message, dtype=torch.float32)
    logits = decoder(image if image.dim() == 4 else image.unsqueeze(0))
    if bits.dim() == 1:
        bits = bits.unsqueeze(0).expand(logits.shape[0], -1)
    if bits.shape[-1] != decoder.k:
        raise ValueError(f"message length {bits.shape[-1]} does not match decoder k={decoder.k}")
    return (torch.sigmoid(logits) - bits).pow(2).sum(dim=-1).mean()


def loss_self_attention(bundles: list[AttentionBundle], bundles_fix: list[AttentionBundle]) -> torch.Tensor:
    """Sum of squared differences over all self-attention maps at all steps."""
    if len(bundles) != len(bundles_fix):
        raise ValueError(f"bundle count mismatch: {len(bundles)} vs {len(bundles_fix)}")
    total = None
    for cur, ref in zip(bundles, bundles_fix):
        if cur.step_index != ref.step_index or set(cur.self_maps) != set(ref.self_maps):
            raise ValueError("self-attention bundle structure mismatch")
        for name, attn in cur.self_maps.items():
            if attn.shape != ref.self_maps[name].shape:
                raise ValueError(f"self-attention map {name} shape mismatch")
            diff = (attn - ref.self_maps[name]).pow(2).flatten(1).sum(dim=1)
            total = diff if total is None else total + diff
    if total is None:
        raise ValueError("no self-attention maps captured")
    return total.mean()


def loss_mse_masked(x_hat: torch.Tensor, x0: torch.Tensor, mask: PseudoMask | None,
                    mask_mode: str = "soft") -> tuple[torch.Tensor, torch.Tensor]:
    """L2 norm (not squared) between the mask blend and the original."""
    if x_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x0.shape)}")
    blended = blend_with_mask(x_hat, x0, mask, mask_mode)
    flat = (blended - x0).flatten(1) if blended.dim() == 4 else (blended - x0).flatten().unsqueeze(0)
    return flat.pow(2).sum(dim=1).sqrt().mean(), blended


# ---------------------------------------------------------------------------
# the embedding loop
# ---------------------------------------------------------------------------


def _as_bits(message, batch: int, k: int, seed: int) -> torch.Tensor:
    from .codec import sample_message

    if message is None:
        rows = [sample_message(k, derive_seed(seed, "message", i)).as_float() for i in range(batch)]
        return torch.stack(rows)
    if isinstance(message, BitMessage):
        return message.as_float().unsqueeze(0).expand(batch, -1).clone()
    bits = torch.as_tensor(message, dtype=torch.float32)
    return bits.unsqueeze(0).expand(batch, -1).clone() if bits.dim() == 1 else bits


def embed(model: DiffusionModel, x0: torch.Tensor, cond, decoder: WatermarkDecoder,
          config: EmbedConfig | None = None, message=None, seed: int = 0,
          trajectory: LatentTrajectory | None = None, log_every: int = 0) -> EmbedResult:
    """Embed per-image bit messages by optimizing the inversion noise.

    ``x0`` may be one image or a batch; ``cond`` is a ConditionEmbedding or
    per-image token tensor. A precomputed ``trajectory`` (from ddim_invert +
    null_text_optimize) skips the inversion stage. Only the noise tensor is
    optimized; model, decoder, and null tokens stay frozen.
    """
    config = config or EmbedConfig()
    squeeze = x0.dim() == 3
    if squeeze:
        x0 = x0.unsqueeze(0)
    x0 = x0.detach()
    batch = x0.shape[0]
    T = config.num_inference_steps or model.config.default_inference_steps
    cond_tokens = _as_tokens(cond, batch).detach()
    bits = _as_bits(message, batch, decoder.k, seed)
    if bits.shape != (batch, decoder.k):
        raise ValueError(f"need one {decoder.k}-bit message per image, got {tuple(bits.shape)}")

    # stage 1: inversion pivot + null-token optimization
    if trajectory is None:
        pivot = ddim_invert(model, x0, cond_tokens, guidance=1.0, num_inference_steps=T)
        trajectory = null_text_optimize(model, pivot, guidance=config.guidance,
                                        inner_iters=config.null_inner_iters, lr=config.null_lr)
    elif trajectory.num_steps != T:
        raise ValueError("provided trajectory step count does not match the embed config")

    # stage 2: frozen reference pass (self-attention targets + mask source)
    with torch.no_grad():
        states_fix, bundles_fix = model.denoise_trajectory(
            trajectory.states[-1], cond_tokens, trajectory.null_embeddings, config.guidance,
            capture_attention=True, num_inference_steps=T)
    mask = None
    if config.mask_mode != "none":
        content_start = cond.content_start if hasattr(cond, "content_start") else trajectory.cond_content_start
        mask = compute_pseudo_mask(bundles_fix, content_start, model.config.resolution,
                                   upsampling=config.upsampling, harden=config.mask_mode == "hard",
                                   is_null=getattr(cond, "is_null", False))

    # stage 3: first-order optimization of the noise itself.
    # Model and decoder weights are frozen for the duration so the autograd
    # graph holds only the path from the noise to the loss.
    frozen = [p for p in list(model.parameters()) + list(decoder.parameters()) if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    nulls = [phi.detach() for phi in trajectory.null_embeddings]
    noise = trajectory.states[-1].detach().clone().requires_grad_(True)
    opt = torch.optim.AdamW([noise], lr=config.lr, weight_decay=0.0)
    capture = config.beta > 0
    history: list[dict] = []
    attack_log: list[AttackSpec] = []

    try:
        for it in range(config.iterations):
            states, bundles = model.denoise_trajectory(
                noise, cond_tokens, nulls, config.guidance,
                capture_attention=capture, num_inference_steps=T)
            x_hat = states[0]

            l_mse_t, blended = loss_mse_masked(x_hat, x0, mask, config.mask_mode)
            if config.attack_pool is not None:
                spec = sample_spec(config.attack_pool, derive_seed(seed, "attack", it))
                attacked = apply_attack(spec, blended)
            else:
                spec = AttackSpec("identity", seed=derive_seed(seed, "attack", it))
                attacked = blended
            attack_log.append(spec)

            zero = x_hat.new_zeros(())
            l_dec_t = loss_decode(attacked, decoder, bits) if config.alpha > 0 else zero
            l_sa_t = loss_self_attention(bundles, bundles_fix) if config.beta > 0 else zero
            if config.gamma == 0:
                l_mse_t = zero
            total_t = config.alpha * l_dec_t + config.beta * l_sa_t + config.gamma * l_mse_t
            if not torch.isfinite(total_t):
                raise RuntimeError(f"non-finite embedding loss at iteration {it}")

            l_dec = float(l_dec_t.detach())
            l_sa = float(l_sa_t.detach())
            l_mse = float(l_mse_t.detach())
            history.append({
                "decode": l_dec,
                "self_attention": l_sa,
                "mse": l_mse,
                "total": config.alpha * l_dec + config.beta * l_sa + config.gamma * l_mse,
            })
            opt.zero_grad()
            total_t.backward()
            opt.step()
            if log_every and (it + 1) % log_every == 0:
                print(f"embed iter {it + 1}/{config.iterations}: " +
                      ", ".join(f"{k}={v:.4f}" for k, v in history[-1].items()))
    finally:
        for p in frozen:
            p.requires_grad_(True)

    # stage 4: final watermarked image and clean decoding
    with torch.no_grad():
        states, _ = model.denoise_trajectory(
            noise.detach(), cond_tokens, nulls, config.guidance,
            capture_attention=False, num_inference_steps=T)
        watermarked = blend_with_mask(states[0], x0, mask, config.mask_mode)
        logits = decoder(watermarked)
        hard = (logits > 0).float()
        per_image = [float((hard[i] == bits[i]).float().mean()) for i in range(batch)]
    clean_acc = sum(per_image) / batch

    return EmbedResult(
        watermarked_image=watermarked.squeeze(0) if squeeze else watermarked,
        optimized_noise=noise.detach().squeeze(0) if squeeze else noise.detach(),
        loss_history=history,
        mask=mask,
        clean_bit_accuracy=clean_acc,
        per_image_accuracy=per_image,
        messages=bits.to(torch.int64),
        attack_log=attack_log,
        trajectory=trajectory,
        failed=clean_acc < 0.5 and config.iterations > 0,
    )
