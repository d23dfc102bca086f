"""Robustness benchmark: methods x transforms bit-accuracy matrix.

Each watermarking method exposes an embed and a blind extract closure; the
harness embeds per-image messages once, measures quality against the
originals, then decodes under every transform point. Per-cell seeds are
derived from (master seed, method, transform, image index), so cell order
or parallel evaluation cannot change results. A method crash marks its
cells failed and the run continues.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .autoencoder import QUALITY_WIDTHS, CompressionAutoencoder, toy_autoencoder_attack
from .codec import BitMessage, bit_accuracy, sample_message
from .diffusion import DiffusionModel
from .metrics import quality_metrics
from .seeds import derive_seed
from .transforms import DEFAULT_TRANSFORM_SET, TRANSFORM_POINTS, transform


@dataclass
class WatermarkMethod:
    """Embed/extract closures for one method under benchmark.

    ``embed``(images (B,3,H,W), messages (B,k) int, seed) -> watermarked
    batch; ``extract``(images) -> (B,k) int bits. Extraction must be blind.
    """

    name: str
    embed: Callable
    extract: Callable


@dataclass
class BenchReport:
    methods: list[str]
    transforms: list[str]
    accuracy: dict  # transform -> method -> float | None
    quality: dict  # method -> {psnr, ssim, linf, mse} | None
    n_images: int
    master_seed: int
    config_hash: str
    errors: dict = field(default_factory=dict)

    def average_row(self) -> dict:
        out = {}
        for m in self.methods:
            cells = [self.accuracy[t][m] for t in self.transforms]
            ok = [c for c in cells if c is not None]
            out[m] = sum(ok) / len(ok) if ok else None
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["transform"] + self.methods)
            for t in self.transforms:
                writer.writerow([t] + [_cell(self.accuracy[t][m]) for m in self.methods])
            avg = self.average_row()
            writer.writerow(["Average"] + [_cell(avg[m]) for m in self.methods])

    def to_json(self, path) -> None:
        payload = {
            "methods": self.methods,
            "transforms": self.transforms,
            "accuracy": self.accuracy,
            "average": self.average_row(),
            "quality": self.quality,
            "n_images": self.n_images,
            "master_seed": self.master_seed,
            "config_hash": self.config_hash,
            "errors": self.errors,
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def _cell(value) -> str:
    return "failed" if value is None else f"{value:.6f}"


def _config_hash(methods, transforms, n_images, k, master_seed) -> str:
    text = json.dumps({"methods": methods, "transforms": transforms, "n_images": n_images,
                       "k": k, "master_seed": master_seed}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_benchmark(methods: list[WatermarkMethod], images: torch.Tensor, k: int,
                  transform_names: list[str] | None = None, master_seed: int = 0,
                  precomputed: dict | None = None) -> BenchReport:
    """Evaluate every (method, transform) cell on the image set.

    ``precomputed`` optionally maps a method name to (watermarked, messages)
    so expensive embeddings can be reused across runs; entries absent from
    it are embedded here.
    """
    transform_names = list(transform_names or DEFAULT_TRANSFORM_SET)
    for name in transform_names:
        if name not in TRANSFORM_POINTS:
            raise ValueError(f"unknown transform label {name!r}")
    n = images.shape[0]
    accuracy: dict = {t: {} for t in transform_names}
    quality: dict = {}
    errors: dict = {}

    for method in methods:
        messages = torch.stack([
            sample_message(k, derive_seed(master_seed, "message", method.name, i)).bits
            for i in range(n)])
        try:
            if precomputed and method.name in precomputed:
                watermarked, messages = precomputed[method.name]
            else:
                watermarked = method.embed(images, messages, derive_seed(master_seed, "embed", method.name))
            quality[method.name] = _mean_quality(images, watermarked)
        except Exception as exc:  # embed failure poisons the whole column
            errors[method.name] = f"embed: {exc}"
            quality[method.name] = None
            for t in transform_names:
                accuracy[t][method.name] = None
            continue

        for t_name in transform_names:
            point = TRANSFORM_POINTS[t_name]
            try:
                attacked = torch.stack([
                    transform(point, watermarked[i],
                              seed=derive_seed(master_seed, method.name, t_name, i))
                    for i in range(n)])
                bits_hat = method.extract(attacked)
                accs = [bit_accuracy(bits_hat[i], messages[i]) for i in range(n)]
                accuracy[t_name][method.name] = sum(accs) / n
            except Exception as exc:
                errors[f"{method.name}/{t_name}"] = str(exc)
                accuracy[t_name][method.name] = None

    return BenchReport(
        methods=[m.name for m in methods],
        transforms=transform_names,
        accuracy=accuracy,
        quality=quality,
        n_images=n,
        master_seed=master_seed,
        config_hash=_config_hash([m.name for m in methods], transform_names, n, k, master_seed),
        errors=errors,
    )


def _mean_quality(originals: torch.Tensor, watermarked: torch.Tensor) -> dict:
    keys = ("psnr", "ssim", "linf", "mse")
    acc = {k: 0.0 for k in keys}
    for a, b in zip(originals, watermarked):
        m = quality_metrics(b, a)
        for k in keys:
            acc[k] += m[k]
    return {k: acc[k] / len(originals) for k in keys}


# ---------------------------------------------------------------------------
# intentional-manipulation attacks
# ---------------------------------------------------------------------------


def regeneration_attack(image: torch.Tensor, model: DiffusionModel, t_strength: float,
                        seed: int = 0) -> torch.Tensor:
    """Noise the image partway up the schedule, then denoise unconditionally."""
    if not (0.0 < t_strength < 1.0):
        raise ValueError(f"t_strength must be in (0, 1), got {t_strength}")
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    T = model.config.default_inference_steps
    step = math.ceil(t_strength * T)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        x_s = model.forward_noise(x, step, g, num_inference_steps=T)
        null = model.null_condition()
        states, _ = model.denoise_trajectory(x_s, null, null, guidance=0.0,
                                             num_inference_steps=T, start_step=step)
    out = states[0].clamp(-1.0, 1.0)
    return out.squeeze(0) if squeeze else out


def regeneration_sweep(watermarked: torch.Tensor, messages: torch.Tensor, extract: Callable,
                       model: DiffusionModel, strengths=(0.1, 0.3, 0.5), master_seed: int = 0) -> dict:
    """Mean bit accuracy after regeneration at each strength."""
    out = {}
    for s in strengths:
        attacked = regeneration_attack(watermarked, model, s, seed=derive_seed(master_seed, "regen", s))
        bits_hat = extract(attacked)
        out[s] = sum(bit_accuracy(bits_hat[i], messages[i]) for i in range(len(messages))) / len(messages)
    return out


def autoencoder_sweep(watermarked: torch.Tensor, messages: torch.Tensor, extract: Callable,
                      autoencoder: CompressionAutoencoder, levels=(1, 2, 3, 4, 5)) -> dict:
    """Mean bit accuracy after compression at each quality level."""
    out = {}
    for lvl in levels:
        attacked = toy_autoencoder_attack(watermarked, autoencoder, lvl)
        bits_hat = extract(attacked)
        out[lvl] = sum(bit_accuracy(bits_hat[i], messages[i]) for i in range(len(messages))) / len(messages)
    return out


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------

_FAMILIES = {
    "crop": ["Crop_01", "Crop_05"],
    "rotate": ["Rot_25", "Rot_90"],
    "resize": ["Resize_0.3", "Resize_0.7"],
    "brightness": ["Brightness_1.5", "Brightness_2.0"],
    "jpeg": ["JPEG_80", "JPEG_50"],
}


def load_report_csv(path) -> tuple[list[str], dict]:
    """(methods, accuracy[transform][method]) from a benchmark CSV."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    methods = header[1:]
    accuracy = {}
    for row in rows[1:]:
        accuracy[row[0]] = {
            m: (None if cell == "failed" else float(cell)) for m, cell in zip(methods, row[1:])
        }
    return methods, accuracy


def render_report_plots(csv_path, out_dir) -> list[Path]:
    """Accuracy-vs-parameter line plot per attack family, plus one bar plot
    for the single-point transforms. Returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods, accuracy = load_report_csv(csv_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    for family, labels in _FAMILIES.items():
        present = [t for t in labels if t in accuracy]
        if not present:
            continue
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        xs = [TRANSFORM_POINTS[t].param for t in present]
        for m in methods:
            ys = [accuracy[t][m] for t in present]
            if any(y is None for y in ys):
                continue
            ax.plot(xs, ys, marker="o", label=m)
        ax.set_xlabel(f"{family} parameter")
        ax.set_ylabel("bit accuracy")
        ax.set_ylim(0.0, 1.05)
        ax.set_title(f"robustness vs {family}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"plot_{family}.png"
        fig.savefig(path, dpi=110, metadata={"Software": None})
        plt.close(fig)
        written.append(path)

    singles = [t for t in ("None", "Noise", "Filter") if t in accuracy]
    if singles:
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        width = 0.8 / max(1, len(methods))
        for j, m in enumerate(methods):
            vals = [accuracy[t][m] if accuracy[t][m] is not None else 0.0 for t in singles]
            ax.bar([i + j * width for i in range(len(singles))], vals, width=width, label=m)
        ax.set_xticks([i + width * (len(methods) - 1) / 2 for i in range(len(singles))])
        ax.set_xticklabels(singles)
        ax.set_ylabel("bit accuracy")
        ax.set_ylim(0.0, 1.05)
        ax.set_title("single-point transforms")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / "plot_single_points.png"
        fig.savefig(path, dpi=110, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
