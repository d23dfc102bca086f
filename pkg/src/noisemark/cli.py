"""Command-line entry points.

Every subcommand loads a JSON run config, executes one pipeline stage, and
always writes a run manifest into the output directory, marking the failing
stage on error. Exit codes: 0 ok, 1 runtime failure, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from . import __version__
from .attacks import AttackSpec, apply as apply_attack
from .autoencoder import CompressionAutoencoder, train_autoencoder
from .bench import WatermarkMethod, render_report_plots, run_benchmark
from .codec import BitMessage, WatermarkDecoder, bit_accuracy, sample_message, train_decoder
from .config import ConfigError, RunConfig, build_config, load_config
from .data import make_dataset
from .diffusion import DiffusionModel, train_toy_model
from .dwtdct import dwtdct_embed, dwtdct_extract
from .embedder import embed as embed_images
from .fileio import load_message, load_png, save_message, save_png
from .inversion import ddim_invert, null_text_optimize, reconstruct
from .manifest import RunManifest, config_hash
from .metrics import quality_metrics
from .seeds import derive_seed
from .transforms import TRANSFORM_POINTS, transform


def _output_dir(config: RunConfig, override: str | None) -> Path:
    root = os.environ.get("NOISEMARK_OUTPUT_ROOT", "")
    out = Path(override or config.output_dir)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eval_set(config: RunConfig):
    """Evaluation images disjoint from the training prefix of the corpus."""
    n = config.dataset.n_images + config.eval.n_images
    images, labels = make_dataset(n, config.dataset.resolution, seed=config.dataset.seed)
    return images[-config.eval.n_images:], labels[-config.eval.n_images:]


def _load_model(config: RunConfig) -> DiffusionModel:
    return DiffusionModel.load_checkpoint(config.model_checkpoint)


def _load_decoder(config: RunConfig) -> WatermarkDecoder:
    return WatermarkDecoder.load_checkpoint(config.decoder_checkpoint)


# ---------------------------------------------------------------------------
# subcommand bodies (each returns a metrics dict for the manifest)
# ---------------------------------------------------------------------------


def _cmd_train_model(config: RunConfig, out: Path, manifest: RunManifest, args) -> dict:
    dataset = make_dataset(config.dataset.n_images, config.dataset.resolution, seed=config.dataset.seed)
    model, stats = train_toy_model(dataset, config.model, config.train_model,
                                   seed=derive_seed(config.master_seed, "train-model"),
                                   log_every=args.log_every)
    path = manifest.add_output(out / "diffusion.pt")
    model.save_checkpoint(path, seed=config.master_seed, train_stats=stats)
    manifest.add_checkpoint("diffusion", path)
    return stats


def _cmd_train_decoder(config: RunConfig, out: Path, manifest: RunManifest, args) -> dict:
    images, _ = make_dataset(config.dataset.n_images, config.dataset.resolution, seed=config.dataset.seed)
    decoder, _, stats = train_decoder(images, config.k, attack_pool=config.attack_pool,
                                      config=config.train_decoder,
                                      seed=derive_seed(config.master_seed, "train-decoder"),
                                      log_every=args.log_every)
    path = manifest.add_output(out / "decoder.pt")
    decoder.save_checkpoint(path, seed=config.master_seed, train_stats=stats)
    manifest.add_checkpoint("decoder", path)
    return stats


def _cmd_train_autoencoder(config: RunConfig, out: Path, manifest: RunManifest, args) -> dict:
    images, _ = make_dataset(config.dataset.n_images, config.dataset.resolution, seed=config.dataset.seed)
    model, stats = train_autoencoder(images, config.train_autoencoder,
                                     seed=derive_seed(config.master_seed, "train-autoencoder"),
                                     log_every=args.log_every)
    path = manifest.add_output(out / "autoencoder.pt")
    model.save_checkpoint(path, seed=config.master_seed, train_stats=stats)
    manifest.add_checkpoint("autoencoder", path)
    return stats


def _cmd_invert(config: RunConfig, out: Path, manifest: RunManifest, args) -> dict:
    model = _load_model(config)
    manifest.add_checkpoint("diffusion", config.model_checkpoint)
    images, labels = _eval_set(config)
    n = min(args.n or config.eval.n_images, len(images))
    images, labels = images[:n], labels[:n]
    cond = model.conditions_for(labels)
    pivot = ddim_invert(model, images, cond, guidance=1.0,
                        num_inference_steps=config.embed.num_inference_steps
                        or model.config.default_inference_steps)
    traj = null_text_optimize(model, pivot, guidance=config.embed.guidance,
                              inner_iters=config.embed.null_inner_iters, lr=config.embed.null_lr)
    recon = reconstruct(model, traj)
    psnrs = [quality_metrics(recon[i], images[i])["psnr"] for i in range(n)]
    traj.save(manifest.add_output(out / "trajectory.pt"), model_checksum=model.weights_checksum())
    for i in range(n):
        save_png(recon[i], manifest.add_output(out / f"recon_{i:03d}.png"))
    return {"reconstruction_psnr": psnrs, "mean_psnr": sum(psnrs) / n}


def _cmd_embed(config: RunConfig, out: Path, manifest: RunManifest, args) -> dict:
    model = _load_model(config)
    decoder = _load_decoder(config)
    manifest.add_checkpoint("diffusion", config.model_checkpoint)
    manifest.add_checkpoint("decoder", config.decoder_checkpoint)
    if decoder.k != config.k:
        raise RuntimeError(f"decoder k={decoder.k} does not match config k={config.k}")
    images, labels = _eval_set(config)
    n = min(args.n or config.eval.n_images, len(images))
    images, labels = images[:n], labels[:n]

    results = []
    accs, psnrs = [], []
    chunk = max(1, config.eval.embed_batch)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        cond = model.conditions_for(labels[lo:hi])
        res = embed_images(model, images[lo:hi], cond, decoder, config.embed,
                           seed=derive_seed(config.master_seed, "embed", lo), log_every=args.log_every)
        results.append(res)
        for j in range(hi - lo):
            idx = lo + j
            save_png(res.watermarked_image[j], manifest.add_output(out / f"watermarked_{idx:03d}.png"))
            save_message(BitMessage(res.messages[j]), manifest.add_output(out / f"message_{idx:03d}.txt"))
            accs.append(res.per_image_accuracy[j])
            psnrs.append(quality_metrics(res.watermarked_image[j], images[idx])["psnr"])

    embed_manifest = {
        "config_hash": config_hash(config.snapshot()),
        "seeds": {"master": config.master_seed},
        "clean_bit_accuracy": accs,
        "mean_clean_bit_accuracy": sum(accs) / n,
        "psnr": psnrs,
        "mean_psnr": sum(psnrs) / n,
        "mask_mode": config.embed.mask_mode,
        "loss_history": [r.loss_history for r in results],
        "attack_log": [[asdict(s) for s in r.attack_log] for r in results],
        "failed": any(r.failed for r in results),
    }
    path = manifest.add_output(out / "embed_result.json")
    with open(path, "w") as f:
        json.dump(embed_manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"mean_clean_bit_accuracy": embed_manifest["mean_clean_bit_accuracy"],
            "mean_psnr": embed_manifest["mean_psnr"], "failed": embed_manifest["failed"]}


def _cmd_extract(config: RunConfig, out: Path, manifest: RunManifest, args) -> dict:
    decoder = _load_decoder(config)
    manifest.add_checkpoint("decoder", config.decoder_checkpoint)
    results = {}
    accs = []
    for i, img_path in enumerate(args.images):
        image = load_png(img_path)
        logits = decoder(image.unsqueeze(0))
        bits = BitMessage((logits.squeeze(0) > 0).to(torch.int64))
        target = out / (Path(img_path).stem + "_bits.txt")
        save_message(bits, manifest.add_output(target))
        results[str(img_path)] = bits.to_string()
        if args.truth:
            truth = load_message(args.truth[i])
            accs.append(bit_accuracy(bits, truth))
    metrics = {"decoded": results}
    if accs:
        metrics["bit_accuracy"] = accs
        metrics["mean_bit_accuracy"] = sum(accs) / len(accs)
    return metrics


def _cmd_attack(config: RunConfig, out: Path, manifest: RunManifest, args) -> dict:
    written = []
    for img_path in args.images:
        image = load_png(img_path)
        if args.transform:
            attacked = transform(args.transform, image, seed=derive_seed(config.master_seed, "attack", img_path))
        else:
            spec = AttackSpec(kind=args.kind, intensity=args.intensity,
                              seed=derive_seed(config.master_seed, "attack", img_path))
            attacked = apply_attack(spec, image)
        target = out / (Path(img_path).stem + "_attacked.png")
        save_png(attacked, manifest.add_output(target))
        written.append(str(target))
    return {"attacked": written}


def _bench_methods(config: RunConfig, model: DiffusionModel, decoder: WatermarkDecoder,
                   labels: torch.Tensor, chunk: int) -> list[WatermarkMethod]:
    def ours_embed(images, messages, seed):
        outs = []
        for lo in range(0, len(images), chunk):
            hi = min(lo + chunk, len(images))
            cond = model.conditions_for(labels[lo:hi])
            res = embed_images(model, images[lo:hi], cond, decoder, config.embed,
                               message=messages[lo:hi].float(), seed=derive_seed(seed, lo))
            outs.append(res.watermarked_image)
        return torch.cat(outs)

    def ours_extract(images):
        with torch.no_grad():
            return (decoder(images) > 0).to(torch.int64)

    def dwt_embed(images, messages, seed):
        return torch.stack([dwtdct_embed(im, BitMessage(m)) for im, m in zip(images, messages)])

    def dwt_extract(images):
        return torch.stack([dwtdct_extract(im, config.k).bits for im in images])

    return [
        WatermarkMethod("noisemark", ours_embed, ours_extract),
        WatermarkMethod("dwt-dct", dwt_embed, dwt_extract),
    ]


def _cmd_bench(config: RunConfig, out: Path, manifest: RunManifest, args) -> dict:
    model = _load_model(config)
    decoder = _load_decoder(config)
    manifest.add_checkpoint("diffusion", config.model_checkpoint)
    manifest.add_checkpoint("decoder", config.decoder_checkpoint)
    if decoder.k != config.k:
        raise RuntimeError(f"decoder k={decoder.k} does not match config k={config.k}")
    images, labels = _eval_set(config)
    n = min(args.n or config.eval.n_images, len(images))
    images, labels = images[:n], labels[:n]
    methods = _bench_methods(config, model, decoder, labels, max(1, config.eval.embed_batch))
    report = run_benchmark(methods, images, config.k, config.transforms,
                           master_seed=config.master_seed)
    report.to_csv(manifest.add_output(out / "bench.csv"))
    report.to_json(manifest.add_output(out / "bench.json"))
    return {"average": report.average_row(), "errors": report.errors}


def _cmd_report(config: RunConfig, out: Path, manifest: RunManifest, args) -> dict:
    csv_path = Path(args.csv or (out / "bench.csv"))
    if not csv_path.exists():
        raise RuntimeError(f"benchmark CSV not found: {csv_path}")
    written = render_report_plots(csv_path, out)
    for p in written:
        manifest.add_output(p)
    return {"plots": [str(p) for p in written]}


_COMMANDS = {
    "train-model": _cmd_train_model,
    "train-decoder": _cmd_train_decoder,
    "train-autoencoder": _cmd_train_autoencoder,
    "invert": _cmd_invert,
    "embed": _cmd_embed,
    "extract": _cmd_extract,
    "attack": _cmd_attack,
    "bench": _cmd_bench,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisemark",
                                     description="Watermark images by optimizing diffusion inversion noise.")
    parser.add_argument("--version", action="version", version=f"noisemark {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("-o", "--output-dir", help="override the config's output directory")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--log-every", type=int, default=0, help="progress print interval")

    for name in ("train-model", "train-decoder", "train-autoencoder"):
        common(sub.add_parser(name, help=f"{name.replace('-', ' ')} on the configured corpus"))

    p = sub.add_parser("invert", help="invert eval images and optimize null tokens")
    common(p)
    p.add_argument("-n", type=int, help="number of eval images")

    p = sub.add_parser("embed", help="embed messages into eval images")
    common(p)
    p.add_argument("-n", type=int, help="number of eval images")

    p = sub.add_parser("extract", help="decode bit messages from image files")
    common(p)
    p.add_argument("images", nargs="+", help="PNG files to decode")
    p.add_argument("--truth", nargs="+", help="message files to score against (one per image)")

    p = sub.add_parser("attack", help="corrupt image files with one attack or transform")
    common(p)
    p.add_argument("images", nargs="+", help="PNG files to corrupt")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--transform", choices=sorted(TRANSFORM_POINTS),
                       help="evaluation transform label")
    group.add_argument("--kind", choices=["identity", "crop", "rotate", "resize", "brightness", "jpeg"],
                       help="differentiable attack kind")
    p.add_argument("--intensity", type=float, default=1.0, help="attack intensity (with --kind)")

    p = sub.add_parser("bench", help="run the robustness benchmark")
    common(p)
    p.add_argument("-n", type=int, help="number of eval images")

    p = sub.add_parser("report", help="render plots from a benchmark CSV")
    common(p)
    p.add_argument("--csv", help="benchmark CSV (default: <output-dir>/bench.csv)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else build_config({})
        if args.seed is not None:
            config.master_seed = args.seed
        if getattr(args, "truth", None) and len(args.truth) != len(args.images):
            raise ConfigError("--truth needs exactly one message file per image")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out = _output_dir(config, args.output_dir)
    manifest = RunManifest(command=args.command, config=config.snapshot(),
                           seeds={"master": config.master_seed})
    manifest_path = out / f"manifest_{args.command}.json"
    try:
        manifest.metrics = _COMMANDS[args.command](config, out, manifest, args)
        manifest.finish("ok")
        manifest.validate_outputs()
    except Exception as exc:
        manifest.finish("failed", error=f"{type(exc).__name__}: {exc}")
        manifest.write(manifest_path)
        print(f"error in {args.command}: {exc}", file=sys.stderr)
        return 1
    manifest.write(manifest_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
