"""Command-line interface for the metalens pipeline.

Every subcommand is deterministic given its flags; `--seed` overrides any
seed carried by a config file. Pipeline failures exit with code 1 and a
machine-readable JSON object on stderr; argparse usage errors exit with 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .corpus import CORPUS_NOISE, synthesize_corpus
from .degradation import NoiseParams, apply_forward_model, fwhm_grid_from_psfs, score_quality
from .imaging import load_png, save_png
from .metrics import psnr, ssim
from .model import (
    ModelConfig,
    MultipathModel,
    generate_pseudo_pairs,
    load_model,
    load_pair_dataset,
    restore,
    save_model,
    train,
)
from .optics import MetalensSpec, build_psf_grid, default_spec, load_psf_grid, save_psf_grid
from .wiener import wiener_patchwise

TRAIN_KEYS = ("steps", "pretrain_steps", "batch_size", "lr")


def _load_lens(path) -> MetalensSpec:
    if path is None:
        return default_spec()
    return MetalensSpec.from_json(Path(path).read_text())


def _grid_from_args(args):
    if getattr(args, "psfs", None):
        return load_psf_grid(args.psfs)
    spec = _load_lens(getattr(args, "lens", None))
    return build_psf_grid(spec, args.grid)


def cmd_psf_simulate(args) -> int:
    spec = _load_lens(args.lens)
    grid = build_psf_grid(spec, args.grid)
    save_psf_grid(args.out, grid)
    print(json.dumps({"out": str(args.out), "n": grid.grid_size, "channels": grid.channels}))
    return 0


def cmd_psf_fwhm(args) -> int:
    grid = load_psf_grid(args.psfs)
    fwhm = fwhm_grid_from_psfs(grid)
    payload = {"n": grid.grid_size, "s_f": [[round(float(v), 6) for v in row] for row in fwhm]}
    Path(args.out).write_text(json.dumps(payload, indent=2))
    print(json.dumps({"out": str(args.out), "min": float(fwhm.min()), "max": float(fwhm.max())}))
    return 0


def cmd_corpus_synth(args) -> int:
    grid = _grid_from_args(args)
    noise = NoiseParams(shot_gain=args.shot_gain, read_sigma=args.read_sigma)
    manifest = synthesize_corpus(args.count, args.size, args.seed, grid, args.out, noise=noise)
    print(json.dumps(manifest))
    return 0


def cmd_degrade(args) -> int:
    grid = _grid_from_args(args)
    noise = NoiseParams(shot_gain=args.shot_gain, read_sigma=args.read_sigma)
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(in_dir.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG files under {in_dir}")
    for i, path in enumerate(paths):
        image = load_png(path).data
        degraded = apply_forward_model(image, grid, noise.with_seed(args.seed + i))
        save_png(out_dir / path.name, degraded)
    print(json.dumps({"count": len(paths), "out": str(out_dir)}))
    return 0


def cmd_train(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    train_kwargs = {k: raw.pop(k) for k in list(raw) if k in TRAIN_KEYS}
    config = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    if args.seed is not None:
        config = ModelConfig(**{**json.loads(config.to_json()), "seed": args.seed})
    grid = _grid_from_args(args)
    if grid.grid_size != config.grid_n:
        raise ValueError(f"PSF grid n={grid.grid_size} but config grid_n={config.grid_n}")
    dataset = load_pair_dataset(args.data)
    model = MultipathModel(config, fwhm_grid_from_psfs(grid))
    log = train(model, dataset, progress=args.progress, **train_kwargs)
    save_model(args.out, model)
    metrics_path = Path(args.out).with_suffix(".metrics.jsonl")
    with open(metrics_path, "w") as fh:
        for entry in log:
            fh.write(json.dumps(entry) + "\n")
    print(json.dumps({"model": str(args.out), "metrics": str(metrics_path), "steps_logged": len(log)}))
    return 0


def cmd_pseudo(args) -> int:
    model = load_model(args.model)
    manifest = generate_pseudo_pairs(model, args.in_dir, args.out)
    print(json.dumps(manifest))
    return 0


def _parse_alphas(args) -> list:
    if args.alphas:
        return [float(tok) for tok in args.alphas.split(",") if tok.strip() != ""]
    return [args.alpha]


def cmd_restore(args) -> int:
    model = load_model(args.model)
    image = load_png(args.in_path).data
    alphas = _parse_alphas(args)
    outputs = restore(model, image, alphas)
    out = Path(args.out)
    written = []
    if args.alphas:
        for i, img in enumerate(outputs):
            path = out.with_name(f"{out.stem}_a{i}{out.suffix or '.png'}")
            save_png(path, img)
            written.append(str(path))
    else:
        save_png(out, outputs[0])
        written.append(str(out))
    print(json.dumps({"alphas": alphas, "outputs": written}))
    return 0


def cmd_restore_wiener(args) -> int:
    grid = load_psf_grid(args.psfs)
    image = load_png(args.in_path).data
    restored = wiener_patchwise(image, grid, nsr=args.nsr)
    save_png(args.out, restored)
    print(json.dumps({"out": str(args.out), "nsr": args.nsr}))
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    records = []
    for pred_path in sorted(pred_dir.glob("*.png")):
        gt_path = gt_dir / pred_path.name
        if not gt_path.exists():
            raise FileNotFoundError(f"missing ground truth for {pred_path.name}")
        pred = load_png(pred_path).data
        gt = load_png(gt_path).data
        records.append(
            {
                "image": pred_path.name,
                "psnr": round(psnr(gt, pred), 4),
                "ssim": round(ssim(gt, pred), 6),
                "quality_proxy": round(float(score_quality(pred, 1)[0, 0]), 4),
            }
        )
    if not records:
        raise FileNotFoundError(f"no PNG files under {pred_dir}")
    aggregate = {
        "count": len(records),
        "psnr_mean": round(float(np.mean([r["psnr"] for r in records])), 4),
        "psnr_median": round(float(np.median([r["psnr"] for r in records])), 4),
        "ssim_mean": round(float(np.mean([r["ssim"] for r in records])), 6),
        "quality_proxy_mean": round(float(np.mean([r["quality_proxy"] for r in records])), 4),
    }
    report = {"images": records, "aggregate": aggregate}
    Path(args.out).write_text(json.dumps(report, indent=2))
    print(json.dumps(aggregate))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.model, cors=args.cors)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metalens", description="Metalens camera simulation and tunable restoration")
    sub = parser.add_subparsers(dest="command", required=True)

    psf = sub.add_parser("psf", help="PSF grid simulation and width scoring")
    psf_sub = psf.add_subparsers(dest="psf_command", required=True)
    p = psf_sub.add_parser("simulate", help="simulate a PSF grid over the field of view")
    p.add_argument("--lens", help="MetalensSpec JSON (defaults to the built-in camera)")
    p.add_argument("--grid", type=int, default=7, help="patches per side")
    p.add_argument("--out", required=True, help="output TensorFile (.mten); writes a field-angle sidecar too")
    p.set_defaults(func=cmd_psf_simulate)
    p = psf_sub.add_parser("fwhm", help="Gaussian-fit width grid of a PSF file")
    p.add_argument("--psfs", required=True, help="PSF grid TensorFile")
    p.add_argument("--out", required=True, help="output JSON with the S_f grid")
    p.set_defaults(func=cmd_psf_fwhm)

    corpus = sub.add_parser("corpus", help="synthetic paired dataset generation")
    corpus_sub = corpus.add_subparsers(dest="corpus_command", required=True)
    p = corpus_sub.add_parser("synth", help="generate (clean, degraded) pairs plus a manifest")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lens", help="MetalensSpec JSON")
    p.add_argument("--psfs", help="reuse a simulated PSF grid file instead of --lens")
    p.add_argument("--grid", type=int, default=7)
    p.add_argument("--shot-gain", type=float, default=CORPUS_NOISE.shot_gain)
    p.add_argument("--read-sigma", type=float, default=CORPUS_NOISE.read_sigma)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corpus_synth)

    p = sub.add_parser("degrade", help="apply the forward model to a directory of images")
    p.add_argument("--lens", help="MetalensSpec JSON")
    p.add_argument("--psfs", help="PSF grid TensorFile")
    p.add_argument("--grid", type=int, default=7)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shot-gain", type=float, default=NoiseParams().shot_gain)
    p.add_argument("--read-sigma", type=float, default=NoiseParams().read_sigma)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train the multipath restoration model")
    p.add_argument("--config", help="JSON with model fields plus steps/pretrain_steps/batch_size/lr")
    p.add_argument("--data", required=True, help="corpus directory (clean/ + degraded/)")
    p.add_argument("--lens", help="MetalensSpec JSON")
    p.add_argument("--psfs", help="PSF grid TensorFile")
    p.add_argument("--grid", type=int, default=7)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--progress", action="store_true", help="print loss lines during training")
    p.add_argument("--out", required=True, help="output model container (.dmdf)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo", help="generate pseudo pairs with the trained negative path")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_dir", required=True, help="directory of clean PNG images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("restore", help="restore an image at one alpha or an alpha sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", type=float, default=0.75)
    p.add_argument("--alphas", help="comma-separated sweep; writes <out>_a{index}.png files")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("restore-wiener", help="patchwise Wiener deconvolution baseline")
    p.add_argument("--psfs", required=True)
    p.add_argument("--nsr", type=float, default=0.01)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_restore_wiener)

    p = sub.add_parser("eval", help="PSNR/SSIM/quality-proxy report for prediction vs ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="HTTP service for instantly tunable decoding")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--cors", action="store_true", help="enable CORS for the browser client")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # pipeline errors: exit 1 with machine-readable stderr
        context = getattr(exc, "context", None) or {"type": type(exc).__name__}
        print(json.dumps({"error": str(exc), "context": context}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
