"""Command-line entry points: data generation, training, one-shot generation,
the four experiments, and the HTTP service."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np


class CliError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minifabric")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a dataset, write manifest and statistics")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--png", type=int, default=0, help="also export this many PNGs")

    p = sub.add_parser("train-denoiser", help="train the noise predictor")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--n-images", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--report", default=None, help="write the training report JSON here")

    p = sub.add_parser("train-embedder", help="train the embedding classifier")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--report", default=None)

    p = sub.add_parser("generate", help="one-shot generation with optional feedback images")
    p.add_argument("--prompt", required=True, help='e.g. "circle,red,large"')
    p.add_argument("--liked", action="append", default=[], help="path to a liked PNG (repeatable)")
    p.add_argument("--disliked", action="append", default=[], help="path to a disliked PNG (repeatable)")
    p.add_argument("--w", type=float, default=0.8)
    p.add_argument("--schedule", default="first_half",
                   choices=["constant", "first_half", "second_half", "linear_interp"])
    p.add_argument("--dropout-p", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=3.0)
    p.add_argument("--checkpoint-dir", default="checkpoints")
    p.add_argument("--out", required=True)

    p = sub.add_parser("experiment", help="run an automated feedback experiment")
    p.add_argument("kind", choices=["preference", "target", "schedule", "dropout"])
    p.add_argument("--prompts", type=int, default=50)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--w", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--checkpoint-dir", default="checkpoints")
    p.add_argument("--out", required=True)
    p.add_argument("--plots", action="store_true")
    p.add_argument("--steps", type=int, default=50)

    p = sub.add_parser("serve", help="start the interactive feedback service")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--checkpoint-dir", default="checkpoints")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--ui-dir", default=None)

    return parser


def _load_models(checkpoint_dir: str):
    from .checkpoint import load_checkpoint
    from .embedder import EmbedderConfig
    from .evaluation import EmbeddingModel
    from .feedback import ModelBundle
    from .schedule import build_schedule
    from .unet import DenoiserConfig

    ckpt_dir = Path(checkpoint_dir)
    den_path = ckpt_dir / "denoiser.ckpt"
    emb_path = ckpt_dir / "embedder.ckpt"
    for path in (den_path, emb_path):
        if not path.exists():
            raise CliError(f"missing checkpoint {path}; train first or pass --checkpoint-dir")
    den, den_arch = load_checkpoint(den_path)
    emb, emb_arch = load_checkpoint(emb_path)
    dcfg = DenoiserConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in den_arch.items() if k in DenoiserConfig.__dataclass_fields__})
    ecfg = EmbedderConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in emb_arch.items() if k in EmbedderConfig.__dataclass_fields__})
    bundle = ModelBundle(den, dcfg, build_schedule())
    return bundle, EmbeddingModel(emb, ecfg)


def cmd_gen_data(args) -> int:
    from .schedule import rng_from
    from .shapes import dataset_statistics, sample_dataset, save_manifest, save_png

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = sample_dataset(args.n, rng_from("dataset", args.seed))
    save_manifest([spec for _, spec in pairs], out / "manifest.json")
    stats = dataset_statistics([img for img, _ in pairs])
    (out / "stats.json").write_text(json.dumps(stats, indent=1))
    png_dir = out / "images"
    if args.png:
        png_dir.mkdir(exist_ok=True)
        for i, (img, _) in enumerate(pairs[: args.png]):
            save_png(img, png_dir / f"{i:05d}.png")
    print(f"wrote {args.n} specs to {out} (mean={stats['channel_mean']})")
    return 0


def _override(config, **kw):
    fields = {k: v for k, v in kw.items() if v is not None}
    return dataclasses.replace(config, **fields) if fields else config


def cmd_train_denoiser(args) -> int:
    from .training import DenoiserTrainConfig, train_denoiser

    config = _override(
        DenoiserTrainConfig(),
        epochs=args.epochs, n_images=args.n_images, lr=args.lr, seed=args.seed,
    )
    _, report = train_denoiser(config, out_path=args.out, log=print)
    if args.report:
        report.to_json(args.report)
    print(f"saved {args.out}; final loss {report.epoch_losses[-1]:.4f}")
    return 0


def cmd_train_embedder(args) -> int:
    from .training import EmbedderTrainConfig, train_embedder

    config = _override(EmbedderTrainConfig(), epochs=args.epochs, seed=args.seed)
    _, report = train_embedder(config, out_path=args.out, log=print)
    if args.report:
        report.to_json(args.report)
    print(f"saved {args.out}; val accuracy {report.val_metrics['val_accuracy']:.4f}")
    return 0


def cmd_generate(args) -> int:
    from .feedback import FeedbackSchedule, FeedbackState, GenerationConfig, generate
    from .shapes import Prompt, load_png, quantize, save_png

    bundle, _ = _load_models(args.checkpoint_dir)
    try:
        prompt = Prompt.parse(args.prompt)
    except ValueError as exc:
        raise CliError(str(exc))
    for path in args.liked + args.disliked:
        if not Path(path).exists():
            raise CliError(f"feedback image not found: {path}")
    state = FeedbackState(
        liked=[load_png(p) for p in args.liked],
        disliked=[load_png(p) for p in args.disliked],
    )
    config = GenerationConfig(
        batch_size=args.batch,
        rounds=1,
        feedback_schedule=FeedbackSchedule(kind=args.schedule, w_max=args.w),
        dropout_p=args.dropout_p,
        steps=args.steps,
        guidance_scale=args.guidance,
        seed=args.seed,
    )
    batch = generate(bundle, prompt, state, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(batch):
        path = out / f"gen_{args.seed}_{i}.png"
        save_png(quantize(img), path)
        paths.append(str(path))
    (out / f"gen_{args.seed}_meta.json").write_text(
        json.dumps({"prompt": prompt.as_dict(), "seed": args.seed, "w": args.w,
                    "schedule": args.schedule, "images": paths}, indent=1)
    )
    print("\n".join(paths))
    return 0


def cmd_experiment(args) -> int:
    from .experiments import ExperimentConfig, emit_plots, run_experiment

    bundle, embedder = _load_models(args.checkpoint_dir)
    config = ExperimentConfig(
        experiment=args.kind,
        n_prompts=args.prompts,
        rounds=args.rounds,
        batch_size=args.batch,
        feedback_strength=args.w,
        seed=args.seed,
        workers=args.workers,
        steps=args.steps,
    )
    result = run_experiment(config, bundle, embedder, out_dir=args.out)
    if args.plots:
        emit_plots(result, args.out)
    for arm in result.arm_names:
        last = result.aggregates[arm][-1]
        print(f"{arm}: round-{last['round']} mean score {last['score_mean']:.4f} "
              f"diversity {last['diversity']:.4f}")
    print(f"results in {args.out}/results.json")
    return 0


def cmd_serve(args) -> int:
    import socket

    import uvicorn

    from .service import create_app

    bundle, embedder = _load_models(args.checkpoint_dir)
    app = create_app(bundle, embedder, data_dir=args.data_dir, ui_dir=args.ui_dir)
    port = args.port
    if port == 0:
        with socket.socket() as s:
            s.bind((args.host, 0))
            port = s.getsockname()[1]
    print(f"listening on http://{args.host}:{port}", flush=True)
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-denoiser": cmd_train_denoiser,
    "train-embedder": cmd_train_embedder,
    "generate": cmd_generate,
    "experiment": cmd_experiment,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal failure
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
