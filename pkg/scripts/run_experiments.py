#!/usr/bin/env python3
"""Run all four automated feedback experiments and emit plots.

Usage: python scripts/run_experiments.py --checkpoint-dir checkpoints --out results
"""

import argparse
import time
from pathlib import Path

from minifabric.checkpoint import load_checkpoint
from minifabric.embedder import EmbedderConfig
from minifabric.evaluation import EmbeddingModel
from minifabric.experiments import ExperimentConfig, emit_plots, run_experiment
from minifabric.feedback import ModelBundle
from minifabric.schedule import build_schedule
from minifabric.unet import DenoiserConfig


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--checkpoint-dir", default="checkpoints")
    parser.add_argument("--out", default="results")
    parser.add_argument("--prompts", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=0)
    args = parser.parse_args()

    ckpt = Path(args.checkpoint_dir)
    den, _ = load_checkpoint(ckpt / "denoiser.ckpt")
    emb, _ = load_checkpoint(ckpt / "embedder.ckpt")
    model = ModelBundle(den, DenoiserConfig(), build_schedule())
    embedder = EmbeddingModel(emb, EmbedderConfig())

    for kind in ("preference", "target", "schedule", "dropout"):
        t0 = time.time()
        config = ExperimentConfig(
            experiment=kind, n_prompts=args.prompts, seed=args.seed, workers=args.workers
        )
        out_dir = Path(args.out) / kind
        result = run_experiment(config, model, embedder, out_dir=out_dir)
        emit_plots(result, out_dir)
        print(f"{kind}: {time.time() - t0:.0f}s -> {out_dir}")
        for arm in result.arm_names:
            rounds = result.aggregates[arm]
            means = ", ".join(f"{a['score_mean']:.4f}" for a in rounds)
            print(f"  {arm:18s} mean score by round: {means}")


if __name__ == "__main__":
    main()
