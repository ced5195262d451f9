#!/usr/bin/env python3
"""Train both models at the default configs and save checkpoints.

Usage: python scripts/train_models.py [--out checkpoints]
"""

import argparse
from pathlib import Path

from minifabric.training import (
    DenoiserTrainConfig,
    EmbedderTrainConfig,
    train_denoiser,
    train_embedder,
)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="checkpoints")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    _, emb_report = train_embedder(
        EmbedderTrainConfig(seed=args.seed), out_path=out / "embedder.ckpt", log=print
    )
    emb_report.to_json(out / "embedder.report.json")
    print(f"embedder val accuracy: {emb_report.val_metrics['val_accuracy']:.4f}")

    _, den_report = train_denoiser(
        DenoiserTrainConfig(seed=args.seed), out_path=out / "denoiser.ckpt", log=print
    )
    den_report.to_json(out / "denoiser.report.json")
    print(f"denoiser final loss: {den_report.epoch_losses[-1]:.4f}")


if __name__ == "__main__":
    main()
