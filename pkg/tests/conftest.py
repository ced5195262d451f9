"""Session-scoped trained models, cached on disk under .cache/models.

The first run trains both networks at the default configs (minutes); later
runs load the checkpoints, keyed by a hash of the training config.
"""

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import pytest

from minifabric.checkpoint import load_checkpoint
from minifabric.embedder import EmbedderConfig
from minifabric.evaluation import EmbeddingModel, default_preference_oracle
from minifabric.feedback import ModelBundle
from minifabric.schedule import build_schedule
from minifabric.training import (
    DenoiserTrainConfig,
    EmbedderTrainConfig,
    TrainReport,
    train_denoiser,
    train_embedder,
)
from minifabric.unet import DenoiserConfig

CACHE = Path(__file__).resolve().parent.parent / ".cache" / "models"


def _config_key(config) -> str:
    return hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode()).hexdigest()[:12]


def cached_model(kind: str, config, train_fn):
    path = CACHE / f"{kind}-{_config_key(config)}.ckpt"
    report_path = path.with_suffix(".report.json")
    if path.exists():
        store, _ = load_checkpoint(path)
        report = TrainReport(**json.loads(report_path.read_text()))
        return store, report
    store, report = train_fn(config, out_path=path)
    report.to_json(report_path)
    return store, report


@pytest.fixture(scope="session")
def denoiser_trained():
    return cached_model("denoiser", DenoiserTrainConfig(), train_denoiser)


@pytest.fixture(scope="session")
def embedder_trained():
    return cached_model("embedder", EmbedderTrainConfig(), train_embedder)


@pytest.fixture(scope="session")
def bundle(denoiser_trained) -> ModelBundle:
    store, _ = denoiser_trained
    return ModelBundle(store, DenoiserConfig(), build_schedule())


@pytest.fixture(scope="session")
def embedder(embedder_trained) -> EmbeddingModel:
    store, _ = embedder_trained
    return EmbeddingModel(store, EmbedderConfig())


@pytest.fixture(scope="session")
def oracle(embedder):
    return default_preference_oracle(embedder)
