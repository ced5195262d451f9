"""Similarity/diversity metrics over learned embeddings plus the two
automated feedback selectors (preference-score and target-image driven).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore
from .embedder import EmbedderConfig, embed_images
from .schedule import rng_from
from .shapes import ShapeSpec, render

F32 = np.float32


class EvaluationError(ValueError):
    pass


@dataclass
class EmbeddingModel:
    params: ParamStore
    arch: EmbedderConfig = field(default_factory=EmbedderConfig)

    def embed(self, images: np.ndarray) -> np.ndarray:
        """Unit-norm embedding(s); [B,dim] for a batch, [dim] for one image."""
        single = images.ndim == 3
        out = embed_images(self.params, self.arch, images)
        return out[0] if single else out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12))


@dataclass
class SimilarityReport:
    s_pos: float | None
    s_neg: float | None
    pos_similarities: list[float] = field(default_factory=list)
    neg_similarities: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "s_pos": self.s_pos,
            "s_neg": self.s_neg,
            "pos_similarities": self.pos_similarities,
            "neg_similarities": self.neg_similarities,
        }


def feedback_similarity(
    embedder: EmbeddingModel,
    image: np.ndarray,
    positives: list[np.ndarray],
    negatives: list[np.ndarray],
) -> SimilarityReport:
    """Mean embedding cosine of an image against each feedback side; a side
    with no images is reported absent."""
    e = embedder.embed(image)
    pos = [cosine(e, embedder.embed(p)) for p in positives]
    neg = [cosine(e, embedder.embed(n)) for n in negatives]
    return SimilarityReport(
        s_pos=float(np.mean(pos)) if pos else None,
        s_neg=float(np.mean(neg)) if neg else None,
        pos_similarities=pos,
        neg_similarities=neg,
    )


@dataclass
class DiversityReport:
    d: float
    pairwise: list[float]  # upper triangle, row-major

    def as_dict(self) -> dict:
        return {"d": self.d, "pairwise": self.pairwise}


def in_batch_diversity(embedder: EmbeddingModel, batch: np.ndarray) -> DiversityReport:
    """1 - mean pairwise embedding cosine over the batch (n >= 2)."""
    n = batch.shape[0]
    if n < 2:
        raise EvaluationError(f"diversity needs n >= 2, got {n}")
    e = embedder.embed(batch)
    sims = []
    for i in range(n):
        for j in range(i + 1, n):
            sims.append(float(np.dot(e[i], e[j])))
    return DiversityReport(d=float(1.0 - np.mean(sims)), pairwise=sims)


@dataclass
class PreferenceOracle:
    """Deterministic scalar scorer: cosine against a fixed anchor embedding."""

    anchor: np.ndarray

    def __post_init__(self):
        norm = np.linalg.norm(self.anchor)
        if not np.isfinite(norm) or norm == 0:
            raise EvaluationError("anchor must be a finite nonzero vector")
        self.anchor = (self.anchor / norm).astype(F32)

    def score(self, embedder: EmbeddingModel, images: np.ndarray) -> np.ndarray:
        e = embedder.embed(images if images.ndim == 4 else images[None])
        return e @ self.anchor


def default_preference_oracle(embedder: EmbeddingModel, n_renders: int = 100) -> PreferenceOracle:
    """Anchor = renormalized mean embedding of many large-red-circle renders."""
    rng = rng_from("preference-anchor")
    images = []
    for _ in range(n_renders):
        spec = ShapeSpec(
            "circle",
            "red",
            "large",
            offset_x=float(rng.uniform(-3, 3)),
            offset_y=float(rng.uniform(-3, 3)),
            brightness=float(rng.uniform(0.9, 1.1)),
        )
        images.append(render(spec, "train"))
    emb = embedder.embed(np.stack(images))
    return PreferenceOracle(anchor=emb.mean(axis=0))


def _select_extremes(scores: np.ndarray) -> tuple[int, int]:
    """(argmax, argmin) with index tie-breaks; always two distinct images."""
    n = scores.shape[0]
    if n < 2:
        raise EvaluationError("selection needs a batch of at least 2")
    liked = int(np.argmax(scores))
    order = np.argsort(scores, kind="stable")  # ascending, index-stable
    disliked = int(order[0])
    if disliked == liked:  # all-equal scores: lowest index wins, next one dislikes
        disliked = int(order[1])
    return liked, disliked


def preference_select(
    embedder: EmbeddingModel, batch: np.ndarray, oracle: PreferenceOracle
) -> tuple[int, int]:
    """Highest-scoring image liked, lowest disliked."""
    return _select_extremes(oracle.score(embedder, batch))


def target_select(
    embedder: EmbeddingModel, batch: np.ndarray, target_image: np.ndarray
) -> tuple[int, int]:
    """Most/least target-similar image liked/disliked."""
    if batch.shape[0] < 2:
        raise EvaluationError("selection needs a batch of at least 2")
    te = embedder.embed(target_image)
    sims = embedder.embed(batch) @ te
    return _select_extremes(sims)
