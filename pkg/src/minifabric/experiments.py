"""Desk-scale reproductions of the four automated feedback experiments:
preference-score steering, target-image steering, feedback-schedule ablation
and prompt-dropout ablation.

Every experiment runs arms over the same per-prompt seeds (paired), selection
in no-feedback baseline arms still happens so similarity metrics stay
comparable, and each arm's raw per-round records are kept so every aggregate
can be recomputed from them.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import multiprocessing
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import (
    EmbeddingModel,
    PreferenceOracle,
    default_preference_oracle,
    feedback_similarity,
    in_batch_diversity,
    preference_select,
    target_select,
)
from .feedback import (
    FeedbackSchedule,
    FeedbackState,
    GenerationConfig,
    ModelBundle,
    run_feedback_rounds,
)
from .schedule import rng_from, seed_from
from .shapes import Prompt, class_spec, render, sample_spec, save_png
from .unet import DenoiserConfig

RESULTS_SCHEMA_VERSION = 1
CSV_COLUMNS = [
    "experiment",
    "arm",
    "prompt_id",
    "round",
    "score_min",
    "score_mean",
    "score_max",
    "score_cummax",
    "s_pos",
    "s_neg",
    "diversity",
]


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str                      # preference | target | schedule | dropout
    n_prompts: int = 50
    rounds: int = 3
    batch_size: int = 4
    feedback_strength: float | None = None   # default 0.1 preference, 0.8 target-style
    schedule_kind: str = "first_half"
    dropout_p: float = 0.0
    steps: int = 50
    guidance_scale: float = 3.0
    seed: int = 0
    workers: int = 0                     # 0 = cpu count

    def __post_init__(self):
        if self.experiment not in ("preference", "target", "schedule", "dropout"):
            raise ExperimentError(f"unknown experiment {self.experiment!r}")
        if self.n_prompts < 1 or self.rounds < 1 or self.batch_size < 2:
            raise ExperimentError("need n_prompts >= 1, rounds >= 1, batch_size >= 2")

    @property
    def w(self) -> float:
        if self.feedback_strength is not None:
            return self.feedback_strength
        return 0.1 if self.experiment == "preference" else 0.8


@dataclass(frozen=True)
class ArmSpec:
    name: str
    apply_feedback: bool = True
    schedule_kind: str = "first_half"
    dropout_p: float = 0.0
    positive_only: bool = False


@dataclass
class ExperimentResult:
    experiment: str
    config: dict
    arm_names: list[str]
    records: dict[str, list[list[dict]]]   # arm -> per-prompt -> per-round record
    aggregates: dict[str, list[dict]]      # arm -> per-round aggregate
    prompts: list[dict]

    def to_json_dict(self) -> dict:
        return {
            "schema_version": RESULTS_SCHEMA_VERSION,
            "experiment": self.experiment,
            "config": self.config,
            "arm_names": self.arm_names,
            "prompts": self.prompts,
            "aggregates": self.aggregates,
            "records": self.records,
        }


# ---------------------------------------------------------------------------
# per-prompt execution


def _round_metrics(embedder: EmbeddingModel, batch: np.ndarray, state: FeedbackState, scores: np.ndarray) -> dict:
    div = in_batch_diversity(embedder, batch)
    s_pos_vals, s_neg_vals = [], []
    for img in batch:
        rep = feedback_similarity(embedder, img, state.liked, state.disliked)
        if rep.s_pos is not None:
            s_pos_vals.append(rep.s_pos)
        if rep.s_neg is not None:
            s_neg_vals.append(rep.s_neg)
    return {
        "scores": [float(s) for s in scores],
        "score_min": float(np.min(scores)),
        "score_mean": float(np.mean(scores)),
        "score_max": float(np.max(scores)),
        "s_pos": float(np.mean(s_pos_vals)) if s_pos_vals else None,
        "s_neg": float(np.mean(s_neg_vals)) if s_neg_vals else None,
        "diversity": div.d,
    }


def _run_prompt_arm(
    model: ModelBundle,
    embedder: EmbeddingModel,
    prompt: Prompt,
    arm: ArmSpec,
    config: ExperimentConfig,
    prompt_seed: int,
    scorer,
) -> list[dict]:
    """One arm for one prompt; returns per-round record dicts."""
    gen = GenerationConfig(
        batch_size=config.batch_size,
        rounds=config.rounds,
        feedback_schedule=FeedbackSchedule(kind=arm.schedule_kind, w_max=config.w),
        dropout_p=arm.dropout_p,
        steps=config.steps,
        guidance_scale=config.guidance_scale,
        seed=prompt_seed,
    )
    score_by_round: dict[int, np.ndarray] = {}

    def source(batch: np.ndarray, round_index: int):
        scores = scorer(batch)
        score_by_round[round_index] = scores
        liked, disliked = _select(embedder, batch, scores)
        if arm.positive_only:
            return [liked], []
        return [liked], [disliked]

    def metrics_fn(batch: np.ndarray, state: FeedbackState) -> dict:
        r = max(score_by_round)  # selector runs before metrics in the loop
        return _round_metrics(embedder, batch, state, score_by_round[r])

    records = run_feedback_rounds(
        model, prompt, source, gen, apply_feedback=arm.apply_feedback, metrics_fn=metrics_fn
    )
    out = []
    for rec in records:
        row = {
            "round": rec.round_index,
            "prompt": rec.prompt.as_dict(),
            "prompt_used": rec.prompt_used.as_dict(),
            "image_ids": rec.image_ids,
            "liked_ids": rec.liked_ids,
            "disliked_ids": rec.disliked_ids,
            **rec.metrics,
        }
        out.append(row)
    return out


def _select(embedder, batch, scores):
    from .evaluation import _select_extremes

    return _select_extremes(scores)


# worker globals (populated before fork so children share them copy-on-write)
_CTX: dict = {}


def _worker_run(task):
    prompt_idx = task
    cfg: ExperimentConfig = _CTX["config"]
    model: ModelBundle = _CTX["model"]
    embedder: EmbeddingModel = _CTX["embedder"]
    prompt_info = _CTX["prompts"][prompt_idx]
    prompt = Prompt(**prompt_info["prompt"])
    prompt_seed = seed_from(cfg.seed, "prompt", prompt_idx)

    if cfg.experiment == "preference":
        oracle: PreferenceOracle = _CTX["oracle"]

        def scorer(batch):
            return oracle.score(embedder, batch)

    else:
        target = _CTX["targets"][prompt_idx]
        te = embedder.embed(target)

        def scorer(batch):
            return embedder.embed(batch) @ te

    results = {}
    for arm in _CTX["arms"]:
        results[arm.name] = _run_prompt_arm(model, embedder, prompt, arm, cfg, prompt_seed, scorer)
    return prompt_idx, results


def _run_all_prompts(config: ExperimentConfig, n_workers: int):
    tasks = list(range(config.n_prompts))
    if n_workers <= 1:
        return [_worker_run(t) for t in tasks]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(processes=n_workers) as pool:
        return pool.map(_worker_run, tasks)


# ---------------------------------------------------------------------------
# experiment definitions


def _prepare(config: ExperimentConfig, model: ModelBundle, embedder: EmbeddingModel):
    rng = rng_from(config.seed, "prompts")
    prompts = []
    targets = []
    if config.experiment == "preference":
        for _ in range(config.n_prompts):
            spec = class_spec(int(rng.integers(0, 24)))
            prompts.append({"prompt": Prompt.from_spec(spec).as_dict()})
    else:
        for i in range(config.n_prompts):
            spec = sample_spec(rng)
            prompts.append({"prompt": Prompt.from_spec(spec).as_dict(), "target_spec": dataclasses.asdict(spec)})
            targets.append(render(spec, "target", seed=seed_from(config.seed, "target", i)))
    _CTX.clear()
    _CTX.update(
        config=config,
        model=model,
        embedder=embedder,
        prompts=prompts,
        targets=targets,
        arms=_arms_for(config),
    )
    if config.experiment == "preference":
        _CTX["oracle"] = default_preference_oracle(embedder)
    return prompts


def _arms_for(config: ExperimentConfig) -> list[ArmSpec]:
    kind = config.schedule_kind
    if config.experiment == "preference":
        return [
            ArmSpec("fabric", apply_feedback=True, schedule_kind=kind),
            ArmSpec("baseline", apply_feedback=False, schedule_kind=kind),
        ]
    if config.experiment == "target":
        return [
            ArmSpec("baseline", apply_feedback=False, schedule_kind=kind),
            ArmSpec("positive", apply_feedback=True, schedule_kind=kind, positive_only=True),
            ArmSpec("positive_negative", apply_feedback=True, schedule_kind=kind),
        ]
    if config.experiment == "schedule":
        return [
            ArmSpec("full", schedule_kind="constant"),
            ArmSpec("first_half", schedule_kind="first_half"),
            ArmSpec("second_half", schedule_kind="second_half"),
        ]
    return [
        ArmSpec("p00", schedule_kind=kind, dropout_p=0.0),
        ArmSpec("p03", schedule_kind=kind, dropout_p=0.3),
    ]


def run_experiment(
    config: ExperimentConfig,
    model: ModelBundle,
    embedder: EmbeddingModel,
    out_dir: str | Path | None = None,
    save_images: bool = False,
) -> ExperimentResult:
    prompts = _prepare(config, model, embedder)
    n_workers = config.workers if config.workers > 0 else (os.cpu_count() or 1)
    outputs = sorted(_run_all_prompts(config, n_workers), key=lambda x: x[0])

    records: dict[str, list[list[dict]]] = {arm.name: [] for arm in _CTX["arms"]}
    for _, per_arm in outputs:
        for name, rounds in per_arm.items():
            records[name].append(rounds)

    aggregates = {name: compute_aggregates(runs) for name, runs in records.items()}
    result = ExperimentResult(
        experiment=config.experiment,
        config=dataclasses.asdict(config),
        arm_names=[a.name for a in _CTX["arms"]],
        records=records,
        aggregates=aggregates,
        prompts=prompts,
    )
    if out_dir is not None:
        write_results(result, out_dir)
    return result


def run_preference_experiment(config, model, embedder, **kw) -> ExperimentResult:
    return run_experiment(dataclasses.replace(config, experiment="preference"), model, embedder, **kw)


def run_target_experiment(config, model, embedder, **kw) -> ExperimentResult:
    return run_experiment(dataclasses.replace(config, experiment="target"), model, embedder, **kw)


def run_schedule_ablation(config, model, embedder, **kw) -> ExperimentResult:
    return run_experiment(dataclasses.replace(config, experiment="schedule"), model, embedder, **kw)


def run_dropout_ablation(config, model, embedder, **kw) -> ExperimentResult:
    return run_experiment(dataclasses.replace(config, experiment="dropout"), model, embedder, **kw)


# ---------------------------------------------------------------------------
# aggregation / persistence / statistics


def compute_aggregates(runs: list[list[dict]]) -> list[dict]:
    """Per-round aggregates over prompts, incl. the running best score."""
    n_rounds = len(runs[0])
    out = []
    for r in range(n_rounds):
        rows = [run[r] for run in runs]
        cummax = [max(run[i]["score_max"] for i in range(r + 1)) for run in runs]
        s_pos = [row["s_pos"] for row in rows if row["s_pos"] is not None]
        s_neg = [row["s_neg"] for row in rows if row["s_neg"] is not None]
        out.append(
            {
                "round": r + 1,
                "score_min": float(np.mean([row["score_min"] for row in rows])),
                "score_mean": float(np.mean([row["score_mean"] for row in rows])),
                "score_max": float(np.mean([row["score_max"] for row in rows])),
                "score_cummax": float(np.mean(cummax)),
                "s_pos": float(np.mean(s_pos)) if s_pos else None,
                "s_neg": float(np.mean(s_neg)) if s_neg else None,
                "diversity": float(np.mean([row["diversity"] for row in rows])),
            }
        )
    return out


def write_results(result: ExperimentResult, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.json").write_text(json.dumps(result.to_json_dict(), indent=1))
    with open(out_dir / "rounds.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for arm, runs in result.records.items():
            for prompt_id, rounds in enumerate(runs):
                best = -np.inf
                for row in rounds:
                    best = max(best, row["score_max"])
                    writer.writerow(
                        [
                            result.experiment,
                            arm,
                            prompt_id,
                            row["round"],
                            row["score_min"],
                            row["score_mean"],
                            row["score_max"],
                            best,
                            row["s_pos"],
                            row["s_neg"],
                            row["diversity"],
                        ]
                    )


def emit_plots(result: ExperimentResult, out_dir: str | Path) -> list[Path]:
    """Optional PNG line charts of the per-round aggregates."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    metrics = [("score_mean", "mean score"), ("score_cummax", "best score so far"), ("diversity", "in-batch diversity")]
    for key, label in metrics:
        fig, ax = plt.subplots(figsize=(4, 3))
        for arm in result.arm_names:
            rounds = [a["round"] for a in result.aggregates[arm]]
            ax.plot(rounds, [a[key] for a in result.aggregates[arm]], marker="o", label=arm)
        ax.set_xlabel("round")
        ax.set_ylabel(label)
        ax.set_xticks(rounds)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{result.experiment}_{key}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def load_results(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("schema_version") != RESULTS_SCHEMA_VERSION:
        raise ExperimentError(f"unsupported results schema {data.get('schema_version')!r}")
    return data


def paired_sign_test(xs, ys) -> tuple[int, int, float]:
    """One-sided sign test for median(X - Y) > 0; returns (wins, losses, p)."""
    from scipy.stats import binomtest

    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ExperimentError("paired test needs equal-length samples")
    diff = xs - ys
    wins = int((diff > 0).sum())
    losses = int((diff < 0).sum())
    n = wins + losses
    if n == 0:
        return 0, 0, 1.0
    return wins, losses, float(binomtest(wins, n, alternative="greater").pvalue)


def significantly_greater(xs, ys, alpha: float = 0.05) -> bool:
    _, _, p = paired_sign_test(xs, ys)
    return p < alpha


def not_significantly_less(xs, ys, alpha: float = 0.05) -> bool:
    """Non-inferiority: Y does not beat X at the given confidence."""
    _, _, p = paired_sign_test(ys, xs)
    return p >= alpha


def round_values(result: ExperimentResult, arm: str, round_index: int, key: str) -> list[float]:
    """Per-prompt metric values of one arm at one round (1-based)."""
    return [run[round_index - 1][key] for run in result.records[arm]]
