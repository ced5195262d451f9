import csv
import json

import numpy as np
import pytest

from minifabric.embedder import EmbedderConfig, init_embedder
from minifabric.evaluation import EmbeddingModel
from minifabric.experiments import (
    CSV_COLUMNS,
    ExperimentConfig,
    ExperimentError,
    compute_aggregates,
    load_results,
    paired_sign_test,
    round_values,
    run_experiment,
    significantly_greater,
    write_results,
)
from minifabric.feedback import ModelBundle
from minifabric.schedule import build_schedule
from minifabric.unet import DenoiserConfig, init_denoiser


def tiny_setup():
    params = init_denoiser(DenoiserConfig(), seed=21)
    for name in ("attn.out.w", "head.conv.w"):
        params.params[name].data[:] = (
            np.random.default_rng(9).standard_normal(params.params[name].data.shape) * 0.2
        ).astype(np.float32)
    bundle = ModelBundle(params, DenoiserConfig(), build_schedule())
    embedder = EmbeddingModel(init_embedder(EmbedderConfig(), seed=4))
    return bundle, embedder


FAST = dict(n_prompts=3, rounds=2, batch_size=2, steps=5, workers=1, seed=3)


def run_fast(kind, **over):
    bundle, embedder = tiny_setup()
    cfg = ExperimentConfig(experiment=kind, **{**FAST, **over})
    return run_experiment(cfg, bundle, embedder)


def test_config_validation():
    with pytest.raises(ExperimentError):
        ExperimentConfig(experiment="mystery")
    with pytest.raises(ExperimentError):
        ExperimentConfig(experiment="target", batch_size=1)
    assert ExperimentConfig(experiment="preference").w == 0.1
    assert ExperimentConfig(experiment="target").w == 0.8
    assert ExperimentConfig(experiment="target", feedback_strength=0.5).w == 0.5


def test_preference_experiment_structure():
    result = run_fast("preference")
    assert result.arm_names == ["fabric", "baseline"]
    for arm in result.arm_names:
        assert len(result.records[arm]) == FAST["n_prompts"]
        for run in result.records[arm]:
            assert [row["round"] for row in run] == [1, 2]
            for row in run:
                assert len(row["scores"]) == FAST["batch_size"]
                assert row["diversity"] is not None
    # round 1 identical across arms (same seeds, no feedback yet)
    for pa, pb in zip(result.records["fabric"], result.records["baseline"]):
        assert pa[0]["scores"] == pb[0]["scores"]


def test_round1_no_similarity_metrics():
    result = run_fast("target")
    for run in result.records["positive_negative"]:
        assert run[0]["s_pos"] is None and run[0]["s_neg"] is None
        assert run[1]["s_pos"] is not None  # one like accumulated
    for run in result.records["positive"]:
        assert run[1]["s_neg"] is None  # positive-only arm never dislikes


def test_cumulative_max_non_decreasing():
    result = run_fast("preference", rounds=3)
    for arm in result.arm_names:
        aggs = result.aggregates[arm]
        cm = [a["score_cummax"] for a in aggs]
        assert all(b >= a - 1e-9 for a, b in zip(cm, cm[1:]))


def test_aggregates_recomputable():
    result = run_fast("target")
    for arm, runs in result.records.items():
        fresh = compute_aggregates(runs)
        for a, b in zip(fresh, result.aggregates[arm]):
            for key, val in a.items():
                if isinstance(val, float):
                    assert abs(val - b[key]) < 1e-6
                else:
                    assert val == b[key]


def test_schedule_ablation_round1_bitwise():
    result = run_fast("schedule")
    assert set(result.arm_names) == {"full", "first_half", "second_half"}
    for i in range(FAST["n_prompts"]):
        r1 = [result.records[arm][i][0]["scores"] for arm in result.arm_names]
        assert r1[0] == r1[1] == r1[2]


def test_dropout_arms():
    result = run_fast("dropout")
    assert result.arm_names == ["p00", "p03"]
    # p00 prompts never change; p03 may null tokens
    for run in result.records["p00"]:
        for row in run:
            assert row["prompt_used"] == row["prompt"]


def test_results_roundtrip(tmp_path):
    result = run_fast("preference")
    write_results(result, tmp_path)
    data = load_results(tmp_path / "results.json")
    assert data["experiment"] == "preference"
    assert data["aggregates"].keys() == {"fabric", "baseline"}
    with open(tmp_path / "rounds.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CSV_COLUMNS
    assert len(rows) == 1 + 2 * FAST["n_prompts"] * FAST["rounds"]


def test_rejects_unknown_schema(tmp_path):
    (tmp_path / "results.json").write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(ExperimentError):
        load_results(tmp_path / "results.json")


def test_experiment_reproducible():
    a = run_fast("target")
    b = run_fast("target")
    for arm in a.arm_names:
        for ra, rb in zip(a.records[arm], b.records[arm]):
            for xa, xb in zip(ra, rb):
                assert xa["scores"] == xb["scores"]
                assert xa["liked_ids"] == xb["liked_ids"]


def test_parallel_matches_serial():
    bundle, embedder = tiny_setup()
    serial = run_experiment(ExperimentConfig(experiment="preference", **FAST), bundle, embedder)
    parallel = run_experiment(
        ExperimentConfig(experiment="preference", **{**FAST, "workers": 2}), bundle, embedder
    )
    assert serial.aggregates == parallel.aggregates


# ---------------------------------------------------------------------------
# statistics helpers


def test_sign_test_basics():
    wins, losses, p = paired_sign_test([2, 3, 4], [1, 1, 1])
    assert (wins, losses) == (3, 0)
    assert p == pytest.approx(0.125)
    assert not significantly_greater([2, 3, 4], [1, 1, 1])  # n too small
    xs = list(range(50))
    ys = [x - 1 for x in xs]
    assert significantly_greater(xs, ys)
    wins, losses, p = paired_sign_test([1, 1], [1, 1])  # all ties
    assert p == 1.0


def test_round_values_extraction():
    result = run_fast("preference")
    vals = round_values(result, "fabric", 2, "score_mean")
    assert len(vals) == FAST["n_prompts"]
    stored = [run[1]["score_mean"] for run in result.records["fabric"]]
    assert vals == stored
