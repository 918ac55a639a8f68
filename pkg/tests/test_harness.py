from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from services.errors import ConfigError
from services.harness import (
    EXPERIMENT_KINDS,
    ExperimentService,
    grid_points,
    load_config,
    read_result_csv,
    run_experiment,
    sae_config_for,
    validate_config,
    world_spec_for,
    write_result,
)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def _interference(**updates):
    raw = {"experiment": "interference", "seed": 0, "trials": 10, "resamples": 200,
           "world": {"d1": 32}, "axes": {"d2": [8, 32]}}
    raw.update(updates)
    return validate_config(raw)


@pytest.mark.parametrize("raw", [
    {"experiment": "interference"},
    {"experiment": "interference", "seed": 0, "colour": "red"},
    {"experiment": "unknown", "seed": 0},
    {"experiment": "interference", "seed": 0, "axes": {"d2": []}},
    {"experiment": "ttt-rate", "seed": 0, "axes": {"k": [64, 32]}},
    {"experiment": "ttt-rate", "seed": 0, "axes": {"k": [0.5, 2]}},
    {"experiment": "interference", "seed": -1},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        validate_config(raw)


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    config = load_config(path)
    assert config.experiment in EXPERIMENT_KINDS
    assert grid_points(config)[0]


def test_load_config_overrides(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('experiment = "interference"\nseed = 3\nout = "here"\n'
                    '[world]\nd1 = 16\n[axes]\nd2 = [4, 8]\n', encoding="utf-8")
    config = load_config(path, seed=9, out=None, threads=2)
    assert config.seed == 9
    assert config.out == "here"
    assert config.threads == 2
    assert config.world.d1 == 16


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    path = tmp_path / "bad.toml"
    path.write_text("experiment = \n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_grid_points_cartesian_order():
    config = _interference(axes={"d2": [8, 16], "s": [1, 2]})
    points, paired = grid_points(config)
    assert paired is None
    assert points == [{"d2": 8, "s": 1}, {"d2": 8, "s": 2}, {"d2": 16, "s": 1}, {"d2": 16, "s": 2}]


def test_grid_points_defaults_and_paired_axis():
    points, paired = grid_points(validate_config({"experiment": "interference", "seed": 0}))
    assert [p["d2"] for p in points] == [16, 32, 64, 96]
    points, paired = grid_points(validate_config({"experiment": "ttt-rate", "seed": 0}))
    assert points == [{}]
    assert paired == [32, 64, 128, 256, 512, 1024]


def test_point_overrides_world_and_sae():
    config = validate_config({"experiment": "sae-train", "seed": 0,
                              "sae": {"d1": 32, "s": 2}, "world": {"d1": 32}})
    assert world_spec_for(config, {"d2": 8, "ghost_weight": 0.0}).d2 == 8
    assert sae_config_for(config, {"ghost_weight": 0.0}).ghost_weight == 0.0
    with pytest.raises(ConfigError):
        world_spec_for(config, {"s": 64})
    with pytest.raises(ConfigError):
        sae_config_for(_interference(), {})


def test_interference_run():
    result = run_experiment(_interference())
    assert not result.failures
    table = result.table
    assert list(table.columns) == ["experiment", "d2", "metric", "mean", "ci_low", "ci_high",
                                   "n", "seed"]
    assert len(table) == 6
    full = table[(table["d2"] == 32) & (table["metric"] == "global_error")].iloc[0]
    assert full["mean"] < 1e-12
    assert result.metric("ttt_error")["mean"].max() < 1e-16
    expected = result.metric("expected").set_index("d2")["mean"]
    assert expected[8] == pytest.approx(0.75)
    partial = table[(table["d2"] == 8) & (table["metric"] == "global_error")].iloc[0]
    assert partial["ci_low"] <= partial["mean"] <= partial["ci_high"]
    assert abs(partial["mean"] - 0.75) < 0.1


def test_csv_identical_across_thread_counts(tmp_path):
    single = run_experiment(_interference(threads=1))
    pooled = run_experiment(_interference(threads=2))
    a = write_result(single, tmp_path / "a", fmt="csv")[0]
    b = write_result(pooled, tmp_path / "b", fmt="csv")[0]
    assert a.read_bytes() == b.read_bytes()
    other = write_result(run_experiment(_interference(seed=1)), tmp_path / "c", fmt="csv")[0]
    assert other.read_bytes() != a.read_bytes()


def test_failing_point_is_isolated():
    def flaky(config, point, paired):
        if point["d2"] == 16:
            raise ValueError("boom")
        return [({}, "value", np.full(3, float(point["d2"])))]

    config = _interference(axes={"d2": [8, 16, 32]}, threads=2)
    result = run_experiment(config, runners={"interference": flaky})
    assert result.failures == [{"point": {"d2": 16}, "error": "ValueError: boom"}]
    assert result.table["d2"].tolist() == [8, 32]
    assert result.provenance["points"] == 3


def test_invalid_point_is_recorded_as_failure():
    result = run_experiment(_interference(axes={"d2": [8, 0]}))
    assert len(result.failures) == 1
    assert result.failures[0]["error"].startswith("ConfigError")
    assert set(result.table["d2"]) == {8}


def test_write_and_read_result(tmp_path):
    result = run_experiment(_interference())
    written = write_result(result, tmp_path, fmt="both", plot="line")
    names = sorted(p.name for p in written)
    assert names == ["interference.csv", "interference.provenance.json", "interference.svg"]
    table = read_result_csv(tmp_path / "interference.csv")
    pd.testing.assert_frame_equal(table, result.table, check_dtype=False)


def test_read_result_csv_errors(tmp_path):
    with pytest.raises(ConfigError):
        read_result_csv(tmp_path / "missing.csv")
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_result_csv(path)


def test_service_writes_only_when_asked(tmp_path):
    service = ExperimentService()
    assert "interference" in service.kinds()
    config = _interference(out=str(tmp_path / "out"), name="quick", format="csv")
    service.run(config, write=False)
    assert not (tmp_path / "out").exists()
    service.run(config)
    assert (tmp_path / "out" / "quick.csv").exists()
    assert (tmp_path / "out" / "quick.provenance.json").exists()


SMALL_WORLD = {"d1": 32, "d2": 16, "s": 2}
CLASSIFY = {"world": SMALL_WORLD, "n_train": 200, "n_test": 10, "head": {"epochs": 2},
            "ttt": {"k": 20, "steps": 5, "vote_k": 3}}


@pytest.mark.parametrize("raw,metrics", [
    ({"experiment": "ttt-rate", "trials": 3, "mode": "exhaustive", "axes": {"k": [32, 64]},
      "world": {**SMALL_WORLD, "w_law": "pool_sparse"}},
     {"excess_error"}),
    ({"experiment": "neighborhood-sweep", "trials": 3, "n_train": 200, "axes": {"k": [10, 50]},
      "world": {**SMALL_WORLD, "noise_var": 0.25}},
     {"ttt_error", "ridge_error", "knn_error"}),
    ({"experiment": "concentration", "trials": 3, "noise_draws": 20, "axes": {"k": [8, 16]},
      "world": {**SMALL_WORLD, "noise_var": 1.0}},
     {"lambda_q95"}),
    ({"experiment": "geometry", "trials": 3, "n_train": 200, "ttt": {"k": 10},
      "world": SMALL_WORLD},
     {"eta_ang", "eta_within_bound", "feature_selected_cosine", "concept_selected_cosine",
      "cosine_gap"}),
    ({"experiment": "assumption-report", "trials": 2, "n_train": 100,
      "world": {"d1": 16, "d2": 8, "s": 2}},
     {"eta_ang", "eta_spa", "eta_rep", "kappa", "neighborhood_size"}),
    ({"experiment": "model-scaling", "trials": 2, "axes": {"width": [4]}, "global_ttt_heads": 2,
      **CLASSIFY},
     {"global_error", "ttt_error", "vote_error", "ttt_neighborhood_accuracy",
      "global_ttt_accuracy"}),
    ({"experiment": "model-scaling", "trials": 2, "axes": {"width": [4]},
      "feature_map": "random_relu", **CLASSIFY},
     {"global_error", "ttt_error", "global_xent", "ttt_xent"}),
    ({"experiment": "data-scaling", "axes": {"fraction": [0.5, 1.0]}, **CLASSIFY},
     {"global_error", "ttt_error", "vote_error", "class_count_spread", "subsample_size"}),
    ({"experiment": "moe-scaling", "axes": {"n_experts": [1, 2]},
      "moe": {"k": 20, "steps": 5}, **CLASSIFY},
     {"moe_error", "global_error", "ttt_error"}),
    ({"experiment": "sae-train", "trials": 1, "n_train": 128,
      "world": {"d1": 16, "d2": 8, "s": 2},
      "sae": {"d1": 16, "s": 2, "k0": 2, "ramp_steps": 0, "warmup_steps": 2, "horizon": 10,
              "batch_size": 32}},
     {"dead_fraction", "reconstruction", "atom_cosine"}),
    ({"experiment": "sae-mask", "trials": 2, "n_train": 200, "holdout": 10,
      "top_t": 2, "world": {"d1": 16, "d2": 8, "s": 2}, "ttt": {"k": 20},
      "mask": {"steps": 5}},
     {"mask_size", "active_union", "masked_accuracy", "dense_accuracy", "rel_tv_rank1",
      "rel_tv_rank2"}),
])
def test_every_kind_runs_on_a_small_grid(raw, metrics):
    config = validate_config({"seed": 0, "resamples": 50, **raw})
    result = run_experiment(config)
    assert not result.failures, result.failures
    assert metrics <= set(result.table["metric"])
    assert result.table["mean"].notna().all()


def test_data_scaling_subsample_is_balanced():
    config = validate_config({"experiment": "data-scaling", "seed": 0, "resamples": 50,
                              "axes": {"fraction": [0.5]}, **CLASSIFY})
    result = run_experiment(config)
    assert result.metric("class_count_spread")["mean"].iloc[0] <= 1.0
    assert result.metric("subsample_size")["mean"].iloc[0] == 100.0


def test_paired_axis_becomes_a_column():
    config = validate_config({"experiment": "ttt-rate", "seed": 4, "trials": 3,
                              "mode": "exhaustive", "resamples": 50, "axes": {"k": [32, 64]},
                              "world": {**SMALL_WORLD, "w_law": "pool_sparse"}})
    table = run_experiment(config).table
    assert list(table.columns[:2]) == ["experiment", "k"]
    assert table["k"].tolist() == [32, 64]
    assert table["n"].tolist() == [3, 3]


@pytest.mark.slow
def test_geometry_slack_within_bound():
    result = run_experiment(load_config(CONFIG_DIR / "geometry.toml"))
    assert not result.failures
    assert result.metric("eta_within_bound")["mean"].iloc[0] >= 0.9


def test_model_scaling_pools_trials():
    config = validate_config({"experiment": "model-scaling", "seed": 0, "resamples": 50,
                              "trials": 2, "axes": {"width": [4, 8]}, "global_ttt_heads": 2,
                              **CLASSIFY})
    result = run_experiment(config)
    assert not result.failures
    assert result.metric("ttt_error")["n"].tolist() == [20, 20]
    assert result.metric("global_ttt_accuracy")["n"].tolist() == [4, 4]


def test_shipped_model_scaling_uses_paired_seeds():
    assert load_config(CONFIG_DIR / "model_scaling.toml").trials == 3


@pytest.mark.slow
def test_feature_and_concept_neighborhoods_agree_on_clustered_worlds():
    result = run_experiment(load_config(CONFIG_DIR / "geometry_clustered.toml"))
    assert not result.failures
    gap = result.metric("cosine_gap")["mean"].iloc[0]
    assert 0.0 <= gap <= 0.05


@pytest.mark.slow
def test_neighborhood_sweep_is_u_shaped():
    result = run_experiment(load_config(CONFIG_DIR / "neighborhood_sweep.toml"))
    assert not result.failures
    curve = result.metric("ttt_error").sort_values("k")["mean"].to_numpy()
    best = int(np.argmin(curve))
    assert 0 < best < len(curve) - 1


@pytest.mark.slow
def test_learned_mask_is_small_and_keeps_accuracy():
    result = run_experiment(load_config(CONFIG_DIR / "sae_mask.toml"))
    assert not result.failures

    def mean(name):
        return result.metric(name)["mean"].iloc[0]

    assert mean("mask_ratio") <= 0.5
    assert mean("masked_accuracy") >= mean("unmasked_accuracy") - 0.02
    assert mean("dense_masked_agreement") >= 0.8


@pytest.mark.slow
def test_ghost_gradients_reduce_dead_features():
    result = run_experiment(load_config(CONFIG_DIR / "sae_train.toml"))
    assert not result.failures
    dead = result.metric("dead_fraction").set_index("ghost_weight")["mean"]
    assert dead[1e6] <= 0.10
    assert dead[0.0] > dead[1e6]
