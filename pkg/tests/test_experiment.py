import json
from dataclasses import replace

import pytest
import yaml

from metaprune.pruner import CriterionConfig
from metaprune.workbench.cli import main
from metaprune.workbench.experiment import probe_epochs, reported_numbers, run_seed, seeded_config
from metaprune.workbench.pipeline import ArchConfig, ExperimentConfig, config_from_dict

from .test_pipeline import TINY

TINY_EXPERIMENT = {**TINY, "metatrain": {**TINY["metatrain"], "epochs": 3}, "initial_speed_up": 1.0}


def test_probe_epochs_spread_and_end_at_last():
    assert probe_epochs(20) == [6, 12, 19]
    assert probe_epochs(3) == [0, 1, 2]
    with pytest.raises(ValueError):
        probe_epochs(2)


def test_seeded_config_shifts_model_seeds_and_shares_criterion():
    crit = CriterionConfig(normalize="NONE", shrink_alpha=0.0)
    cfg = replace(ExperimentConfig(), criterion=crit)
    a, b = seeded_config(cfg, 0), seeded_config(cfg, 1)
    seeds_a = {*a.train_seeds, a.probe_seed}
    assert len(seeds_a) == 3 and not seeds_a & {*b.train_seeds, b.probe_seed}
    assert a.metatrain.seed != b.metatrain.seed
    assert a.metatrain.criterion == crit and b.dataset == cfg.dataset


def test_reported_numbers_drop_only_timings():
    r = {"a": 1, "timing_s": {"total": 3.0}, "nested": {"wall_time_s": 1.0, "b": [{"compare_time_s": 2, "c": 4}]}}
    assert reported_numbers(r) == {"a": 1, "nested": {"b": [{"c": 4}]}}


@pytest.fixture(scope="module")
def tiny_runs():
    cfg = config_from_dict(TINY_EXPERIMENT)
    transfer = ArchConfig("tiny_resnet", {"n": 4, "widths": [4, 8]})
    return cfg, run_seed(cfg, 0, transfer_arch=transfer), run_seed(cfg, 0, transfer_arch=transfer)


def test_run_seed_reports_both_modes_at_matched_budget(tiny_runs):
    cfg, r, _ = tiny_runs
    assert 1 <= r["selected_epoch"] <= 3
    assert r["margin"] == pytest.approx(r["metanet_final_acc"] - r["baseline_final_acc"])
    assert sorted(r["turning_points"]) == [1, 2, 3]
    assert r["turning_threshold"] == pytest.approx(r["baseline_curve_acc"] - cfg.turning_drop)
    assert r["metanet_stages"][-1]["speed_up"] >= cfg.final_speed_up
    assert r["baseline_stages"][-1]["speed_up"] >= cfg.final_speed_up
    assert [s["stage"] for s in r["baseline_stages"]] == ["initial", "prune", "finetune"]
    assert "transfer" in r and r["transfer"]["metanet_stages"][0]["flops"] > r["metanet_stages"][0]["flops"]


def test_run_seed_is_bit_reproducible(tiny_runs):
    _, a, b = tiny_runs
    assert reported_numbers(a) == reported_numbers(b)
    assert a["timing_s"]["total"] > 0


def test_cli_experiment_writes_report(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(TINY_EXPERIMENT))
    assert main(["experiment", "--config", str(cfg), "--seed", "1", "--no-trend", "--out", str(tmp_path / "e")]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    report = json.loads((tmp_path / "e" / "experiment_seed_1.json").read_text())
    assert summary["seed"] == 1 and report["margin"] == summary["margin"] and report["turning_points"] == {}
