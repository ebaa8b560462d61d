import json

import pytest
import yaml

from metaprune.workbench.checkpoint import load_checkpoint
from metaprune.workbench.cli import main
from metaprune.graphcodec import network_to_graph
from metaprune.metanet import MetanetConfig, init_metanetwork
from metaprune.workbench.pipeline import ExperimentConfig, StageError, config_from_dict, load_config, make_bundle, run_pipeline

TINY = {
    "dataset": {"kind": "shapes8x8", "seed": 0, "train_size": 200, "test_size": 100, "classes": 10},
    "arch": {"name": "tiny_resnet", "attrs": {"n": 2, "widths": [4, 8]}},
    "train": {"epochs": 2, "lr": 0.05},
    "initial_finetune": {"epochs": 1, "lr": 0.01},
    "metanet_finetune": {"epochs": 1, "lr": 0.01},
    "final_finetune": {"epochs": 1, "lr": 0.01},
    "metanet": {"num_layers": 1, "hidden_dim": 4, "node_res_ratio": 0.01, "edge_res_ratio": 0.01},
    "metatrain": {"epochs": 2, "batch_size": 32, "pruner_reg": 0.01},
    "initial_speed_up": 1.2,
    "final_speed_up": 1.6,
    "curve_step_fraction": 0.3,
    "curve_max_speed_up": 1.5,
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_config_loading_and_unknown_keys(cfg_file, tmp_path):
    cfg = load_config(cfg_file)
    assert cfg.train.epochs == 2 and cfg.metatrain.pruner_reg == 0.01 and cfg.arch.attrs["widths"] == [4, 8]
    js = tmp_path / "c.json"
    js.write_text(json.dumps(TINY))
    assert load_config(js).to_dict() == cfg.to_dict()
    with pytest.raises(ValueError, match="unknown config keys"):
        config_from_dict({"epochz": 3})
    with pytest.raises(ValueError, match="unknown keys in 'train'"):
        config_from_dict({"train": {"epochz": 3}})
    assert load_config(None).final_speed_up == ExperimentConfig().final_speed_up


def test_pipeline_modes_share_budget_and_speed_up(tmp_path):
    cfg = config_from_dict(TINY)
    cfg.out_dir = str(tmp_path / "out")
    data = cfg.dataset.load()
    bundle = make_bundle(cfg, cfg.probe_seed, "eval", data)
    g = network_to_graph(bundle.spec, bundle.params)
    net = init_metanetwork(MetanetConfig.for_graph(g, **cfg.metanet), 0)
    meta = run_pipeline(cfg, net, bundle=bundle, data=data, curves=False)
    base = run_pipeline(cfg, None, bundle=bundle, data=data)
    assert meta["finetune_epochs"] == base["finetune_epochs"] == 2
    for rep in (meta, base):
        assert rep["final_speed_up"] >= cfg.final_speed_up
        assert rep["stages"][0]["stage"] == "initial" and rep["stages"][-1]["stage"] == "finetune"
    assert [s["stage"] for s in meta["stages"]] == ["initial", "metanetwork", "metanetwork_finetune", "prune", "finetune"]
    assert (tmp_path / "out" / "baseline" / "curve_before_prune.csv").exists()
    pruned = load_checkpoint(tmp_path / "out" / "metanet" / "pruned")
    assert pruned.spec.to_dict() == meta["final_spec"]


def test_pipeline_stage_errors(tmp_path):
    cfg = config_from_dict(TINY)
    with pytest.raises(StageError, match="metanetwork"):
        run_pipeline(cfg, None, mode="metanet")
    cfg.final_speed_up = 1e6
    data = cfg.dataset.load()
    bundle = make_bundle(cfg, 0, "eval", data)
    with pytest.raises(StageError, match="'prune'.*max achievable"):
        run_pipeline(cfg, None, bundle=bundle, data=data, curves=False)


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()[-1]
    return code, json.loads(out)


def test_cli_end_to_end(cfg_file, tmp_path, capsys):
    code, res = _run(capsys, "gen-data", "--config", cfg_file, "--out", tmp_path / "data")
    assert code == 0 and res["train_size"] == 200
    code, res = _run(capsys, "prepare-data-model", "--config", cfg_file, "--seed", 0, "--out", tmp_path / "b")
    assert code == 0 and res["achieved_initial_speed_up"] >= 1.2
    train_bundle = res["bundle"]
    code, res = _run(capsys, "prepare-data-model", "--config", cfg_file, "--seed", 1, "--role", "eval", "--out", tmp_path / "b")
    probe = res["bundle"]
    code, res = _run(capsys, "meta-train", "--config", cfg_file, "--bundles", train_bundle, "--out", tmp_path / "meta")
    assert code == 0 and len(res["checkpoints"]) == 2
    code, res = _run(
        capsys, "select-metanet", "--config", cfg_file, "--checkpoints", tmp_path / "meta", "--probe", probe,
        "--target-acc", 0.0, "--threshold", 0.05, "--out", tmp_path / "sel",
    )
    assert code == 0 and res["epoch"] == 2 and res["met_target"]
    code, res = _run(capsys, "curve", "--config", cfg_file, "--bundle", probe, "--metanet", res["checkpoint"],
                     "--step-fraction", 0.3, "--max-speed-up", 1.5, "--out", tmp_path / "curve")
    assert code == 0 and res["points"] >= 2
    code, res = _run(capsys, "prune", "--config", cfg_file, "--bundle", probe, "--speed-up", 1.5, "--out", tmp_path / "p")
    assert code == 0 and res["speed_up"] >= 1.5
    code, res = _run(capsys, "eval", "--config", cfg_file, "--bundle", res["pruned"])
    assert code == 0 and 0 <= res["acc"] <= 1
    code, res = _run(capsys, "pipeline", "--config", cfg_file, "--seed", 1, "--out", tmp_path / "pipe")
    assert code == 0 and res["mode"] == "baseline" and (tmp_path / "pipe" / "summary_baseline.txt").exists()


def test_cli_errors_are_single_json_lines(cfg_file, tmp_path, capsys):
    code, res = _run(capsys, "prune", "--config", cfg_file, "--bundle", tmp_path / "missing", "--speed-up", 2)
    assert code == 1 and res["type"] == "CheckpointError"
    code, res = _run(capsys, "pipeline", "--config", cfg_file, "--mode", "metanet")
    assert code == 1 and "metanetwork" in res["error"]
