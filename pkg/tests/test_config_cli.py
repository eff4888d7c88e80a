import json
import os

import pytest

from fsddi.cli import EXIT_CONFIG, EXIT_OK, EXIT_SKIPPED, main
from fsddi.config import FULL_SCALE_LR_GRID, config_from_dict, full_scale, parse_config
from fsddi.errors import ConfigurationError

TINY = {
    "data": {"train_size": 40, "val_size": 8, "test_size": 8, "height": 32, "width": 48},
    "split": {"scheme": "full_noniid", "clients": 4},
    "model": {"channels": [2, 4, 2]},
    "rounds": {"rounds": 3, "lr": 0.1, "batch_size": 4},
    "pipeline": {"split_round": 1, "fedavg_plus_epochs": 1,
                 "classifier": {"rounds": 2, "local_epochs": 1}},
}


def tiny(**changes):
    cfg = json.loads(json.dumps(TINY))
    for key, val in changes.items():
        if isinstance(val, dict):
            cfg.setdefault(key, {}).update(val)
        else:
            cfg[key] = val
    return cfg


def write_cfg(tmp_path, obj, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def test_empty_config_is_desk_preset():
    cfg = config_from_dict({})
    assert cfg.data.train_size == 800 and cfg.split.scheme == "full_noniid"
    assert cfg.rounds.rounds == cfg.pipeline.total_rounds == 120
    assert cfg.pipeline.split_round == 30 and cfg.method == "scfl"
    assert (cfg.model.height, cfg.model.width) == (cfg.data.height, cfg.data.width)
    assert config_from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("obj, key", [({"foo": 1}, "foo"), ({"data": {"foo": 1}}, "foo"),
                                      ({"pipeline": {"gmm": {"bar": 2}}}, "bar")])
def test_unknown_keys_are_named(obj, key):
    with pytest.raises(ConfigurationError, match=key):
        config_from_dict(obj)


def test_constraint_violations():
    with pytest.raises(ConfigurationError, match="scheme"):
        config_from_dict({"split": {"scheme": "random"}})
    with pytest.raises(ConfigurationError):
        config_from_dict({"rounds": {"rounds": 50}, "pipeline": {"total_rounds": 60}})
    with pytest.raises(ConfigurationError, match="height"):
        config_from_dict({"model": {"height": 32}})
    with pytest.raises(ConfigurationError, match="method"):
        config_from_dict({"method": "fedprox"})


def test_round_budget_syncs_both_ways():
    assert config_from_dict({"rounds": {"rounds": 50}}).pipeline.total_rounds == 50
    assert config_from_dict({"pipeline": {"total_rounds": 60}}).rounds.rounds == 60


def test_full_scale_preset():
    cfg = full_scale()
    assert cfg.rounds.rounds == 700 and cfg.data.train_size == 3200
    assert cfg.rounds.lr in FULL_SCALE_LR_GRID and cfg.pipeline.split_round == 30
    with pytest.raises(ConfigurationError):
        full_scale(lr=0.5)


def test_shipped_configs_parse():
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    names = sorted(f for f in os.listdir(root) if f.endswith(".json"))
    assert names
    for name in names:
        parse_config(os.path.join(root, name))


def test_seed_drives_data_and_hash_ignores_threads():
    a = config_from_dict({"seed": 7})
    b = config_from_dict({"seed": 7, "threads": 4})
    assert a.data.seed == 7 and a.hash() == b.hash()
    assert a.hash() != config_from_dict({"seed": 8}).hash()


def test_bad_json_exits_with_config_status(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    path.write_text(json.dumps({"foo": 1}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "foo" in capsys.readouterr().err


def test_cfl_on_iid_is_skipped(tmp_path):
    cfg = write_cfg(tmp_path, tiny(method="cfl", split={"scheme": "iid"}))
    out = tmp_path / "cfl"
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_SKIPPED
    assert json.loads((out / "manifest.json").read_text())["status"] == "skipped"


def read_metrics(out):
    return (out / "metrics.csv").read_bytes()


@pytest.mark.parametrize("method", ["fedavg", "scaffold", "fedavg_plus", "cfl", "scfl",
                                    "prior_scfl"])
def test_every_method_runs_and_reproduces(tmp_path, method):
    cfg = write_cfg(tmp_path, tiny(method=method))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--seed", "3", "--out", str(a)]) == EXIT_OK
    assert main(["run", "--config", cfg, "--seed", "3", "--out", str(b), "--threads", "4"]) == EXIT_OK
    assert read_metrics(a) == read_metrics(b)
    for name in ("config.json", "split.json", "manifest.json", "rounds.jsonl"):
        assert (a / name).exists()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["method"] == method
    assert len(manifest["dataset_hash"]) == 64 and manifest["status"] == "ok"
    if method in ("scfl", "prior_scfl", "cfl"):
        assert (a / "clustering.json").exists()
    if method in ("scfl", "prior_scfl"):
        for name in ("w_init.ckpt", "cluster0.ckpt", "classifier.ckpt"):
            assert (a / "checkpoints" / name).exists()
    rows = [json.loads(line) for line in (a / "rounds.jsonl").read_text().splitlines()]
    assert rows and all("round" in r and "wall_ms" in r for r in rows)


def test_generate_cluster_evaluate_chain(tmp_path, monkeypatch):
    monkeypatch.setenv("FSDDI_OUT", str(tmp_path / "root"))
    cfg = write_cfg(tmp_path, tiny(method="fedavg"))
    assert main(["generate-data", "--config", cfg]) == EXIT_OK
    data = tmp_path / "root" / "data"
    assert (data / "meta.json").exists() and (data / "split.json").exists()
    assert main(["run", "--config", cfg]) == EXIT_OK
    run = tmp_path / "root" / "fedavg-full_noniid-s0"
    ckpt = str(run / "checkpoints" / "final.ckpt")
    assert main(["cluster", "--checkpoint", ckpt, "--split", str(data), "--alpha", "0.05",
                 "--out", str(tmp_path / "c")]) == EXIT_OK
    cl = json.loads((tmp_path / "c" / "clustering.json").read_text())
    assert cl["M"] == 2 and cl["alpha"] == 0.05 and len(cl["assignments"]) == 40
    assert main(["evaluate", "--checkpoint", ckpt, "--split", str(data),
                 "--out", str(tmp_path / "e")]) == EXIT_OK
    assert b"test_shift" in (tmp_path / "e" / "metrics.csv").read_bytes()
