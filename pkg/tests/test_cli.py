import csv
import hashlib
import json

import numpy as np
import pytest

from stmoe.cli import main
from stmoe.config import parse_run_config
from stmoe.errors import ConfigError


@pytest.fixture(scope="module")
def city(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = {"grid": {"height": 4, "width": 4, "bounds": [0, 1, 0, 1], "interval": 120},
            "patterns": [{"name": "c", "mask": np.eye(4).tolist(), "profile": "commuting"},
                         {"name": "r", "mask": (1 - np.eye(4)).tolist(), "profile": "residential"}],
            "weeks": 2, "name": "diagonal"}
    (root / "city.json").write_text(json.dumps(spec))
    assert main(["generate", "--config", str(root / "city.json"), "--seed", "3", "--out", str(root / "d")]) == 0
    return root


def run_config(root, name, **over):
    cfg = {"version": 1, "data": str(root / "d"), "out": str(root / name), "seed": 0,
           "fusion": {"n_c": 2, "n_p": 1, "n_q": 0, "day_offset": 12, "week_offset": 84},
           "model": {"K": 2, "hidden": 8, "depth": 2},
           "train": {"max_epochs": 2, "patience": 2}}
    cfg.update(over)
    p = root / f"{name}.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_generate_preset(tmp_path):
    assert main(["generate", "--preset", "tiny8", "--seed", "7", "--out", str(tmp_path / "d")]) == 0
    for f in ("manifest.json", "flow.bin", "external.bin", "truth_masks.bin", "patterns.json"):
        assert (tmp_path / "d" / f).exists()
    assert main(["generate", "--preset", "tiny8", "--seed", "7", "--out", str(tmp_path / "e")]) == 0
    assert sha(tmp_path / "d" / "flow.bin") == sha(tmp_path / "e" / "flow.bin")


def test_unknown_preset_lists_presets(tmp_path, capsys):
    assert main(["generate", "--preset", "atlantis", "--out", str(tmp_path / "d")]) == 2
    err = capsys.readouterr().err
    assert "tiny8" in err and "ring16" in err


def test_train_writes_artifacts_and_is_deterministic(city):
    assert main(["train", "--config", run_config(city, "a"), "--quiet"]) == 0
    assert main(["train", "--config", run_config(city, "b"), "--quiet"]) == 0
    for f in ("best.ckpt", "last.ckpt", "history.csv", "steps.csv", "run.json"):
        assert (city / "a" / f).exists()
    assert sha(city / "a" / "history.csv") == sha(city / "b" / "history.csv")
    assert sha(city / "a" / "steps.csv") == sha(city / "b" / "steps.csv")
    with open(city / "a" / "steps.csv") as fh:
        assert next(csv.reader(fh)) == ["step", "mse", "l_er", "l_eid", "total"]
    run = json.loads((city / "a" / "run.json").read_text())
    manifest = (city / "d" / "manifest.json").read_bytes()
    assert run["manifest_hash"] == hashlib.sha256(manifest).hexdigest()


def test_evaluate_reproduces_validation_mse(city, capsys):
    assert main(["train", "--config", run_config(city, "ev"), "--quiet"]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(city / "ev" / "best.ckpt"), "--data", str(city / "d"),
                 "--split", "val", "--out", str(city / "ev_out")]) == 0
    report = json.loads(capsys.readouterr().out)
    run = json.loads((city / "ev" / "run.json").read_text())
    assert report["metrics"]["mse"] == run["best_val_mse"]
    assert "quade" in report and "match" in report
    assert (city / "ev_out" / "metrics.csv").exists()
    assert main(["evaluate", "--checkpoint", str(city / "ev" / "best.ckpt"), "--data", str(city / "d"),
                 "--ablate-gs", "--ablate-gt"]) == 2


def test_resume_matches_uninterrupted_run(city):
    full = run_config(city, "full", train={"max_epochs": 4, "patience": 10})
    part = run_config(city, "part", train={"max_epochs": 2, "patience": 10})
    assert main(["train", "--config", full, "--quiet"]) == 0
    assert main(["train", "--config", part, "--quiet"]) == 0
    cont = run_config(city, "part", train={"max_epochs": 4, "patience": 10})
    assert main(["train", "--config", cont, "--resume", "--quiet"]) == 0
    assert sha(city / "full" / "history.csv") == sha(city / "part" / "history.csv")
    assert main(["train", "--config", run_config(city, "fresh"), "--resume"]) == 3


def test_rejects_bad_lambdas_and_keys(city):
    assert main(["train", "--config", run_config(city, "bad", loss={"lambda_er": 0.5, "lambda_eid": 0.5})]) == 2
    assert main(["train", "--config", run_config(city, "bad2", model={"K": 2, "widht": 3})]) == 2
    assert main(["train", "--config", run_config(city, "a"), "--ntop", "3"]) == 2
    with pytest.raises(ConfigError):
        parse_run_config({"version": 2, "data": "x"})


def test_missing_data_is_a_data_error(city):
    assert main(["train", "--config", run_config(city, "nod", data=str(city / "nowhere"))]) == 3


def test_export_attention(city, capsys):
    assert main(["train", "--config", run_config(city, "ex"), "--quiet"]) == 0
    capsys.readouterr()
    out = city / "att"
    assert main(["export-attention", "--checkpoint", str(city / "ex" / "best.ckpt"), "--data", str(city / "d"),
                 "--out", str(out), "--t", "30:40", "--coords", "0,0", "1,2"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n_anchors"] == 10
    grid = np.loadtxt(out / "expert_0.csv", delimiter=",")
    assert grid.shape == (4, 4)
    total = sum(np.loadtxt(out / f"expert_{k}.csv", delimiter=",") for k in range(2))
    np.testing.assert_allclose(total, 1.0, atol=1e-6)
    with open(out / "series_1_2.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10 and rows[0]["t"] == "31"
    assert (out / "match.json").exists()
    assert main(["export-attention", "--checkpoint", str(city / "ex" / "best.ckpt"), "--data", str(city / "d"),
                 "--out", str(out), "--coords", "9,9"]) == 3


def test_search_and_ablate(city):
    cfg = run_config(city, "srch", train={"max_epochs": 1, "patience": 1})
    assert main(["search", "--config", cfg, "--ks", "1,2", "--seeds", "0", "--lambda-eid", "0,0.1"]) == 0
    with open(city / "srch" / "search_rows.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
    cfg = run_config(city, "abl", train={"max_epochs": 1, "patience": 1})
    assert main(["ablate", "--config", cfg, "--seeds", "0"]) == 0
    summary = json.loads((city / "abl" / "ablation.json").read_text())["mean_test_mse"]
    assert set(summary) == {"full", "no_gs", "no_gt"}


def test_custom_city_name_is_recorded(city):
    patterns = json.loads((city / "d" / "patterns.json").read_text())
    assert {p["preset"] for p in patterns} == {"diagonal"}
