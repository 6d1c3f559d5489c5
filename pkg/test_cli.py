"""
End-to-end tests of the command line surface on a small synthetic dataset.
"""

import json
import logging

import pandas as pd
import pytest

from cvaerec.core.exceptions import RunLockedError
from cvaerec.core.run_manifest import directory_lock
from cvaerec.main import build_parser, main

logger = logging.getLogger(__name__)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Fixture files, preprocessed split and a one-epoch model shared by the module"""
    root = tmp_path_factory.mktemp("cli")
    assert main(["fixture", "--out", str(root / "data"), "--users", "400"]) == 0
    config = str(root / "data" / "config.json")
    assert main(["--config", config, "preprocess"]) == 0
    assert main(["--config", config, "train", "--max-epochs", "1"]) == 0
    return {"root": root, "config": config, "artifacts": root / "data" / "artifacts"}


def test_fixture_command_writes_files(tmp_path, capsys):
    assert main(["fixture", "--out", str(tmp_path), "--users", "50", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    for name in ("ratings.csv", "categories.csv", "fixture_truth.json", "config.json"):
        assert (tmp_path / name).exists()
    assert "ratings:" in out
    config = json.loads((tmp_path / "config.json").read_text(encoding="utf-8"))
    assert config["preset"] == "fixture"
    assert config["seed"] == 3


def test_preprocess_counts_match_truth(workspace):
    truth = json.loads((workspace["root"] / "data" / "fixture_truth.json").read_text(encoding="utf-8"))
    split = workspace["artifacts"] / "split"
    manifest = json.loads((split / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["n"] == truth["n_users"]
    assert manifest["interactions"] == truth["n_interactions"]
    assert manifest["category_names"] == truth["category_names"]
    run = json.loads((split / "run_manifest.json").read_text(encoding="utf-8"))
    assert run["command"] == "preprocess"
    assert len(run["inputs"]) == 2


def test_preprocess_rerun_is_byte_identical(workspace, tmp_path):
    out = tmp_path / "split"
    assert main(["--config", workspace["config"], "preprocess", "--out", str(out)]) == 0
    original = workspace["artifacts"] / "split"
    for name in ("manifest.json", "train.csv", "test_heldout.csv", "examples.csv"):
        assert (out / name).read_bytes() == (original / name).read_bytes(), name
    # run manifests carry timings and paths; their input hashes still agree
    a = json.loads((out / "run_manifest.json").read_text(encoding="utf-8"))
    b = json.loads((original / "run_manifest.json").read_text(encoding="utf-8"))
    assert sorted(a["inputs"].values()) == sorted(b["inputs"].values())
    assert a["seed"] == b["seed"]


def test_preprocess_missing_ratings_fails(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "preset": "fixture",
        "artifact_dir": str(tmp_path / "artifacts"),
        "dataset": {"ratings_path": str(tmp_path / "absent.csv"), "categories_path": str(tmp_path / "absent2.csv")},
    }), encoding="utf-8")
    assert main(["--config", str(config), "preprocess"]) == 1
    assert not (tmp_path / "artifacts" / "split").exists()


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as info:
        main(["analyze", "--which", "everything"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_global_flags_after_subcommand():
    args = build_parser().parse_args(["train", "--seed", "7", "--threads", "2"])
    assert args.seed == 7 and args.threads == 2
    args = build_parser().parse_args(["--seed", "8", "train"])
    assert args.seed == 8


def test_train_writes_summary(workspace):
    summary = json.loads((workspace["artifacts"] / "train" / "training_summary.json").read_text(encoding="utf-8"))
    assert len(summary["phases"]) == 2
    assert summary["phases"][0]["epochs_run"] == 1
    assert summary["selected_beta"] == summary["phases"][1]["cap"]
    assert (workspace["artifacts"] / "train" / "phase2" / "best.ckpt").exists()


def test_oracle_evaluation_is_perfect_and_repeatable(workspace, tmp_path):
    args = ["--config", workspace["config"], "evaluate", "--oracle", "--protocol", "total"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    metrics = pd.read_csv(tmp_path / "a" / "metrics.csv")
    assert (metrics["mean"] == 1.0).all()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_evaluate_trained_model(workspace, tmp_path, capsys):
    args = ["--config", workspace["config"], "evaluate", "--protocol", "conditioned",
            "--out", str(tmp_path), "--dump-cases"]
    assert main(args) == 0
    printed = capsys.readouterr().out
    assert "C-VAE" in printed
    cases = pd.read_csv(tmp_path / "cases.csv", keep_default_na=False)
    assert (cases["condition_index"] >= 0).all()
    assert set(cases["condition"]) <= set(json.loads(
        (workspace["artifacts"] / "split" / "manifest.json").read_text(encoding="utf-8"))["category_names"])


def test_analyze_purity(workspace, tmp_path, capsys):
    assert main(["--config", workspace["config"], "analyze", "--which", "purity", "--out", str(tmp_path)]) == 0
    value = float(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= value <= 1.0
    assert (tmp_path / "purity.csv").exists()
    assert (tmp_path / "run_manifest.json").exists()


def test_recommend(workspace, tmp_path, capsys):
    history = tmp_path / "history.txt"
    history.write_text("i001\ni002\ni003\n", encoding="utf-8")
    capsys.readouterr()
    assert main(["--config", workspace["config"], "recommend", "--history", str(history),
                 "--condition", "Bravo", "-N", "5"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert 0 < len(lines) <= 5
    items = [line.split("\t")[0] for line in lines]
    assert not {"i001", "i002", "i003"} & set(items)


def test_recommend_unknown_condition(workspace, tmp_path):
    history = tmp_path / "history.txt"
    history.write_text("i001\n", encoding="utf-8")
    assert main(["--config", workspace["config"], "recommend", "--history", str(history),
                 "--condition", "Zulu"]) == 1


def test_directory_lock(tmp_path, workspace):
    with directory_lock(tmp_path):
        with pytest.raises(RunLockedError):
            with directory_lock(tmp_path):
                pass
    with directory_lock(tmp_path):
        pass

    with directory_lock(workspace["artifacts"]):
        assert main(["--config", workspace["config"], "evaluate", "--oracle",
                     "--out", str(tmp_path / "eval")]) == 1
    assert not (workspace["artifacts"] / ".cvaerec.lock").exists()
