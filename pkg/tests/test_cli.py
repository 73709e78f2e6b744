import json

import pytest

from dualflow.cli import main
from dualflow.config import load_config
from dualflow.motion import load_duet

SMALL = ["--profile", "desk", "--set", "eval.n_clips=8", "eval.steps=2", "eval.feature_dim=8"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    for cmd in (["make-dataset"], ["build-index"], ["train", "--max-steps", "2"]):
        assert main([*cmd, *SMALL, "--run", str(root)]) == 0
    return root


def test_run_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DUALFLOW_RUN_DIR", str(tmp_path / "env"))
    assert main(["make-dataset", *SMALL]) == 0
    assert (tmp_path / "env" / "data" / "manifest.jsonl").exists()


def test_records_written(run_dir):
    for cmd in ("make-dataset", "build-index", "train"):
        rec = json.loads((run_dir / f"{cmd}.run.json").read_text())
        assert rec["command"] == cmd and rec["config_echo"] == f"{cmd}.config"
        assert set(rec["seeds"]) == {"data", "train", "sample", "eval"}
        assert rec["build_id"]
    assert load_config(run_dir / "train.config") == load_config(overrides=SMALL[3:], profile="desk")


def test_train_log_and_checkpoint(run_dir):
    rows = [json.loads(line) for line in (run_dir / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1]
    assert (run_dir / "checkpoints" / "model.json").exists()


def test_invalid_config_exit_2(run_dir, capsys):
    code = main(["train", "--run", str(run_dir), "--set", "model.n_heads=3", "model.latent_dim=64"])
    assert code == 2
    assert "n_heads" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path, capsys):
    assert main(["make-dataset", "--run", str(tmp_path), "--set", "data.n_clip=3"]) == 2
    assert "data.n_clip" in capsys.readouterr().err


def test_reactive_without_actor_exit_2(run_dir, capsys):
    assert main(["sample", *SMALL, "--run", str(run_dir), "--mode", "reactive"]) == 2
    assert "--actor" in capsys.readouterr().err


def test_unknown_subcommand_exit_2():
    assert main(["bogus"]) == 2
    assert main([]) == 2


def test_missing_prerequisites_exit_2(tmp_path, capsys):
    assert main(["train", *SMALL, "--run", str(tmp_path)]) == 2
    assert "make-dataset" in capsys.readouterr().err


def test_unknown_clip_exit_2(run_dir, capsys):
    assert main(["sample", *SMALL, "--run", str(run_dir), "--clip", "nope"]) == 2
    assert "nope" in capsys.readouterr().err


def test_sample_and_reactive(run_dir, tmp_path):
    out = tmp_path / "s"
    args = ["sample", *SMALL, "--run", str(run_dir), "--clip", "clip_000000", "--per-condition", "2",
            "--steps", "2", "--out", str(out)]
    assert main(args) == 0
    files = sorted(out.glob("*.dfmo"))
    assert len(files) == 2
    side = json.loads(files[0].with_suffix(".json").read_text())
    assert side["steps"] == 2 and side["condition"]["clip_id"] == "clip_000000"

    actor = load_duet(files[0]).frames_a
    rout = tmp_path / "r"
    assert main(["sample", *SMALL, "--run", str(run_dir), "--mode", "reactive", "--actor", str(files[0]),
                 "--clip", "clip_000001", "--per-condition", "1", "--steps", "2", "--out", str(rout)]) == 0
    (reacted,) = rout.glob("*.dfmo")
    assert (load_duet(reacted).frames_a == actor).all()


def test_eval_needs_enough_samples(run_dir, tmp_path, capsys):
    out = tmp_path / "few"
    main(["sample", *SMALL, "--run", str(run_dir), "--clip", "clip_000000", "--per-condition", "1",
          "--steps", "1", "--out", str(out)])
    assert main(["eval", *SMALL, "--run", str(run_dir), "--samples", str(out)]) == 2
    assert "32" in capsys.readouterr().err


def test_retrieve_prints_results(run_dir, capsys):
    assert main(["retrieve", *SMALL, "--run", str(run_dir), "--clip", "clip_000002"]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(out["results"]) == {"S", "B", "R", "M"}
    assert all(e["clip_id"] != "clip_000002" for entries in out["results"].values() for e in entries)
