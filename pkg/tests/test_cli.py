"""Operator surface: subcommands, exit statuses, artifacts on disk."""

import json

import numpy as np
import pytest

from causalworld.cli import main
from causalworld.envs import make_env, uniform_random_policy, collect_steps
from causalworld.fmdp import ReplayBuffer, write_transition_log
from causalworld.runs import load_checkpoint


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--nonsense"])
    assert exc.value.code == 2


def test_train_tiny_run_writes_artifacts(tmp_path, capsys):
    status = main([
        "train", "--env", "vacuum", "--epochs", "1", "--steps-per-epoch", "40",
        "--eta", "0.1", "--seed", "1", "--out", str(tmp_path / "run"),
        "--model-free", "--eval-episodes", "1",
    ])
    assert status == 0
    out = capsys.readouterr().out
    assert "run written" in out
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert (tmp_path / "run" / "figures" / "learning_curve.png").exists()
    run = load_checkpoint(tmp_path / "run")
    assert run.env_name == "vacuum"


def test_discover_from_log(tmp_path, capsys):
    env = make_env("vacuum")
    buf = ReplayBuffer(env.schema, capacity=3000)
    collect_steps(env, uniform_random_policy(env.schema), 3000, buf,
                  np.random.default_rng(0))
    log = tmp_path / "log.jsonl"
    write_transition_log(log, buf)
    out = tmp_path / "graph.txt"
    status = main(["discover", "--data", str(log), "--env", "vacuum",
                   "--eta", "0.05", "--out", str(out)])
    assert status == 0
    assert out.exists()
    text = capsys.readouterr().out
    assert "position' <-" in text


def test_discover_requires_schema_source(tmp_path):
    log = tmp_path / "log.jsonl"
    log.write_text("")
    status = main(["discover", "--data", str(log), "--out", str(tmp_path / "g.txt")])
    assert status == 1


def test_explain_with_contrast(tiny_run, capsys):
    status = main([
        "explain", "--run", str(tiny_run), "--step", "3",
        "--action", "1", "--horizon", "3", "--tau", "0.05",
        "--targets", "gain_x4", "--contrast", "2",
    ])
    assert status == 0
    out = capsys.readouterr().out
    assert "instead of" in out or "same outcome" in out
    explain_dir = tiny_run / "explain"
    assert (explain_dir / "chain_step3.json").exists()
    assert (explain_dir / "chain_step3.dot").exists()
    assert (explain_dir / "chain_step3_contrast.json").exists()
    payload = json.loads((explain_dir / "chain_step3.json").read_text())
    assert {"nodes", "edges", "text"} <= set(payload)


def test_explain_factual_only(tiny_run, capsys):
    status = main([
        "explain", "--run", str(tiny_run), "--step", "0",
        "--action", "0", "--horizon", "2", "--tau", "0.1",
    ])
    assert status == 0
    assert capsys.readouterr().out.strip()


def test_simulate_appends_episodes(tiny_run, capsys):
    before = sum(1 for _ in open(tiny_run / "transitions.jsonl"))
    status = main(["simulate", "--run", str(tiny_run), "--episodes", "1",
                   "--seed", "3"])
    assert status == 0
    after = sum(1 for _ in open(tiny_run / "transitions.jsonl"))
    assert after == before + 64  # synthetic episodes run to the 64-step cap
    assert "mean return" in capsys.readouterr().out


def test_missing_run_is_reported_once_on_stderr(tmp_path, capsys):
    status = main(["explain", "--run", str(tmp_path / "ghost"), "--step", "0",
                   "--action", "0"])
    assert status == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1
    assert "manifest" in err


def test_checkpoint_round_trip_preserves_predictions(tiny_run):
    run1 = load_checkpoint(tiny_run)
    run2 = load_checkpoint(tiny_run)
    state = {"x_1": 1.0, "x_2": 0.5, "x_3": 2.0, "x_4": 0.1, "tau": 30.0}
    p1 = run1.ensemble.mean_posterior(state, {"a": 1})
    p2 = run2.ensemble.mean_posterior(state, {"a": 1})
    assert p1 == p2
    a1 = run1.policy.mode_action(state)
    a2 = run2.policy.mode_action(state)
    assert a1 == a2


def test_corrupted_policy_blob_detected(tiny_run):
    blob = tiny_run / "checkpoint" / "policy.params"
    data = bytearray(blob.read_bytes())
    data[-1] ^= 0xFF
    original = bytes(data[-1:])
    blob.write_bytes(bytes(data))
    try:
        from causalworld.scm import CheckpointError

        with pytest.raises(CheckpointError, match="digest"):
            load_checkpoint(tiny_run)
    finally:
        data[-1] ^= 0xFF
        blob.write_bytes(bytes(data))
