import fcntl
import json

import pytest

from tlcorrect.cli import main
from tlcorrect.config import parse_config_text
from tlcorrect.pipeline import (
    LockedError,
    StageDependencyError,
    file_hash,
    load_manifest,
    run_pipeline,
    verify_manifest,
)

TINY = """
name: tiny
seed: 3
true_system: {name: van-der-pol, params: {mu: 1.0}}
prior_system: {name: van-der-pol, params: {mu: 0.5}}
domain: {lower: [-2, -1.5], upper: [2, 1.5]}
fine_step: 0.2
lf_data: {count: 200, mode: trajectory, horizon: 20}
hf_data: {count: 20, lag_times: {start: 0.2, stop: 1.0, step: 0.2}}
architecture: {hidden_layers: 2, width: 8}
prior_training: {epochs: 20, batch_size: 50}
correction: {method: tl-recurrent, split_index: 1, epochs: 10, batch_size: 10}
evaluation: {n_traj: 4, horizon: 4}
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


def outputs(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.suffix in (".csv", ".json")
            and p.name != "manifest.json"}


def test_stage_commands_then_idempotent_rerun(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    for stage in ("generate", "train-prior", "correct", "evaluate"):
        assert main([stage, "--config", str(tiny_config), "--out", str(out)]) == 0
    first = outputs(out)
    assert {"tiny_prior_error.csv", "tiny_posterior_error.csv", "prior.json", "posterior.json"} <= set(first)
    mtimes = {p.name: p.stat().st_mtime_ns for p in out.iterdir()}
    manifest = load_manifest(out)
    assert verify_manifest(out) == []

    cfg = parse_config_text(TINY)
    again = run_pipeline(cfg, out)
    assert outputs(out) == first
    for name, t in mtimes.items():
        if name != "manifest.json" and not name.startswith("."):
            assert (out / name).stat().st_mtime_ns == t, f"{name} was rewritten"
    assert again["stages"] == manifest["stages"]


def test_manifest_echo_and_hashes(tiny_config, tmp_path):
    out = tmp_path / "run"
    assert main(["generate", "--config", str(tiny_config), "--out", str(out), "--seed", "11"]) == 0
    m = load_manifest(out)
    assert m["seeds"]["master"] == 11
    assert m["config"]["lf_data"]["count"] == 200
    assert m["config"]["correction"]["training"]["seed"] == m["seeds"]["correction"]
    assert m["config"]["prior_training"]["seed"] == m["seeds"]["prior"]
    for name, digest in m["stages"]["generate"]["artifacts"].items():
        assert file_hash(out / name) == digest
    (out / "hf_data.csv").write_text("tampered\n")
    assert verify_manifest(out) == ["hf_data.csv"]


def test_changed_config_reruns_only_downstream(tmp_path):
    out = tmp_path / "run"
    cfg = parse_config_text(TINY)
    first = run_pipeline(cfg, out)
    cfg2 = parse_config_text(TINY.replace("evaluation: {n_traj: 4", "evaluation: {n_traj: 5"))
    second = run_pipeline(cfg2, out)
    for stage in ("generate", "train-prior", "correct"):
        assert second["stages"][stage] == first["stages"][stage]
    assert second["stages"]["evaluate"]["key"] != first["stages"]["evaluate"]["key"]


def test_evaluate_without_prior_names_missing_artifact(tiny_config, tmp_path, capsys):
    out = tmp_path / "empty"
    code = main(["evaluate", "--config", str(tiny_config), "--out", str(out)])
    assert code == 1
    err = capsys.readouterr().err
    assert "prior.json" in err and "train-prior" in err
    with pytest.raises(StageDependencyError, match="prior.json"):
        run_pipeline(parse_config_text(TINY), out, ["evaluate"])


def test_validation_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("preset: damped-pendulum\nhf_data:\n  lag_steps: [1, 5]\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "tl-recurrent" in capsys.readouterr().err
    bad.write_text("preset: duffing\ncorection: {}\n")
    assert main(["generate", "--config", str(bad)]) == 2
    assert "bad.yaml:2" in capsys.readouterr().err
    assert main(["generate"]) == 2
    assert main(["reproduce", "duffing", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_argument_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["reproduce", "duffing", "--scale", "2"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["reproduce", "no-such-preset"])
    assert exc.value.code == 2


def test_presets_listing(capsys):
    assert main(["presets"]) == 0
    assert "damped-pendulum-coarse" in capsys.readouterr().out.split()


def test_lock_blocks_second_run(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    with (out / ".tlcorrect.lock").open("w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        with pytest.raises(LockedError):
            run_pipeline(parse_config_text(TINY), out, ["generate"])


def test_summary_contents(tmp_path):
    out = tmp_path / "run"
    run_pipeline(parse_config_text(TINY), out)
    s = json.loads((out / "summary.json").read_text())
    assert s["n_traj"] == 4 and s["horizon"] == 4.0
    assert s["ratio"] == pytest.approx(s["posterior_time_average"] / s["prior_time_average"])
