import csv
import json

import pytest
import torch

from damagelab.artifacts import TRAJECTORY_COLUMNS, read_trajectory_csv, verify_manifest, write_artifacts
from damagelab.cli import build_report, main, sweep_plan
from damagelab.config import OUTPUT_ROOT_ENV, ConfigError, config_hash, load_config, output_root, parse_config
from damagelab.policy import load_checkpoint

SMALL_PPO = {"rollout": 256, "minibatch": 64, "epochs": 1, "eval_episodes": 4}


def write_config(path, **raw):
    raw.setdefault("ppo", SMALL_PPO)
    raw.setdefault("steps", 512)
    path.write_text(json.dumps(raw))
    return str(path)


# --- config -----------------------------------------------------------------


def test_default_config_echoes_preset_table():
    exp = parse_config({"preset": "bricklayer"})
    acts = {a["name"]: (a["energy"], a["hazard"], a["perf"]) for a in exp.echo()["env"]["activities"]}
    assert acts["block_laying"] == (85, 90, 105)
    assert exp.echo()["env"]["role"] == {"window": 5, "alpha": 0.15, "dominant_index": 0}


def test_misspelled_key_is_named(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"preset": "bricklayer", "seedz": [0]}))
    with pytest.raises(ConfigError, match="seedz"):
        load_config(tmp_path / "c.json")
    with pytest.raises(ConfigError, match="env_overrides.role.alfa"):
        parse_config({"env_overrides": {"role": {"alfa": 0.2}}})
    with pytest.raises(ConfigError, match="ppo.lr_rate"):
        parse_config({"ppo": {"lr_rate": 0.1}})


def test_alpha_override_echoed():
    exp = parse_config({"env_overrides": {"role": {"alpha": 0.20}}})
    assert exp.echo()["env"]["role"]["alpha"] == 0.20
    assert exp.env.role.alpha == 0.20


def test_invalid_override_rejected():
    with pytest.raises(ConfigError):
        parse_config({"env_overrides": {"role": {"alpha": 0.0}}})


def test_version_and_seed_checks():
    with pytest.raises(ConfigError):
        parse_config({"schema_version": 2})
    with pytest.raises(ConfigError):
        parse_config({"seeds": "0-4"})
    with pytest.raises(ConfigError):
        parse_config({"condition": {"kind": "sac"}})


def test_run_hash_depends_on_seed_not_output_dir():
    a = parse_config({"output_dir": "x"})
    b = parse_config({"output_dir": "y"})
    assert a.run_hash(0) == b.run_hash(0) != a.run_hash(1)


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert output_root() == tmp_path


# --- artifacts --------------------------------------------------------------


def test_manifest_lists_every_file_with_hash(tmp_path):
    steps = [{c: 0 for c in TRAJECTORY_COLUMNS} | {"efforts": [0.1, 0.2]} for _ in range(3)]
    manifest = write_artifacts(tmp_path, config_hash="h", summary={"a": 1}, trajectory=steps,
                               checkpoint=b"bytes", config_echo={"x": 1})
    assert set(manifest["files"]) == {"config.json", "summary.json", "trajectory.csv", "checkpoint.pt"}
    assert manifest["config_hash"] == "h" and manifest["tool_version"]
    assert verify_manifest(tmp_path) == []
    (tmp_path / "summary.json").write_text("{}")
    assert verify_manifest(tmp_path) == ["summary.json"]


def test_summary_from_other_config_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_artifacts(tmp_path, config_hash="h", summary={"config_hash": "other"})


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


# --- commands ---------------------------------------------------------------


def test_sweep_plan_role_grid(tmp_path):
    exp = parse_config({"seeds": [0, 1, 2, 3, 4]})
    plan = sweep_plan(exp, tmp_path, [3, 5, 7], [0.10, 0.15, 0.20])
    assert len(plan) == 45
    assert len({str(p[2]) for p in plan}) == 45
    assert {(c.env.role.window, c.env.role.alpha) for c, _, _ in plan} == {
        (w, a) for w in (3, 5, 7) for a in (0.10, 0.15, 0.20)
    }


def test_sweep_dry_run(tmp_path, capsys):
    argv = ["sweep", "--seeds", "0", "1", "2", "3", "4", "--windows", "3", "5", "7",
            "--alphas", "0.10", "0.15", "0.20", "--dry-run", "--out", str(tmp_path)]
    assert main(argv) == 0
    assert json.loads(capsys.readouterr().out)["runs"] == 45


def test_fixed_share_without_schedule_is_usage_error(capsys):
    assert main(["train", "--condition", "dyna-fixed-share", "--steps", "10"]) == 2
    assert "--schedule" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"presett": "bricklayer"}))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 1
    assert "presett" in capsys.readouterr().err


def test_argparse_rejects_unknown_condition():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--condition", "sac"])
    assert exc.value.code != 0


@pytest.fixture(scope="module")
def short_horizon_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = write_config(root / "c.json", seeds=[3])
    out = root / "h13"
    assert main(["train", "--config", cfg, "--condition", "ppo-real", "--horizon", "13", "--out", str(out)]) == 0
    return root, out, cfg


def test_train_writes_artifacts(short_horizon_run):
    _, out, _ = short_horizon_run
    for name in ("summary.json", "trajectory.csv", "checkpoint.pt", "manifest.json", "config.json", "history.json"):
        assert (out / name).exists()
    assert verify_manifest(out) == []
    summary = json.loads((out / "summary.json").read_text())
    rows = read_trajectory_csv(out / "trajectory.csv")
    assert list(rows[0]) == list(TRAJECTORY_COLUMNS)
    assert rows[-1]["termination"] != "none"
    assert json.loads((out / "manifest.json").read_text())["config_hash"] == summary["config_hash"]


def test_trajectory_rows_equal_episode_length(short_horizon_run):
    _, out, _ = short_horizon_run
    rows = read_trajectory_csv(out / "trajectory.csv")
    assert [int(r["t"]) for r in rows] == list(range(len(rows)))
    assert sum(r["termination"] != "none" for r in rows) == 1


def test_short_horizon_checkpoint_evaluates_on_full_career(short_horizon_run, capsys):
    _, out, _ = short_horizon_run
    _, meta = load_checkpoint(out / "checkpoint.pt")
    assert meta["eval_env"]["horizon"] == 49
    assert meta["condition"]["train_horizon"] == 13
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--episodes", "3"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["eval_episodes"] == 3 and summary["condition"]["train_horizon"] == 13


def test_rerun_is_identical(short_horizon_run):
    root, out, cfg = short_horizon_run
    again = root / "again"
    assert main(["train", "--config", cfg, "--condition", "ppo-real", "--horizon", "13", "--out", str(again)]) == 0
    first = json.loads((out / "manifest.json").read_text())
    second = json.loads((again / "manifest.json").read_text())
    assert first == second


def test_report_over_summaries(short_horizon_run, capsys, tmp_path):
    root, _, _ = short_horizon_run
    rows = build_report(root)
    assert len(rows) == 1 and rows[0]["n_seeds"] == 2
    assert rows[0]["condition"] == "ppo_real+H13"
    assert main(["report", str(root), "--csv", str(tmp_path / "r.csv")]) == 0
    assert "completion_mean" in capsys.readouterr().out
    with open(tmp_path / "r.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 1


def test_dp_solve_and_eval(tmp_path, capsys):
    out = tmp_path / "dp"
    assert main(["dp-solve", "--horizon", "4", "--grid-step", "0.05", "--out", str(out)]) == 0
    solved = json.loads(capsys.readouterr().out)
    assert solved["completed"] and verify_manifest(out) == []
    assert main(["dp-eval", "--table", str(out / "value_table.npz"), "--out", str(tmp_path / "t.csv")]) == 0
    assert json.loads(capsys.readouterr().out)["return"] == pytest.approx(solved["return"])
    assert len(read_trajectory_csv(tmp_path / "t.csv")) == 4


def test_fixed_share_training_with_schedule(tmp_path, capsys):
    dp = tmp_path / "dp"
    assert main(["dp-solve", "--grid-step", "0.05", "--out", str(dp)]) == 0
    cfg = write_config(tmp_path / "c.json", seeds=[0])
    out = tmp_path / "fs"
    argv = ["train", "--config", cfg, "--condition", "dyna-fixed-share", "--schedule", str(dp / "schedule.json"), "--out", str(out)]
    assert main(argv) == 0
    _, meta = load_checkpoint(out / "checkpoint.pt")
    assert meta["schedule"] is not None
    rows = read_trajectory_csv(out / "trajectory.csv")
    assert all(float(r["s_dom"]) >= 0.15 - 1e-12 for r in rows)


def test_synth_commands_emit_csv(tmp_path, capsys):
    assert main(["synth", "h-star", "--kappas", "0.075", "0.055", "0.15"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [r["kappa"] for r in rows] == ["0.075", "0.055", "0.15"]
    assert main(["synth", "gap", "--kappa", "0.1", "--beta", "1", "--e-low", "0.5", "--horizon", "2"]) == 0
    row = next(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert float(row["gap"]) == pytest.approx(0.430625)
    argv = ["synth", "verify", "--kappas", "0.1", "--max-horizon", "6", "--samples", "20000", "--out", str(tmp_path / "v.csv")]
    assert main(argv) == 0
    assert len(list(csv.DictReader(open(tmp_path / "v.csv")))) == 5


def test_cmaes_command(tmp_path, capsys):
    out = tmp_path / "cma"
    assert main(["cmaes", "--horizon", "3", "--popsize", "6", "--generations", "4", "--out", str(out)]) == 0
    assert verify_manifest(out) == []
    assert len(list(csv.DictReader(open(out / "generations.csv")))) == 4


def test_checkpoint_loads_with_torch(short_horizon_run):
    _, out, _ = short_horizon_run
    raw = torch.load(out / "checkpoint.pt", weights_only=False)
    assert set(raw) == {"state_dict", "config", "meta"}
