"""End-to-end checks of the command line: exit codes, artifacts, determinism."""

import csv
import json

import numpy as np
import pytest

from arcpursuit import cli
from arcpursuit.learning import load_weights
from arcpursuit.sim import EpisodeConfig, run_episode, write_record
from arcpursuit.world import EnvConfig

# keep episodes tiny so the whole file stays fast
FAST = ["--set", "env.t_max=1.0", "--set", "expert.pso.n_iters=2"]


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_no_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        cli.main([])
    assert err.value.code == cli.EXIT_USAGE
    capsys.readouterr()


def test_unknown_option_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        cli.main(["train", "--frobnicate"])
    assert err.value.code == cli.EXIT_USAGE
    capsys.readouterr()


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as err:
        cli.main(["--help"])
    assert err.value.code == 0
    text = capsys.readouterr().out
    for word in ("train", "eval", "replay", "augment", "selftest",
                 "env.dt", "learning.alpha_actor"):
        assert word in text


def test_train_zero_episodes_writes_initial_weights(tmp_path, capsys):
    rc = cli.main(["train", "--episodes", "0", "--seed", "5",
                   "--out", str(tmp_path)])
    assert rc == 0
    capsys.readouterr()

    bundle = load_weights(tmp_path / "weights_seed5_n6.json")
    decoded = bundle.model.decode()
    assert decoded.k_ap == pytest.approx(5.0)
    assert decoded.r_safe == pytest.approx(0.5)
    assert decoded.r_avo == pytest.approx(5.5)

    assert read_csv(tmp_path / "losses_seed5.csv") == [
        ["component", "update", "loss"]]
    assert read_csv(tmp_path / "train_episodes_seed5.csv") == [
        ["episode", "status", "duration"]]

    manifest = json.loads((tmp_path / "manifest_train_seed5.json").read_text())
    assert manifest["master_seed"] == 5
    assert manifest["episodes"] == 0
    assert manifest["config"]["n_defenders"] == 6
    assert manifest["config"]["env"]["dt"] == 0.05


def test_train_repeats_byte_identical(tmp_path, capsys):
    for sub in ("a", "b"):
        rc = cli.main(["train", "--episodes", "1", "--augment", "2",
                       "--seed", "3", "--quiet", *FAST,
                       "--out", str(tmp_path / sub)])
        assert rc == 0
    capsys.readouterr()
    for name in ("weights_seed3_n6.json", "losses_seed3.csv",
                 "train_episodes_seed3.csv", "manifest_train_seed3.json"):
        assert ((tmp_path / "a" / name).read_bytes()
                == (tmp_path / "b" / name).read_bytes()), name


def test_eval_expert_writes_summary(tmp_path, capsys):
    rc = cli.main(["eval", "--mode", "expert", "--episodes", "2",
                   "--seed", "9", *FAST, "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "success rate" in out

    rows = read_csv(tmp_path / "eval_expert_n6_seed9_episodes.csv")
    assert rows[0] == ["episode", "status", "duration"]
    assert len(rows) == 3

    summary = read_csv(tmp_path / "eval_expert_n6_seed9_summary.csv")
    record = dict(zip(summary[0], summary[1]))
    assert int(record["episodes"]) == 2
    counts = (int(record["captures"]) + int(record["breaches"])
              + int(record["timeouts"]))
    assert counts == 2


def test_eval_actor_requires_weights(capsys):
    rc = cli.main(["eval", "--mode", "actor", "--episodes", "1"])
    assert rc == cli.EXIT_USAGE
    assert "--weights" in capsys.readouterr().err


def test_eval_records_feed_replay(tmp_path, capsys):
    rc = cli.main(["train", "--episodes", "0", "--seed", "2",
                   "--out", str(tmp_path)])
    assert rc == 0
    weights = tmp_path / "weights_seed2_n6.json"

    rc = cli.main(["eval", "--mode", "actor", "--weights", str(weights),
                   "--episodes", "1", "--keep-records", "1", "--seed", "2",
                   *FAST, "--out", str(tmp_path)])
    assert rc == 0
    record = tmp_path / "record_actor_n6_seed2_ep0.jsonl"
    assert record.is_file()

    rc = cli.main(["replay", str(record), "--out", str(tmp_path)])
    assert rc == 0
    capsys.readouterr()

    theta = read_csv(tmp_path / "record_actor_n6_seed2_ep0_theta.csv")
    assert len(theta[0]) == 1 + 5 * 6    # t plus five shape values per robot
    traj = read_csv(tmp_path / "record_actor_n6_seed2_ep0_trajectories.csv")
    assert len(traj[0]) == 1 + 4 + 4 * 6 + 1
    cons = read_csv(tmp_path / "record_actor_n6_seed2_ep0_consensus.csv")
    assert len(cons) == len(traj)
    # t_max 1.0 at dt 0.05 gives 20 steps
    assert len(traj) == 21


def test_replay_of_rowless_record_gives_headers(tmp_path, capsys):
    cfg = EpisodeConfig(seed=1, env=EnvConfig(t_max=0.5))
    rec = run_episode(cfg, keep_rows=False)
    path = tmp_path / "bare.jsonl"
    write_record(path, rec, cfg.env)

    rc = cli.main(["replay", str(path), "--out", str(tmp_path)])
    assert rc == 0
    capsys.readouterr()
    for suffix in ("trajectories", "theta", "consensus", "losses"):
        rows = read_csv(tmp_path / f"bare_{suffix}.csv")
        assert len(rows) == 1, suffix


def test_replay_rejects_non_record(tmp_path, capsys):
    path = tmp_path / "junk.jsonl"
    path.write_text("not a record\n")
    rc = cli.main(["replay", str(path), "--out", str(tmp_path)])
    assert rc == cli.EXIT_RUNTIME
    capsys.readouterr()


def test_augment_writes_bounded_labels(tmp_path, capsys):
    rc = cli.main(["train", "--episodes", "0", "--seed", "4",
                   "--out", str(tmp_path)])
    assert rc == 0
    rc = cli.main(["augment", "--weights",
                   str(tmp_path / "weights_seed4_n6.json"),
                   "--count", "4", "--seed", "4", "--out", str(tmp_path)])
    assert rc == 0
    capsys.readouterr()

    lines = (tmp_path / "augment_seed4_n6.jsonl").read_text().splitlines()
    assert len(lines) == 5
    header = json.loads(lines[0])
    assert header["kind"] == "header"
    assert header["count"] == 4
    bounds = EpisodeConfig().expert.bounds
    for line in lines[1:]:
        obj = json.loads(line)
        assert obj["virtual"] is True
        label = np.array(obj["label"])
        assert np.all(label >= bounds.lo - 1e-12)
        assert np.all(label <= bounds.hi + 1e-12)
        assert len(obj["theta"]) == 5
        assert len(obj["s_a"]) == 4


def test_config_errors_exit_2(tmp_path, capsys):
    rc = cli.main(["train", "--config", str(tmp_path / "missing.yaml"),
                   "--episodes", "0"])
    assert rc == cli.EXIT_CONFIG
    rc = cli.main(["train", "--set", "env.bogus=1", "--episodes", "0",
                   "--out", str(tmp_path)])
    assert rc == cli.EXIT_CONFIG
    rc = cli.main(["train", "--set", "n_defenders=cow", "--episodes", "0",
                   "--out", str(tmp_path)])
    assert rc == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_output_dir_env_var(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_DIR_ENV, str(tmp_path / "from_env"))
    rc = cli.main(["train", "--episodes", "0", "--seed", "8"])
    assert rc == 0
    capsys.readouterr()
    assert (tmp_path / "from_env" / "weights_seed8_n6.json").is_file()


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "all" in out and "passed" in out
