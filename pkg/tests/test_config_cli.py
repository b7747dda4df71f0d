import csv

import pytest

from fastrainbow import cli
from fastrainbow.cli import ablation_cells, main, run_ablation
from fastrainbow.config import (
    RunConfig,
    coerce,
    env_overrides,
    format_config,
    parse_config,
    parse_lines,
)
from fastrainbow.errors import ConfigError

TINY = ["--set", "num_envs=4", "--set", "batch_size=8", "--set", "warmup_frames=64",
        "--set", "replay_capacity=1024", "--set", "hidden_units=16", "--set", "mlp_units=8",
        "--set", "snapshot_period_frames=100"]


def test_empty_file_gives_full_scale_defaults(tmp_path):
    (tmp_path / "c.txt").write_text("# nothing here\n\n")
    cfg = parse_config(tmp_path / "c.txt", environ={})
    assert cfg == RunConfig()
    a = cfg.agent_config()
    assert (a.gamma, a.n, a.learning_rate, a.batch_size) == (0.99, 3, 0.00025, 256)
    assert (cfg.num_envs, cfg.sigma0, a.grad_clip_norm, a.target_sync_frames) == (64, 0.5, 10.0, 32_000)
    assert cfg.schedule().replay_ratio == 8.0
    assert cfg.warmup_frames == 80_000 and a.eps_decay_frames == 500_000


def test_negative_batch_size_rejected(tmp_path):
    (tmp_path / "c.txt").write_text("batch_size = -1\n")
    with pytest.raises(ConfigError, match="batch_size"):
        parse_config(tmp_path / "c.txt", environ={})


def test_unknown_and_malformed_keys_named():
    with pytest.raises(ConfigError, match="learning_rat"):
        parse_lines("learning_rat = 0.1\n")
    with pytest.raises(ConfigError, match="gamma"):
        parse_lines("gamma = high\n")
    with pytest.raises(ConfigError, match="line"):
        parse_lines("just words\n", "line")


def test_flag_overrides_file(tmp_path):
    (tmp_path / "c.txt").write_text("sn = all\n")
    assert parse_config(tmp_path / "c.txt", {"sn": "last"}, environ={}).sn == "last"


def test_precedence_env_between_file_and_flags(tmp_path):
    (tmp_path / "c.txt").write_text("seed = 3\nbatch_size = 32\n")
    env = {"FASTRAINBOW_SEED": "5", "FASTRAINBOW_BATCH_SIZE": "64", "HOME": "/x"}
    cfg = parse_config(tmp_path / "c.txt", {"seed": "7"}, environ=env)
    assert cfg.seed == 7 and cfg.batch_size == 64
    with pytest.raises(ConfigError, match="FASTRAINBOW_NOPE"):
        env_overrides({"FASTRAINBOW_NOPE": "1"})


def test_config_roundtrip():
    cfg = RunConfig(env="minicatch", sn="last", channel_multiplier=1, resolution="64x64",
                    train_steps_per_vector_step=0.5, beta_anneal_frames=1000)
    assert RunConfig(**parse_lines(format_config(cfg))) == cfg


def test_coerce_auto_and_bools():
    assert coerce("frame_skip", "auto") is None
    assert coerce("dueling", "off") is False
    assert coerce("total_frames", "10_000_000") == 10_000_000


def test_conflicting_flags_rejected():
    args = cli.build_parser().parse_args(["train", "--seed", "1", "--set", "seed=2"])
    with pytest.raises(ConfigError, match="seed"):
        cli.collect_flags(args)


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--set", "batch_size=-1"]) == 1
    assert main(["train", "--set", "bogus=1"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["eval", "--snapshot", str(tmp_path / "missing")]) == 2
    assert "error" in capsys.readouterr().err


def test_ablation_cell_counts():
    assert len({(m, s) for m, s, _ in ablation_cells([1, 2, 4], ["none", "all", "last"], 3)}) == 9
    assert len(ablation_cells([1, 2, 4], ["none", "all", "last"], 3)) == 27
    assert len(ablation_cells([2], ["all"], 3)) == 3
    with pytest.raises(ConfigError):
        ablation_cells([], ["all"], 3)


def test_train_eval_plot_commands(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--env", "chain", "--total-frames", "400", "--seed", "1",
                 "--out", str(out), *TINY])
    assert code == 0
    assert (out / "metrics.csv").exists() and (out / "snapshots" / "final").exists()
    assert (out / "config.txt").read_text() == format_config(
        RunConfig(**parse_lines((out / "config.txt").read_text())))
    snap = out / "snapshots" / "final"
    assert main(["eval", "--snapshot", str(snap), "--budget", "100"]) == 0
    with open(snap / "eval.csv") as f:
        rows = list(csv.DictReader(f))
    assert sum(int(r["frames"]) for r in rows) >= 100
    assert main(["eval", "--run", str(out), "--budget", "50"]) == 0
    summary = (out / "eval" / "summary.csv").read_text().splitlines()
    assert len(summary) == 1 + 4
    assert any(p.name.startswith("best_") for p in (out / "eval").iterdir())
    scores = tmp_path / "scores.csv"
    scores.write_text("game,random,human,agent\nPong,-20.7,9.3,21.0\n")
    assert main(["plot", "--run", str(out), "--scores", str(scores)]) == 0
    assert (out / "learning_curve.png").exists() and (out / "learning_curve.csv").exists()
    assert "139.0" in (out / "hns_table.csv").read_text()
    assert main(["eval", "--snapshot", str(snap), "--budget", "0"]) == 1


def test_bench_command(tmp_path):
    report = tmp_path / "bench.csv"
    code = main(["bench", "--env", "chain", "--set", "warmup_frames=640",
                 "--set", "replay_capacity=4096", "--set", "hidden_units=16",
                 "--set", "mlp_units=8", "--post-warmup-frames", "256",
                 "--report", str(report)])
    assert code == 0
    lines = report.read_text().splitlines()
    assert lines[0].startswith("configuration,") and len(lines) == 5


def test_run_ablation_on_tiny_grid(tmp_path):
    base = parse_config(None, {"env": "chain", "total_frames": "320", "num_envs": "4",
                               "batch_size": "8", "warmup_frames": "64",
                               "replay_capacity": "1024", "hidden_units": "16",
                               "mlp_units": "8"}, environ={})
    result = run_ablation(base, [1, 2], ["none"], seeds=2, out_dir=tmp_path)
    assert result["runs"] == 4 and result["configurations"] == 2
    rows = result["table"].read_text().splitlines()
    assert len(rows) == 3
    names = {r.split(",")[0] for r in result["curves"].read_text().splitlines()[1:]}
    assert names == {"m1_sn-none", "m2_sn-none"}
