"""Command-line entry point: ``fastrainbow {train,eval,plot,bench,ablate}``.

Exit codes: 0 success, 1 validation error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from fastrainbow.config import RunConfig, coerce, format_value, parse_config, replace
from fastrainbow.envs import env_factory
from fastrainbow.errors import ConfigError, InputError, RainbowError
from fastrainbow.evaluation import (
    DEFAULT_BUDGET,
    EvalReport,
    ScoreTable,
    evaluate,
    median_curve,
    plot_run,
    read_episodes,
    running_average,
    select_best,
)

log = logging.getLogger("fastrainbow")

# convenience flag -> config key
FLAG_KEYS = {
    "env": "env", "total_frames": "total_frames", "seed": "seed", "out": "out_dir",
    "sn": "sn", "multiplier": "channel_multiplier", "loss": "loss", "mode": "mode",
    "num_envs": "num_envs", "batch_size": "batch_size", "warmup_frames": "warmup_frames",
}


def _add_config_flags(p: argparse.ArgumentParser, with_grid_flags: bool = False) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--env")
    p.add_argument("--total-frames")
    p.add_argument("--seed")
    p.add_argument("--out")
    p.add_argument("--loss")
    p.add_argument("--mode")
    p.add_argument("--num-envs")
    p.add_argument("--batch-size")
    p.add_argument("--warmup-frames")
    if not with_grid_flags:
        p.add_argument("--sn")
        p.add_argument("--multiplier")


def collect_flags(args: argparse.Namespace, skip=()) -> dict:
    flags: dict[str, str] = {}

    def put(key, value, origin):
        if key in flags and flags[key] != value:
            raise ConfigError(f"conflicting values for {key!r}: {flags[key]!r} vs {value!r} "
                              f"({origin})")
        flags[key] = value

    for name, key in FLAG_KEYS.items():
        if name in skip:
            continue
        value = getattr(args, name, None)
        if value is not None:
            put(key, str(value), f"--{name.replace('_', '-')}")
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        put(key, value, "--set")
    return flags


def load_config(args, skip=()) -> RunConfig:
    return parse_config(args.config, collect_flags(args, skip))


# -- commands -------------------------------------------------------------

def cmd_train(args) -> int:
    from fastrainbow.trainer import Trainer

    cfg = load_config(args)
    trainer = Trainer(cfg)
    state = trainer.run()
    summary = trainer.summary()
    print(f"run directory: {trainer.out_dir}")
    print(f"frames={state.frames} train_steps={state.train_steps} samples={state.samples} "
          f"replay_ratio={summary['measured_replay_ratio']:.3f} "
          f"fps={summary['frames_per_second']:.1f}")
    return 0


def _evaluate_snapshot(path: Path, budget: int, seed: int) -> EvalReport:
    from fastrainbow.trainer import load_network

    net, cfg, _ = load_network(path)
    make_adapter, _, _ = env_factory(cfg.env, cfg.chain_length)
    return evaluate(net, make_adapter(0), cfg.preprocess(), budget=budget, seed=seed,
                    snapshot_id=path.name)


def cmd_eval(args) -> int:
    budget = int(args.budget)
    if budget <= 0:
        raise ConfigError("--budget must be positive")
    if args.snapshot:
        report = _evaluate_snapshot(Path(args.snapshot), budget, args.seed)
        out = Path(args.out or Path(args.snapshot) / "eval.csv")
        report.to_csv(out)
        print(f"{report.snapshot_id}: episodes={report.episode_count} mean={report.mean:.4f} "
              f"median={report.median:.4f} frames={report.frames} -> {out}")
        return 0
    run = Path(args.run)
    snaps = sorted(p for p in (run / "snapshots").glob("frame_*") if p.is_dir())
    if not snaps:
        raise InputError(f"no periodic snapshots under {run / 'snapshots'}")
    reports = [_evaluate_snapshot(p, budget, args.seed) for p in snaps]
    best = select_best(reports, lambda sid: _evaluate_snapshot(
        run / "snapshots" / sid, budget, args.seed + 1))
    out_dir = Path(args.out or run / "eval")
    for r in reports:
        r.to_csv(out_dir / f"{r.snapshot_id}.csv")
    best.reevaluation.to_csv(out_dir / f"best_{best.snapshot_id}_reeval.csv")
    with open(out_dir / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("snapshot_id", "episodes", "mean", "median", "frames"))
        for r in reports:
            w.writerow((r.snapshot_id, r.episode_count, repr(r.mean), repr(r.median), r.frames))
    print(f"best snapshot {best.snapshot_id}: first-pass mean {best.first_pass.mean:.4f}, "
          f"re-evaluation mean {best.reevaluation.mean:.4f}")
    return 0


def cmd_plot(args) -> int:
    paths = plot_run(args.run, args.out)
    print(f"wrote {paths['png']} and {paths['csv']}")
    if args.scores:
        table = ScoreTable.from_csv(args.scores)
        out = Path(args.out or args.run) / "hns_table.csv"
        table.to_csv(out)
        agg = table.aggregate()
        print(f"HNS mean={agg['mean']:.1f} median={agg['median']:.1f} "
              f"above_human={agg['above_human']} -> {out}")
    return 0


def cmd_bench(args) -> int:
    from fastrainbow.trainer import throughput_ablation, write_rows_csv

    flags = collect_flags(args)
    flags.setdefault("env", "minicatch")
    cfg = parse_config(args.config, flags)
    rows = throughput_ablation(cfg, int(args.post_warmup_frames))
    out = Path(args.report or Path(cfg.out_dir) / "throughput.csv")
    write_rows_csv(rows, out)
    for row in rows:
        print(f"{row['configuration']:>14}: {row['frames_per_second']:10.1f} frames/s "
              f"{row['samples_per_second']:10.1f} samples/s  x{row['speedup']:.2f}")
    print(f"-> {out}")
    return 0


def _parse_grid(text: str, key: str) -> list:
    values = [coerce(key, v) for v in str(text).split(",") if v.strip()]
    if not values:
        raise ConfigError(f"empty grid for {key}")
    return values


def ablation_cells(multipliers, sn_variants, seeds: int) -> list[tuple[int, str, int]]:
    if not multipliers or not sn_variants or seeds < 1:
        raise ConfigError("ablation grid is empty")
    return [(m, sn, s) for m, sn in itertools.product(multipliers, sn_variants)
            for s in range(seeds)]


def _run_cell(cfg: RunConfig) -> str:
    from fastrainbow.trainer import Trainer

    Trainer(cfg).run()
    return cfg.out_dir


def run_ablation(base: RunConfig, multipliers, sn_variants, seeds: int = 3,
                 jobs: int = 1, out_dir=None) -> dict:
    """Train every grid cell for every seed and tabulate median curves."""
    out_dir = Path(out_dir or base.out_dir)
    cells = ablation_cells(multipliers, sn_variants, seeds)
    configs = []
    for m, sn, s in cells:
        run_dir = out_dir / f"m{m}_sn-{sn}" / f"seed{s}"
        configs.append(replace(base, channel_multiplier=m, sn=sn, seed=base.seed + s,
                               out_dir=str(run_dir)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_cell, configs))
    else:
        for cfg in configs:
            _run_cell(cfg)
    curves_path = out_dir / "ablation_curves.csv"
    table_path = out_dir / "ablation_table.csv"
    table = []
    with open(curves_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("configuration", "frame", "median_running_average"))
        for m, sn in itertools.product(multipliers, sn_variants):
            name = f"m{m}_sn-{sn}"
            curves = []
            for s in range(seeds):
                frames, returns = read_episodes(out_dir / name / f"seed{s}" / "episodes.csv")
                curves.append((frames, running_average(returns)))
            grid, med = median_curve(curves)
            for fr, v in zip(grid, med):
                w.writerow((name, int(fr), format_value(float(v))))
            finals = [c[1][-1] for c in curves if len(c[1])]
            finite = med[np.isfinite(med)]
            table.append({"configuration": name, "channel_multiplier": m, "sn": sn,
                          "seeds": seeds,
                          "final_median_running_average":
                              float(np.median(finals)) if finals else float("nan"),
                          "curve_mean": float(finite.mean()) if finite.size else float("nan")})
    with open(table_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(table[0]))
        w.writeheader()
        for row in table:
            w.writerow({k: format_value(v) if isinstance(v, float) else v for k, v in row.items()})
    return {"runs": len(configs), "configurations": len(table), "curves": curves_path,
            "table": table_path, "rows": table}


def cmd_ablate(args) -> int:
    multipliers = _parse_grid(args.multiplier, "channel_multiplier")
    sn_variants = _parse_grid(args.sn, "sn")
    seeds = int(args.seeds)
    base = load_config(args, skip=("sn", "multiplier"))
    result = run_ablation(base, multipliers, sn_variants, seeds, int(args.jobs))
    print(f"{result['configurations']} configurations x {seeds} seeds = {result['runs']} runs")
    print(f"-> {result['table']}, {result['curves']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastrainbow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an agent")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a snapshot or every snapshot of a run")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--snapshot")
    g.add_argument("--run")
    p.add_argument("--budget", default=str(DEFAULT_BUDGET))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="learning curve (and HNS table) for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.add_argument("--scores", help="CSV with game,random,human,agent columns")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("bench", help="throughput of the cumulative modification stack")
    _add_config_flags(p)
    p.add_argument("--post-warmup-frames", default="20000")
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="channel-multiplier x SN-variant grid")
    _add_config_flags(p, with_grid_flags=True)
    p.add_argument("--multiplier", default="1,2,4")
    p.add_argument("--sn", default="none,all,last")
    p.add_argument("--seeds", default="3")
    p.add_argument("--jobs", default="1")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RainbowError, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
