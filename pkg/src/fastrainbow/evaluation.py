"""Fixed-budget snapshot evaluation, human-normalized scores and aggregates."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from fastrainbow.envs import PreprocessConfig, PreprocessedEnv
from fastrainbow.errors import InputError
from fastrainbow.network import QNetwork

DEFAULT_BUDGET = 500_000


class UndefinedScoreError(InputError):
    """Human and random reference scores coincide."""


@dataclass
class EvalReport:
    snapshot_id: str
    returns: list[float]
    frames: int
    episode_frames: list[int] = field(default_factory=list)

    @property
    def episode_count(self) -> int:
        return len(self.returns)

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def median(self) -> float:
        return float(np.median(self.returns))

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("snapshot_id", "episode", "return", "frames"))
            for i, (r, fr) in enumerate(zip(self.returns, self.episode_frames)):
                w.writerow((self.snapshot_id, i, repr(float(r)), fr))

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise InputError(f"{path}: no episodes")
        frames = [int(r["frames"]) for r in rows]
        return cls(rows[0]["snapshot_id"], [float(r["return"]) for r in rows],
                   sum(frames), frames)


def greedy_policy(net: QNetwork) -> Callable[[np.ndarray], int]:
    """Zero-noise argmax policy; ties go to the lowest action index."""
    net.eval()
    net.apply_noise(None)
    dtype = next(net.parameters()).dtype

    def act(obs: np.ndarray) -> int:
        with torch.no_grad():
            q = net(torch.as_tensor(obs[None], dtype=dtype))
        return int(np.argmax(q[0].double().numpy()))

    return act


def evaluate(policy, adapter, config: PreprocessConfig, budget: int = DEFAULT_BUDGET,
             seed: int = 0, snapshot_id: str = "snapshot", num_actions: int | None = None,
             ) -> EvalReport:
    """Play episodes until ``budget`` raw frames are used.

    ``policy`` is a :class:`QNetwork` (played greedily with zero noise) or a
    callable mapping one observation to an action. The episode running when
    the budget runs out is finished and counted. Episode length is capped by
    the preprocessing time limit.
    """
    if isinstance(policy, QNetwork):
        num_actions = policy.num_actions
        policy = greedy_policy(policy)
    env = PreprocessedEnv(adapter, config, np.random.default_rng(seed))
    if num_actions is not None and num_actions != env.num_actions:
        raise InputError(f"policy has {num_actions} actions, env has {env.num_actions}")
    returns, lengths = [], []
    used = 0
    obs = env.obs
    while used < budget:
        while True:
            step = env.step(policy(obs))
            obs = step.obs
            if step.done or step.timeout:
                break
        returns.append(step.info["episode_return"])
        lengths.append(step.info["episode_frames"])
        used += step.info["episode_frames"]
    return EvalReport(snapshot_id, returns, used, lengths)


def hns(agent: float, random: float, human: float) -> float:
    if human == random:
        raise UndefinedScoreError("human and random scores are equal; HNS undefined")
    return 100.0 * (agent - random) / (human - random)


def aggregate(scores: Sequence[float]) -> dict:
    """Mean, median (midpoint for even counts) and count strictly above 100."""
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.size == 0:
        raise InputError("cannot aggregate an empty score table")
    return {"mean": float(scores.mean()), "median": float(np.median(scores)),
            "above_human": int(np.count_nonzero(scores > 100.0))}


@dataclass
class ScoreTable:
    rows: list[tuple[str, float, float, float]] = field(default_factory=list)

    def add(self, game: str, random: float, human: float, agent: float) -> None:
        self.rows.append((game, float(random), float(human), float(agent)))

    def hns(self) -> dict[str, float]:
        return {g: hns(a, r, h) for g, r, h, a in self.rows}

    def aggregate(self) -> dict:
        return aggregate(self.hns().values())

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        scores = self.hns()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("game", "random", "human", "agent", "hns"))
            for g, r, h, a in self.rows:
                w.writerow((g, repr(r), repr(h), repr(a), repr(scores[g])))
            agg = self.aggregate()
            w.writerow(("mean_hns", "", "", "", repr(agg["mean"])))
            w.writerow(("median_hns", "", "", "", repr(agg["median"])))
            w.writerow(("above_human", "", "", "", agg["above_human"]))

    @classmethod
    def from_csv(cls, path) -> "ScoreTable":
        table = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                if row["random"] == "":
                    continue
                table.add(row["game"], float(row["random"]), float(row["human"]),
                          float(row["agent"]))
        return table


def running_average(returns: Sequence[float], window: int = 100) -> np.ndarray:
    x = np.asarray(list(returns), dtype=np.float64)
    if x.size == 0:
        return x
    c = np.concatenate(([0.0], np.cumsum(x)))
    idx = np.arange(x.size)
    lo = np.maximum(0, idx - window + 1)
    return (c[idx + 1] - c[lo]) / (idx + 1 - lo)


@dataclass
class BestSnapshot:
    snapshot_id: str
    first_pass: EvalReport
    reevaluation: EvalReport | None


def select_best(reports: Sequence[EvalReport],
                reevaluate: Callable[[str], EvalReport] | None = None) -> BestSnapshot:
    """Pick the highest-mean report (earliest on ties) and evaluate it again."""
    if not reports:
        raise InputError("select_best needs at least one report")
    best = reports[0]
    for r in reports[1:]:
        if r.mean > best.mean:
            best = r
    again = reevaluate(best.snapshot_id) if reevaluate is not None else None
    return BestSnapshot(best.snapshot_id, best, again)


def read_episodes(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    frames = np.array([int(r["frame"]) for r in rows], dtype=np.int64)
    returns = np.array([float(r["return"]) for r in rows], dtype=np.float64)
    return frames, returns


def plot_run(run_dir, out_dir=None, window: int = 100) -> dict:
    """Write a learning-curve CSV and PNG (running-average return vs frames)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    frames, returns = read_episodes(run_dir / "episodes.csv")
    avg = running_average(returns, window)
    csv_path = out_dir / "learning_curve.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("frame", "return", "running_average"))
        for fr, r, a in zip(frames, returns, avg):
            w.writerow((int(fr), repr(float(r)), repr(float(a))))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(frames, avg)
    ax.set_xlabel("frames")
    ax.set_ylabel(f"{window}-episode running average return")
    ax.set_title(run_dir.name)
    fig.tight_layout()
    png_path = out_dir / "learning_curve.png"
    fig.savefig(png_path)
    plt.close(fig)
    return {"csv": csv_path, "png": png_path}


def median_curve(curves: Sequence[tuple[np.ndarray, np.ndarray]], points: int = 50):
    """Median over runs of step-interpolated running-average curves.

    Grid points before a run's first episode are ignored for that run; NaN
    where no run has data yet.
    """
    if not curves:
        raise InputError("median_curve needs at least one curve")
    end = min(int(c[0][-1]) for c in curves if len(c[0])) if all(len(c[0]) for c in curves) else 0
    grid = np.linspace(0, end, points)
    values = []
    for frames, avg in curves:
        if len(frames) == 0:
            values.append(np.full(points, np.nan))
            continue
        idx = np.searchsorted(frames, grid, side="right") - 1
        values.append(np.where(idx >= 0, avg[np.clip(idx, 0, None)], np.nan))
    values = np.vstack(values)
    med = np.full(points, np.nan)
    covered = np.isfinite(values).any(axis=0)
    med[covered] = np.nanmedian(values[:, covered], axis=0)
    return grid, med
