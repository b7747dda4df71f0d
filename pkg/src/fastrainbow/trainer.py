"""Training loop: vector collection interleaved with prioritized learning.

Iteration ``i`` collects one vector step with the actor published at the end
of iteration ``i - 1`` and, once warm, runs the due train steps on the replay
contents from iterations ``0..i-1``. New transitions are pushed at the end of
the iteration. Serial mode runs collection and learning back to back; overlap
mode runs them on two threads. Both perform the same operations in the same
order on every shared structure, so a fixed seed gives the same transition
stream and the same metrics either way.
"""

from __future__ import annotations

import base64
import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from fastrainbow.agent import Agent, MetricsWriter
from fastrainbow.config import RunConfig, Schedule, coerce, format_config, format_value
from fastrainbow.envs import VectorEnv, env_factory
from fastrainbow.errors import DiagnosticsError, NotReadyError, SnapshotError
from fastrainbow.network import QNetwork
from fastrainbow.replay import PrioritizedReplay, Transition
from fastrainbow.snapshot import load_snapshot, read_manifest, save_snapshot

log = logging.getLogger(__name__)

SNAPSHOT_FORMAT = 1


@dataclass
class RunState:
    frames: int = 0
    transitions: int = 0
    vector_steps: int = 0
    train_steps: int = 0
    samples: int = 0
    post_warmup_transitions: int = 0
    post_warmup_frames: int = 0
    episodes: int = 0
    target_syncs: int = 0
    wall_seconds: float = 0.0
    post_warmup_seconds: float = 0.0
    collect_seconds: float = 0.0
    learn_seconds: float = 0.0
    snapshots: list = field(default_factory=list)

    @property
    def frames_per_second(self) -> float:
        return self.frames / self.wall_seconds if self.wall_seconds > 0 else 0.0

    @property
    def post_warmup_fps(self) -> float:
        if self.post_warmup_seconds <= 0:
            return 0.0
        return self.post_warmup_frames / self.post_warmup_seconds

    @property
    def samples_per_second(self) -> float:
        if self.post_warmup_seconds <= 0:
            return 0.0
        return self.samples / self.post_warmup_seconds

    @property
    def measured_replay_ratio(self) -> float:
        if self.post_warmup_transitions == 0:
            return 0.0
        return self.samples / self.post_warmup_transitions


def snapshot_frames(schedule: Schedule) -> list[int]:
    """Frame counts at which periodic snapshots are written (final one excluded)."""
    out = []
    period = schedule.snapshot_period_frames
    fpv = schedule.frames_per_vector_step
    for i in range(1, schedule.total_vector_steps + 1):
        if (i * fpv) // period > ((i - 1) * fpv) // period:
            out.append(i * fpv)
    return out


def _rng_state_text(agent: Agent, replay: PrioritizedReplay) -> dict:
    def torch_state(gen):
        return base64.b64encode(gen.get_state().numpy().tobytes()).decode()
    return {
        "rng.learner_noise": torch_state(agent.learner_gen),
        "rng.actor_noise": torch_state(agent.actor_gen),
        "rng.actor_epsilon": json.dumps(agent.actor_rng.bit_generator.state),
        "rng.replay": json.dumps(replay.rng.bit_generator.state),
    }


def checkpoint(path, agent: Agent, config: RunConfig, state: RunState,
               replay: PrioritizedReplay | None = None, obs_shape=None) -> Path:
    """Write a snapshot of the online network, counters and RNG states."""
    manifest = {
        "format": SNAPSHOT_FORMAT,
        "frame": state.frames,
        "transitions": state.transitions,
        "vector_steps": state.vector_steps,
        "train_steps": state.train_steps,
        "samples": state.samples,
        "num_actions": agent.num_actions,
        "obs_shape": ",".join(str(d) for d in (obs_shape or agent.online.input_shape)),
    }
    for line in format_config(config).splitlines():
        k, v = line.split(" = ", 1)
        manifest[f"config.{k}"] = v
    if replay is not None:
        manifest.update(_rng_state_text(agent, replay))
    return save_snapshot(path, agent.online.state_dict(), manifest)


def config_from_manifest(manifest: dict) -> RunConfig:
    values = {k[len("config."):]: coerce(k[len("config."):], v)
              for k, v in manifest.items() if k.startswith("config.")}
    return RunConfig(**values).validate()


def load_network(path) -> tuple[QNetwork, RunConfig, dict]:
    """Rebuild the online network stored in a snapshot directory."""
    state, manifest = load_snapshot(path)
    config = config_from_manifest(manifest)
    obs_shape = tuple(int(d) for d in manifest["obs_shape"].split(","))
    net = QNetwork(config.network_spec(), obs_shape, int(manifest["num_actions"]))
    net.load_state_dict(state)
    net.eval()
    net.apply_noise(None)
    return net, config, manifest


def make_vector_env(config: RunConfig, seed: int | None = None) -> VectorEnv:
    make_adapter, _, _ = env_factory(config.env, config.chain_length)
    return VectorEnv(make_adapter, config.num_envs, config.preprocess(),
                     seed=config.seed if seed is None else seed)


class Trainer:
    def __init__(self, config: RunConfig, out_dir: str | Path | None = None,
                 write_files: bool = True):
        self.config = config.validate()
        set_torch_threads(config.torch_threads)
        self.schedule = config.schedule()
        self.out_dir = Path(out_dir or config.out_dir)
        self.write_files = write_files
        self.venv = make_vector_env(config)
        seeds = np.random.SeedSequence(config.seed).generate_state(2)
        self.agent = Agent(config.network_spec(), self.venv.observation_shape,
                           self.venv.num_actions, config.agent_config(), seed=int(seeds[0]))
        self.replay = PrioritizedReplay(
            config.replay_config(), num_envs=config.num_envs, seed=int(seeds[1]),
            obs_dtype=np.uint8 if config.storage_dtype() == "uint8" else np.float32,
            thread_safe=config.mode == "overlap")
        self.state = RunState()
        self.episode_returns: list[tuple[int, int, float, int]] = []
        self.metrics: MetricsWriter | None = None
        self.transition_log: list | None = None

    # -- collection -----------------------------------------------------
    def _collect(self, obs: np.ndarray, frame: int):
        actions = self.agent.act(obs, frame, mode="train")
        steps = self.venv.step_vector(actions)
        transitions = []
        for env_id, (o, a, s) in enumerate(zip(obs, actions, steps)):
            next_obs = s.info["final_obs"] if (s.done or s.timeout) else s.obs
            transitions.append(Transition(obs=o, action=int(a), reward=s.reward, done=s.done,
                                          timeout=s.timeout, env_id=env_id, next_obs=next_obs))
        new_obs = np.stack([s.obs for s in steps])
        return transitions, steps, new_obs

    def _learn(self, count: int, frame: int) -> list[dict]:
        out = []
        eps = self.agent.epsilon_at(frame)
        for _ in range(count):
            if len(self.replay) < self.schedule.batch_size:
                raise NotReadyError(
                    f"replay holds {len(self.replay)} entries after warmup, "
                    f"need {self.schedule.batch_size}; increase warmup_frames")
            m = self.agent.learn(self.replay, frame)
            self.state.train_steps += 1
            self.state.samples += self.schedule.batch_size
            record = {"frame": frame, "train_step": self.state.train_steps,
                      "loss": m["loss"], "grad_norm": m["grad_norm"],
                      "mean_q": m["mean_q"], "epsilon": eps, "beta": m["beta"]}
            if self.metrics is not None:
                self.metrics.append(record)
            out.append(record)
        return out

    # -- main loop ------------------------------------------------------
    def run(self, record_transitions: bool = False) -> RunState:
        cfg, sched, st = self.config, self.schedule, self.state
        if record_transitions:
            self.transition_log = []
        if self.write_files:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.txt").write_text(format_config(cfg))
            self.metrics = MetricsWriter(self.out_dir / "metrics.csv")
        log.info("run: env=%s e=%d b=%d k=%s replay_ratio=%s mode=%s", cfg.env, sched.num_envs,
                 sched.batch_size, sched.train_steps_per_vector_step, sched.replay_ratio, cfg.mode)
        obs = self.venv.observations()
        pool = ThreadPoolExecutor(max_workers=1) if cfg.mode == "overlap" else None
        start = time.perf_counter()
        warm_start = None
        try:
            for i in range(sched.total_vector_steps):
                frame = st.frames
                n_train = sched.train_steps_at(i)
                if n_train and warm_start is None:
                    warm_start = time.perf_counter()
                t0 = time.perf_counter()
                if pool is not None:
                    future = pool.submit(self._collect, obs, frame)
                    self._learn_guarded(n_train, frame)
                    t1 = time.perf_counter()
                    transitions, steps, obs = future.result()
                    st.learn_seconds += t1 - t0
                    st.collect_seconds += time.perf_counter() - t0
                else:
                    transitions, steps, obs = self._collect(obs, frame)
                    t1 = time.perf_counter()
                    self._learn_guarded(n_train, frame)
                    st.collect_seconds += t1 - t0
                    st.learn_seconds += time.perf_counter() - t1
                self.replay.push_many(transitions)
                if self.transition_log is not None:
                    self.transition_log.extend(
                        (t.env_id, t.action, t.reward, t.done, t.timeout,
                         t.obs.tobytes(), t.next_obs.tobytes()) for t in transitions)
                self._record_episodes(steps, frame)
                st.vector_steps += 1
                st.transitions += sched.num_envs
                st.frames += sched.frames_per_vector_step
                if n_train:
                    st.post_warmup_transitions += sched.num_envs
                    st.post_warmup_frames += sched.frames_per_vector_step
                if self.agent.sync_target(st.frames):
                    st.target_syncs += 1
                self.agent.publish_actor()
                if (st.frames // sched.snapshot_period_frames
                        > frame // sched.snapshot_period_frames) and self.write_files:
                    self._snapshot(f"frame_{st.frames:012d}")
        finally:
            if pool is not None:
                pool.shutdown(wait=True)
            end = time.perf_counter()
            st.wall_seconds = end - start
            st.post_warmup_seconds = end - warm_start if warm_start is not None else 0.0
        if self.write_files:
            self._snapshot("final")
            self._write_episodes()
            (self.out_dir / "run_state.json").write_text(json.dumps(self.summary(), indent=2))
        return st

    def _learn_guarded(self, n_train: int, frame: int) -> None:
        try:
            self._learn(n_train, frame)
        except DiagnosticsError:
            if self.write_files:
                path = self._snapshot(f"crash_frame_{frame:012d}")
                log.error("non-finite loss; crash snapshot written to %s", path)
            raise

    def _snapshot(self, name: str) -> Path:
        path = self.out_dir / "snapshots" / name
        try:
            checkpoint(path, self.agent, self.config, self.state, self.replay,
                       self.venv.observation_shape)
        except SnapshotError:
            log.warning("snapshot %s failed; run state is partial", path)
            raise
        self.state.snapshots.append(str(path))
        return path

    def _record_episodes(self, steps, frame: int) -> None:
        for env_id, s in enumerate(steps):
            if s.done or s.timeout:
                self.state.episodes += 1
                self.episode_returns.append((frame + self.schedule.frames_per_vector_step,
                                             env_id, float(s.info["episode_return"]),
                                             int(s.info["episode_steps"])))

    def _write_episodes(self) -> None:
        with open(self.out_dir / "episodes.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("frame", "env_id", "return", "steps"))
            w.writerows(self.episode_returns)

    def summary(self) -> dict:
        st = self.state
        out = {k: v for k, v in asdict(st).items() if k != "snapshots"}
        out.update(throughput_report(st, self.schedule))
        out["snapshots"] = list(st.snapshots)
        return out


def throughput_report(state: RunState, schedule: Schedule) -> dict:
    return {
        "frames_per_second": state.frames_per_second,
        "post_warmup_frames_per_second": state.post_warmup_fps,
        "samples_per_second": state.samples_per_second,
        "replay_ratio": schedule.replay_ratio,
        "measured_replay_ratio": state.measured_replay_ratio,
        "train_steps": state.train_steps,
        "samples": state.samples,
        "transitions": state.transitions,
        "frames": state.frames,
    }


# Cumulative modification stack for the throughput ablation, in report order.
THROUGHPUT_STACK = (
    ("baseline", {"batch_size": 32, "num_envs": 1, "mode": "serial"}),
    ("+batch_size", {"batch_size": 256, "num_envs": 1, "mode": "serial"}),
    ("+vector_envs", {"batch_size": 256, "num_envs": 64, "mode": "serial"}),
    ("+overlap", {"batch_size": 256, "num_envs": 64, "mode": "overlap"}),
)


def stack_config(base: RunConfig, changes: dict, replay_ratio: float = 8.0) -> RunConfig:
    from fastrainbow.config import replace
    k = replay_ratio * changes["num_envs"] / changes["batch_size"]
    return replace(base, train_steps_per_vector_step=k, **changes)


def throughput_ablation(base: RunConfig, post_warmup_frames: int,
                        stack=THROUGHPUT_STACK, replay_ratio: float = 8.0) -> list[dict]:
    """Measure each cumulative modification at a fixed replay ratio.

    Every row trains for ``post_warmup_frames`` after the warmup of ``base``;
    speedups are relative to the first row.
    """
    from fastrainbow.config import replace
    rows = []
    for name, changes in stack:
        cfg = stack_config(base, changes, replay_ratio)
        cfg = replace(cfg, total_frames=cfg.warmup_frames + post_warmup_frames)
        trainer = Trainer(cfg, write_files=False)
        st = trainer.run()
        rows.append({"configuration": name, "batch_size": cfg.batch_size,
                     "num_envs": cfg.num_envs, "mode": cfg.mode,
                     "k": cfg.train_steps_per_vector_step,
                     "frames_per_second": st.post_warmup_fps,
                     "samples_per_second": st.samples_per_second,
                     "train_steps": st.train_steps, "samples": st.samples})
    base_fps = rows[0]["frames_per_second"] or float("nan")
    for row in rows:
        row["speedup"] = row["frames_per_second"] / base_fps
    return rows


def write_rows_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: format_value(v) if isinstance(v, float) else v for k, v in row.items()})


def set_torch_threads(n: int | None) -> None:
    if n:
        torch.set_num_threads(n)
