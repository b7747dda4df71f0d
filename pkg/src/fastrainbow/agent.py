"""Double-DQN learner with n-step targets, Huber loss and noisy/epsilon acting."""

from __future__ import annotations

import copy
import csv
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from fastrainbow.errors import ConfigError, DiagnosticsError
from fastrainbow.network import NetworkSpec, QNetwork, build, hard_update

LOSSES = ("huber", "mse")


@dataclass
class AgentConfig:
    gamma: float = 0.99
    n: int = 3
    learning_rate: float = 0.00025
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    grad_clip_norm: float = 10.0
    target_sync_frames: int = 32_000
    eps_initial: float = 1.0
    eps_final: float = 0.01
    eps_decay_frames: int = 500_000
    loss: str = "huber"
    huber_kappa: float = 1.0
    batch_size: int = 256
    use_epsilon: bool = True
    # bf16 autocast for learner forward passes; numerics untested
    mixed_precision: bool = False

    @property
    def adam_eps(self) -> float:
        return 0.005 / self.batch_size

    def validate(self) -> None:
        positive = ("gamma", "n", "learning_rate", "grad_clip_norm", "target_sync_frames",
                    "eps_decay_frames", "huber_kappa", "batch_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.eps_final <= self.eps_initial <= 1.0:
            raise ConfigError("need 0 <= eps_final <= eps_initial <= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")


def epsilon_at(frame: int, config: AgentConfig) -> float:
    if frame >= config.eps_decay_frames:
        return config.eps_final
    frac = frame / config.eps_decay_frames
    return config.eps_initial + frac * (config.eps_final - config.eps_initial)


def elementwise_loss(delta: torch.Tensor, kind: str = "huber", kappa: float = 1.0) -> torch.Tensor:
    if kind == "mse":
        return delta ** 2
    a = delta.abs()
    return torch.where(a <= kappa, 0.5 * delta ** 2, kappa * (a - 0.5 * kappa))


def weighted_loss(q_sa: torch.Tensor, y: torch.Tensor, w: torch.Tensor,
                  kind: str = "huber", kappa: float = 1.0) -> torch.Tensor:
    """Importance-weighted mean of the per-sample loss of ``y - q_sa``."""
    return (w * elementwise_loss(y - q_sa, kind, kappa)).mean()


def td_errors(q_sa, y) -> np.ndarray:
    return np.abs(np.asarray(y, dtype=np.float64) - np.asarray(q_sa, dtype=np.float64))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. The scale factor is exactly
    ``max_norm / norm`` when clipping applies.
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(sum(float(g.detach().double().pow(2).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


class TargetSync:
    """Fires whenever the frame counter crosses a multiple of ``period``."""

    def __init__(self, period: int):
        self.period = period
        self.last_boundary = 0
        self.count = 0

    def due(self, frame: int) -> bool:
        boundary = frame // self.period
        if boundary > self.last_boundary:
            self.last_boundary = boundary
            return True
        return False


class MetricsWriter:
    """Append-only CSV of per-train-step records; safe to call from threads."""

    HEADER = ("frame", "train_step", "loss", "grad_norm", "mean_q", "epsilon", "beta")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(self.HEADER)

    def append(self, record: dict) -> None:
        row = [repr(record[k]) if isinstance(record[k], float) else record[k] for k in self.HEADER]
        with self._lock, open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)


class Agent:
    """Holds the online, target and actor networks plus the optimizer.

    The actor is a frozen copy refreshed by :meth:`publish_actor`; acting
    never touches the online parameters, so collection can run while the
    learner updates.
    """

    def __init__(self, spec: NetworkSpec, obs_shape, num_actions: int,
                 config: AgentConfig | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        self.config = config or AgentConfig()
        self.config.validate()
        self.num_actions = num_actions
        self.dtype = dtype
        self.online: QNetwork = build(spec, obs_shape, num_actions, seed=seed, dtype=dtype)
        self.online.train()
        self.target = copy.deepcopy(self.online).eval()
        self.actor = copy.deepcopy(self.online).eval()
        for p in list(self.target.parameters()) + list(self.actor.parameters()):
            p.requires_grad_(False)
        c = self.config
        self.optimizer = torch.optim.Adam(self.online.parameters(), lr=c.learning_rate,
                                          betas=(c.adam_beta1, c.adam_beta2), eps=c.adam_eps)
        seeds = np.random.SeedSequence(seed).generate_state(3)
        self.learner_gen = torch.Generator().manual_seed(int(seeds[0]))
        self.actor_gen = torch.Generator().manual_seed(int(seeds[1]))
        self.actor_rng = np.random.default_rng(int(seeds[2]))
        self.target_sync = TargetSync(c.target_sync_frames)
        self.train_steps = 0

    # -- acting ---------------------------------------------------------
    def epsilon_at(self, frame: int) -> float:
        return epsilon_at(frame, self.config) if self.config.use_epsilon else 0.0

    def q_values(self, obs, net: QNetwork | None = None) -> np.ndarray:
        net = net or self.actor
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(obs), dtype=self.dtype)
            return net(x).double().numpy()

    def act(self, obs, frame: int = 0, mode: str = "train", rng: np.random.Generator | None = None):
        """Pick actions for a batch of observations.

        Train mode samples fresh actor noise once per call and applies
        epsilon-greedy on top; eval mode uses zero noise and no epsilon.
        Greedy ties resolve to the lowest action index.
        """
        rng = rng if rng is not None else self.actor_rng
        obs = np.asarray(obs)
        if mode == "eval":
            self.actor.apply_noise(None)
            return self.q_values(obs).argmax(axis=1)
        if mode != "train":
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.actor.resample_noise(self.actor_gen)
        greedy = self.q_values(obs).argmax(axis=1)
        eps = self.epsilon_at(frame)
        explore = rng.random(len(obs)) < eps
        random_actions = rng.integers(0, self.num_actions, size=len(obs))
        return np.where(explore, random_actions, greedy)

    def publish_actor(self) -> None:
        hard_update(self.actor, self.online)

    # -- learning -------------------------------------------------------
    def _tensor(self, x, dtype=None):
        return torch.as_tensor(np.asarray(x), dtype=dtype or self.dtype)

    def compute_target(self, batch: dict) -> torch.Tensor:
        """n-step double-DQN target; the online net picks, the target net scores."""
        with torch.no_grad():
            next_obs = self._tensor(batch["next_obs"])
            best = self.online(next_obs).argmax(dim=1, keepdim=True)
            q_next = self.target(next_obs).gather(1, best).squeeze(1)
            ret = self._tensor(batch["return_n"])
            disc = self._tensor(batch["discount_n"])
            boot = self._tensor(batch["bootstrap"])
            return ret + disc * boot * q_next

    def train_step(self, batch: dict, weights) -> dict:
        """One optimizer update on a sampled batch.

        Returns loss, pre-clip gradient norm, mean Q of the taken actions and
        the absolute TD errors for priority refresh.
        """
        c = self.config
        if self.online.spec.noisy:
            self.online.resample_noise(self.learner_gen)
            self.target.resample_noise(self.learner_gen)
        obs = self._tensor(batch["obs"])
        actions = torch.as_tensor(np.asarray(batch["action"]), dtype=torch.int64)
        w = self._tensor(weights)
        with torch.autocast("cpu", dtype=torch.bfloat16, enabled=c.mixed_precision):
            y = self.compute_target(batch).to(self.dtype)
            q_sa = self.online(obs).gather(1, actions[:, None]).squeeze(1).to(self.dtype)
        loss = weighted_loss(q_sa, y, w, c.loss, c.huber_kappa)
        if not torch.isfinite(loss.detach()):
            self.optimizer.zero_grad(set_to_none=True)
            raise DiagnosticsError(f"non-finite loss {float(loss.detach())} at train step {self.train_steps}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = clip_grad_norm(self.online.parameters(), c.grad_clip_norm)
        if not math.isfinite(grad_norm):
            self.optimizer.zero_grad(set_to_none=True)
            raise DiagnosticsError(f"non-finite gradient norm at train step {self.train_steps}")
        self.optimizer.step()
        self.train_steps += 1
        q_np = q_sa.detach().double().numpy()
        return {
            "loss": float(loss.detach()),
            "grad_norm": grad_norm,
            "mean_q": float(q_np.mean()),
            "td_abs": td_errors(q_np, y.double().numpy()),
        }

    def learn(self, replay, frame: int) -> dict:
        indices, batch, weights = replay.sample(self.config.batch_size, frame)
        metrics = self.train_step(batch, weights)
        replay.update_priorities(indices, metrics["td_abs"])
        metrics["beta"] = replay.beta_at(frame)
        return metrics

    def sync_target(self, frame: int | None = None, force: bool = False) -> bool:
        if force or (frame is not None and self.target_sync.due(frame)):
            hard_update(self.target, self.online)
            self.target_sync.count += 1
            return True
        return False
