"""Environment adapter contract, preprocessing pipeline and vectorization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Protocol, runtime_checkable

import cv2
import numpy as np

from fastrainbow.errors import ConfigError, InputError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@runtime_checkable
class EnvAdapter(Protocol):
    """What an emulator binding must provide to be wrapped by the pipeline.

    ``reset`` and ``step`` return raw frames: ``(H, W)`` or ``(H, W, 3)``
    arrays (uint8 in [0, 255] or float in [0, 1]) for pixel games, or 1-D
    float vectors. ``step`` returns ``(frame, reward, terminal, truncated)``.
    ``profile`` names the preprocessing row the adapter expects.
    """

    num_actions: int
    raw_frame_shape: tuple[int, ...]
    profile: str
    noop_action: int

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def step(self, action: int) -> tuple[np.ndarray, float, bool, bool]: ...


@dataclass
class PreprocessConfig:
    grayscale: bool = True
    frame_skip: int = 4
    frame_stack: int = 4
    resolution: tuple[int, int] = (84, 84)
    max_pool_consecutive: bool = True
    noop_max: int = 30
    time_limit_frames: int = 108_000
    reward_clip: bool = False

    def validate(self) -> None:
        if self.frame_skip < 1:
            raise ConfigError(f"frame_skip must be >= 1, got {self.frame_skip}")
        if self.frame_stack < 1:
            raise ConfigError(f"frame_stack must be >= 1, got {self.frame_stack}")
        if self.noop_max < 0:
            raise ConfigError(f"noop_max must be >= 0, got {self.noop_max}")
        if self.time_limit_frames < 1:
            raise ConfigError("time_limit_frames must be positive")
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ConfigError(f"resolution must be (height, width), got {self.resolution}")


# Rows of the emulator preprocessing table, plus the built-in environments.
PROFILES: dict[str, PreprocessConfig] = {
    "gym": PreprocessConfig(),
    "retro": PreprocessConfig(grayscale=False, resolution=(72, 96), noop_max=0),
    # no raw frame pair exists to pool when frames are not skipped
    "procgen": PreprocessConfig(grayscale=False, frame_skip=1, resolution=(64, 64),
                                max_pool_consecutive=False, noop_max=0),
    "vector": PreprocessConfig(grayscale=False, frame_skip=1, frame_stack=1,
                               max_pool_consecutive=False, noop_max=0),
    "minicatch": PreprocessConfig(grayscale=False, frame_skip=1, frame_stack=4,
                                  max_pool_consecutive=False, noop_max=0),
}


def profile_config(name: str, **overrides) -> PreprocessConfig:
    try:
        base = PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown preprocessing profile {name!r}") from None
    cfg = replace(base, **overrides)
    cfg.validate()
    return cfg


def area_resize(frame: np.ndarray, resolution: tuple[int, int]) -> np.ndarray:
    h, w = resolution
    if frame.shape[:2] == (h, w):
        return frame
    return cv2.resize(frame, (w, h), interpolation=cv2.INTER_AREA)


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    if frame.ndim == 2:
        return frame
    if frame.dtype == np.uint8:
        return cv2.cvtColor(frame, cv2.COLOR_RGB2GRAY)
    return frame.astype(np.float32) @ LUMA_WEIGHTS


def preprocess_frame(frames, config: PreprocessConfig) -> np.ndarray:
    """Turn the last raw frame(s) of a skip window into one network frame.

    ``frames`` is a single raw frame or a pair; a pair is max-pooled
    elementwise. Pixel frames come back as float32 ``(C, H, W)`` in [0, 1];
    vector frames are returned as float32 unchanged.
    """
    if isinstance(frames, (tuple, list)):
        if len(frames) == 2 and frames[0] is not None:
            frame = np.maximum(frames[0], frames[1])
        else:
            frame = frames[-1]
    else:
        frame = frames
    frame = np.asarray(frame)
    if frame.ndim == 1:
        return frame.astype(np.float32)
    if config.grayscale:
        frame = to_grayscale(frame)
    frame = area_resize(frame, config.resolution)
    if frame.dtype == np.uint8:
        out = frame.astype(np.float32) / np.float32(255.0)
    else:
        out = np.clip(frame.astype(np.float32), 0.0, 1.0)
    if out.ndim == 2:
        return out[None]
    return np.ascontiguousarray(out.transpose(2, 0, 1))


@dataclass
class EnvStep:
    obs: np.ndarray
    reward: float
    done: bool
    timeout: bool
    info: dict[str, Any] = field(default_factory=dict)


def noop_start(adapter: EnvAdapter, rng: np.random.Generator, noop_max: int):
    """Execute k ~ U{0..noop_max} no-op actions on a freshly reset adapter.

    Returns ``(k, last_frame, prev_frame, terminated)``.
    """
    k = int(rng.integers(0, noop_max + 1)) if noop_max > 0 else 0
    frame = prev = None
    for _ in range(k):
        prev = frame
        frame, _, terminal, truncated = adapter.step(adapter.noop_action)
        if terminal or truncated:
            return k, frame, prev, True
    return k, frame, prev, False


class PreprocessedEnv:
    """Frame skip, max-pool, resize, stacking, no-op starts and time limit."""

    def __init__(self, adapter: EnvAdapter, config: PreprocessConfig,
                 rng: np.random.Generator, env_id: int = 0):
        config.validate()
        self.adapter = adapter
        self.config = config
        self.rng = rng
        self.env_id = env_id
        self.num_actions = adapter.num_actions
        self.frames_total = 0
        self._stack: list[np.ndarray] = []
        self.obs = self.reset()

    @property
    def observation_shape(self) -> tuple[int, ...]:
        return self.obs.shape

    def _stacked(self) -> np.ndarray:
        return np.concatenate(self._stack, axis=0)

    def reset(self) -> np.ndarray:
        cfg = self.config
        while True:
            frame = self.adapter.reset(self.rng)
            k, last, prev, ended = noop_start(self.adapter, self.rng, cfg.noop_max)
            if not ended:
                break
        self.noops = k
        self.episode_frames = k
        self.episode_return = 0.0
        self.episode_steps = 0
        if last is not None:
            frame = last
        pooled = (prev if prev is not None else frame, frame) if cfg.max_pool_consecutive else frame
        first = preprocess_frame(pooled, cfg)
        self._stack = [first] * cfg.frame_stack
        self.obs = self._stacked()
        return self.obs

    def step(self, action: int) -> EnvStep:
        cfg = self.config
        if not 0 <= int(action) < self.num_actions:
            raise InputError(f"env {self.env_id}: invalid action {action} "
                             f"(num_actions={self.num_actions})")
        total_reward = 0.0
        prev = last = None
        terminal = truncated = False
        for _ in range(cfg.frame_skip):
            prev = last
            last, reward, terminal, truncated = self.adapter.step(int(action))
            total_reward += float(reward)
            self.episode_frames += 1
            self.frames_total += 1
            if terminal or truncated or self.episode_frames >= cfg.time_limit_frames:
                break
        if cfg.max_pool_consecutive and prev is not None:
            frame = preprocess_frame((prev, last), cfg)
        else:
            frame = preprocess_frame(last, cfg)
        self._stack = self._stack[1:] + [frame]
        obs = self._stacked()
        if cfg.reward_clip:
            total_reward = float(np.sign(total_reward))
        self.episode_return += total_reward
        self.episode_steps += 1
        done = bool(terminal)
        timeout = (not done) and (truncated or self.episode_frames >= cfg.time_limit_frames)
        info: dict[str, Any] = {}
        if done or timeout:
            info = {"final_obs": obs, "episode_return": self.episode_return,
                    "episode_frames": self.episode_frames,
                    "episode_steps": self.episode_steps}
            obs = self.reset()
        self.obs = obs
        return EnvStep(obs=obs, reward=total_reward, done=done, timeout=timeout, info=info)


class VectorEnv:
    """``num_envs`` independent preprocessed environments stepped in slot order.

    Each slot owns its own RNG stream spawned from one seed, so a slot's
    trajectory depends only on its own actions.
    """

    def __init__(self, make_adapter, num_envs: int, config: PreprocessConfig, seed: int = 0):
        if num_envs < 1:
            raise ConfigError("num_envs must be >= 1")
        seqs = np.random.SeedSequence(seed).spawn(num_envs)
        self.envs = [PreprocessedEnv(make_adapter(i), config, np.random.default_rng(s), env_id=i)
                     for i, s in enumerate(seqs)]
        self.config = config
        self.num_envs = num_envs
        self.num_actions = self.envs[0].num_actions
        self.frames = 0

    @property
    def observation_shape(self) -> tuple[int, ...]:
        return self.envs[0].observation_shape

    def observations(self) -> np.ndarray:
        return np.stack([env.obs for env in self.envs])

    def step_vector(self, actions) -> list[EnvStep]:
        actions = np.asarray(actions)
        if actions.shape != (self.num_envs,):
            raise InputError(f"expected {self.num_envs} actions, got shape {actions.shape}")
        steps = [env.step(int(a)) for env, a in zip(self.envs, actions)]
        self.frames += self.num_envs * self.config.frame_skip
        return steps
