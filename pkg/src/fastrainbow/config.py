"""Flat ``key = value`` run configuration with layered overrides.

Precedence, lowest to highest: built-in defaults, config file, environment
variables prefixed ``FASTRAINBOW_``, command-line flags.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from fastrainbow.agent import LOSSES, AgentConfig
from fastrainbow.envs import ENV_NAMES, PreprocessConfig, env_factory, profile_config
from fastrainbow.errors import ConfigError
from fastrainbow.network import SN_VARIANTS, TRUNKS, NetworkSpec
from fastrainbow.replay import ReplayConfig

ENV_PREFIX = "FASTRAINBOW_"
MODES = ("serial", "overlap")


@dataclass
class Schedule:
    batch_size: int = 256
    num_envs: int = 64
    train_steps_per_vector_step: float = 2.0
    warmup_frames: int = 80_000
    total_frames: int = 10_000_000
    snapshot_period_frames: int = 1_000_000
    frame_skip: int = 4

    @property
    def replay_ratio(self) -> float:
        return self.batch_size * self.train_steps_per_vector_step / self.num_envs

    @property
    def frames_per_vector_step(self) -> int:
        return self.num_envs * self.frame_skip

    @property
    def warmup_vector_steps(self) -> int:
        return -(-self.warmup_frames // self.frames_per_vector_step)

    @property
    def total_vector_steps(self) -> int:
        return -(-self.total_frames // self.frames_per_vector_step)

    def train_steps_at(self, vector_step: int) -> int:
        """Train steps due in iteration ``vector_step`` (0-based).

        Fractional ``k`` is spread evenly: the cumulative count after ``j``
        post-warmup iterations is ``floor(k * j)``.
        """
        j = vector_step - self.warmup_vector_steps
        if j < 0:
            return 0
        k = _exact(self.train_steps_per_vector_step)
        return int((k * (j + 1)) // 1 - (k * j) // 1)

    def validate(self) -> None:
        for f in fields(self):
            if f.name == "warmup_frames":
                if self.warmup_frames < 0:
                    raise ConfigError("warmup_frames must be >= 0")
            elif not getattr(self, f.name) > 0:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")


def _exact(x: float):
    from fractions import Fraction
    return Fraction(str(x))


@dataclass
class RunConfig:
    # environment
    env: str = "chain"
    chain_length: int = 8
    seed: int = 1
    out_dir: str = "runs/run"
    mode: str = "serial"
    torch_threads: int | None = None
    # replay
    replay_capacity: int = 1_048_576
    n: int = 3
    gamma: float = 0.99
    priority_exponent: float = 0.5
    priority_floor: float = 1e-6
    beta0: float = 0.45
    beta_anneal_frames: int | None = None
    obs_storage: str | None = None
    # network
    trunk: str | None = None
    base_channels: str = "16,32,32"
    channel_multiplier: int = 2
    blocks_per_stage: int = 2
    sn: str = "all"
    dueling: bool = True
    noisy: bool = True
    sigma0: float = 0.5
    hidden_units: int = 256
    adaptive_pool: int = 6
    mlp_units: int = 64
    # agent
    learning_rate: float = 0.00025
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    grad_clip_norm: float = 10.0
    target_sync_frames: int = 32_000
    eps_initial: float = 1.0
    eps_final: float = 0.01
    eps_decay_frames: int = 500_000
    loss: str = "huber"
    use_epsilon: bool = True
    mixed_precision: bool = False
    # preprocessing (None: the env profile's value)
    frame_skip: int | None = None
    frame_stack: int | None = None
    resolution: str | None = None
    grayscale: bool | None = None
    max_pool: bool | None = None
    noop_max: int | None = None
    time_limit_frames: int = 108_000
    reward_clip: bool = False
    # schedule
    batch_size: int = 256
    num_envs: int = 64
    train_steps_per_vector_step: float = 2.0
    warmup_frames: int = 80_000
    total_frames: int = 10_000_000
    snapshot_period_frames: int = 1_000_000

    # -- derived component configs --------------------------------------
    def preprocess(self) -> PreprocessConfig:
        _, profile, env_overrides = env_factory(self.env, self.chain_length)
        overrides = dict(env_overrides)
        mapping = {"frame_skip": "frame_skip", "frame_stack": "frame_stack",
                   "grayscale": "grayscale", "max_pool": "max_pool_consecutive",
                   "noop_max": "noop_max"}
        for key, target in mapping.items():
            value = getattr(self, key)
            if value is not None:
                overrides[target] = value
        if self.resolution is not None:
            overrides["resolution"] = parse_resolution(self.resolution)
        overrides["time_limit_frames"] = self.time_limit_frames
        overrides["reward_clip"] = self.reward_clip
        return profile_config(profile, **overrides)

    def is_pixel_env(self) -> bool:
        return self.env != "chain"

    def network_spec(self) -> NetworkSpec:
        trunk = self.trunk or ("impala" if self.is_pixel_env() else "mlp")
        return NetworkSpec(
            base_channels=parse_int_list(self.base_channels, "base_channels"),
            channel_multiplier=self.channel_multiplier,
            blocks_per_stage=self.blocks_per_stage,
            sn_variant=self.sn,
            dueling=self.dueling,
            noisy=self.noisy,
            sigma0=self.sigma0,
            hidden_units=self.hidden_units,
            adaptive_pool=self.adaptive_pool,
            trunk=trunk,
            mlp_units=self.mlp_units,
        )

    def agent_config(self) -> AgentConfig:
        return AgentConfig(
            gamma=self.gamma, n=self.n, learning_rate=self.learning_rate,
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
            grad_clip_norm=self.grad_clip_norm, target_sync_frames=self.target_sync_frames,
            eps_initial=self.eps_initial, eps_final=self.eps_final,
            eps_decay_frames=self.eps_decay_frames, loss=self.loss,
            batch_size=self.batch_size, use_epsilon=self.use_epsilon,
            mixed_precision=self.mixed_precision,
        )

    def replay_config(self) -> ReplayConfig:
        return ReplayConfig(
            capacity=self.replay_capacity, n=self.n, gamma=self.gamma,
            priority_exponent=self.priority_exponent, priority_floor=self.priority_floor,
            beta0=self.beta0,
            beta_anneal_frames=self.beta_anneal_frames or self.total_frames,
        )

    def schedule(self) -> Schedule:
        return Schedule(
            batch_size=self.batch_size, num_envs=self.num_envs,
            train_steps_per_vector_step=self.train_steps_per_vector_step,
            warmup_frames=self.warmup_frames, total_frames=self.total_frames,
            snapshot_period_frames=self.snapshot_period_frames,
            frame_skip=self.preprocess().frame_skip,
        )

    def storage_dtype(self) -> str:
        if self.obs_storage is not None:
            return self.obs_storage
        return "uint8" if self.is_pixel_env() else "float32"

    def validate(self) -> "RunConfig":
        if self.env not in ENV_NAMES:
            raise ConfigError(f"env: unknown environment {self.env!r}; choose from {ENV_NAMES}")
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.sn not in SN_VARIANTS:
            raise ConfigError(f"sn: must be one of {SN_VARIANTS}, got {self.sn!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss: must be one of {LOSSES}, got {self.loss!r}")
        if self.trunk is not None and self.trunk not in TRUNKS:
            raise ConfigError(f"trunk: must be one of {TRUNKS}, got {self.trunk!r}")
        if self.obs_storage not in (None, "uint8", "float32"):
            raise ConfigError(f"obs_storage: must be uint8 or float32, got {self.obs_storage!r}")
        if self.torch_threads is not None and self.torch_threads < 1:
            raise ConfigError("torch_threads must be >= 1")
        if self.chain_length < 2:
            raise ConfigError("chain_length must be >= 2")
        self.replay_config().validate()
        self.network_spec().validate()
        self.agent_config().validate()
        self.schedule().validate()
        return self


# -- parsing -------------------------------------------------------------

def parse_resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in str(text).lower().split("x"))
    except ValueError:
        raise ConfigError(f"resolution: expected HxW, got {text!r}") from None
    return h, w


def parse_int_list(text: str, key: str) -> list[int]:
    try:
        return [int(p) for p in str(text).split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}
_HINTS = typing.get_type_hints(RunConfig)
KEYS = tuple(f.name for f in fields(RunConfig))


def _base_type(hint):
    args = typing.get_args(hint)
    if typing.get_origin(hint) in (typing.Union, types.UnionType):
        non_none = [a for a in args if a is not type(None)]
        return non_none[0], True
    return hint, False


def coerce(key: str, text: str):
    if key not in _HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    typ, optional = _base_type(_HINTS[key])
    raw = str(text).strip()
    if optional and raw.lower() in ("auto", "none", ""):
        return None
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw.replace("_", ""))
        if typ is float:
            return float(raw.replace("_", ""))
        return raw
    except ValueError:
        raise ConfigError(f"{key}: malformed value {raw!r} (expected {typ.__name__})") from None


def parse_lines(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = coerce(key, value)
    return values


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    values = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in KEYS:
            raise ConfigError(f"environment variable {name}: unknown config key {key!r}")
        values[key] = coerce(key, value)
    return values


def parse_config(path: str | Path | None = None, flags: dict | None = None,
                 environ=None) -> RunConfig:
    """Build a validated :class:`RunConfig`.

    ``flags`` maps keys to string or typed values and wins over the file and
    the environment.
    """
    values: dict = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc}") from exc
        values.update(parse_lines(text, str(p)))
    values.update(env_overrides(environ))
    for key, value in (flags or {}).items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = coerce(key, value) if isinstance(value, str) else value
    return RunConfig(**values).validate()


def format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes).validate()
