"""Environment adapters, preprocessing and the built-in oracle environments."""

from fastrainbow.envs.builtin import (
    ChainMDP,
    MiniCatch,
    catch_random_policy_return,
    chain_value_iteration,
)
from fastrainbow.envs.core import (
    PROFILES,
    EnvAdapter,
    EnvStep,
    PreprocessConfig,
    PreprocessedEnv,
    VectorEnv,
    area_resize,
    noop_start,
    preprocess_frame,
    profile_config,
    to_grayscale,
)
from fastrainbow.errors import ConfigError

ENV_NAMES = ("chain", "chain_pixels", "minicatch")


def env_factory(name: str, chain_length: int = 8):
    """Return ``(make_adapter, default_profile_name, profile_overrides)``."""
    if name == "chain":
        return (lambda i: ChainMDP(chain_length)), "vector", {}
    if name == "chain_pixels":
        return ((lambda i: ChainMDP(chain_length, pixels=True, pixel_size=24)),
                "minicatch", {"resolution": (24, 24), "frame_stack": 1})
    if name == "minicatch":
        return (lambda i: MiniCatch()), "minicatch", {}
    raise ConfigError(f"unknown env {name!r}; choose from {ENV_NAMES}")


__all__ = [
    "ChainMDP", "MiniCatch", "catch_random_policy_return", "chain_value_iteration",
    "PROFILES", "EnvAdapter", "EnvStep", "PreprocessConfig", "PreprocessedEnv",
    "VectorEnv", "area_resize", "noop_start", "preprocess_frame", "profile_config",
    "to_grayscale", "env_factory", "ENV_NAMES",
]
