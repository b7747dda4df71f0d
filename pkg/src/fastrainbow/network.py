"""Q-network: residual conv trunk, adaptive max-pool, noisy dueling head.

Spectral normalization is applied to residual-block convolutions according to
``NetworkSpec.sn_variant``. The normalizing constant is estimated by power
iteration and treated as a constant during backpropagation; gradients come
from torch autograd.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from fastrainbow.errors import ConfigError, InputError

SN_VARIANTS = ("none", "all", "last")
TRUNKS = ("impala", "nature", "mlp")


@dataclass
class NetworkSpec:
    base_channels: list[int] = field(default_factory=lambda: [16, 32, 32])
    channel_multiplier: int = 2
    blocks_per_stage: int = 2
    sn_variant: str = "all"
    dueling: bool = True
    noisy: bool = True
    sigma0: float = 0.5
    hidden_units: int = 256
    adaptive_pool: int = 6
    trunk: str = "impala"
    mlp_units: int = 64

    def validate(self) -> None:
        if self.sn_variant not in SN_VARIANTS:
            raise ConfigError(f"sn_variant must be one of {SN_VARIANTS}, got {self.sn_variant!r}")
        if self.trunk not in TRUNKS:
            raise ConfigError(f"trunk must be one of {TRUNKS}, got {self.trunk!r}")
        if self.channel_multiplier <= 0:
            raise ConfigError("channel_multiplier must be positive")
        if self.sigma0 < 0:
            raise ConfigError("sigma0 must be non-negative")
        for name in ("blocks_per_stage", "hidden_units", "adaptive_pool", "mlp_units"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.base_channels or any(c <= 0 for c in self.base_channels):
            raise ConfigError("base_channels must be a non-empty list of positive ints")

    @property
    def stage_channels(self) -> list[int]:
        return [c * self.channel_multiplier for c in self.base_channels]

    def flatten_width(self) -> int:
        if self.trunk == "impala":
            return self.adaptive_pool ** 2 * self.stage_channels[-1]
        if self.trunk == "nature":
            return self.adaptive_pool ** 2 * 64 * self.channel_multiplier
        return self.mlp_units * self.channel_multiplier


class PowerIterationResult(NamedTuple):
    sigma: float
    u: torch.Tensor
    v: torch.Tensor
    degenerate: bool


def power_iteration(W: torch.Tensor, u: torch.Tensor, iters: int = 1,
                    eps: float = 1e-12) -> PowerIterationResult:
    """Estimate the largest singular value of a matrix.

    Conv kernels are viewed as ``(c_out, c_in * k_h * k_w)``. A zero matrix
    returns sigma 0 with the state unchanged and ``degenerate`` set.
    """
    W = W.detach().reshape(W.shape[0], -1)
    u = u.detach()
    v = torch.zeros(W.shape[1], dtype=W.dtype, device=W.device)
    for _ in range(iters):
        wt_u = W.t() @ u
        nv = wt_u.norm()
        if nv <= eps:
            return PowerIterationResult(0.0, u, v, True)
        v = wt_u / nv
        w_v = W @ v
        nu = w_v.norm()
        if nu <= eps:
            return PowerIterationResult(0.0, u, v, True)
        u = w_v / nu
    if iters <= 0:
        wt_u = W.t() @ u
        nv = wt_u.norm()
        if nv <= eps:
            return PowerIterationResult(0.0, u, v, True)
        v = wt_u / nv
    sigma = float(u @ W @ v)
    return PowerIterationResult(sigma, u, v, False)


def scale_noise(x: torch.Tensor) -> torch.Tensor:
    """f(x) = sgn(x) * sqrt(|x|), the factorized-noise transform."""
    return x.sign() * x.abs().sqrt()


class SNConv2d(nn.Conv2d):
    """Conv2d whose kernel is divided by a power-iteration estimate of its
    spectral norm.

    The estimate is refreshed by one power-iteration step on every forward
    pass made in training mode with gradients enabled; otherwise the stored
    ``sigma`` buffer is reused, which keeps the forward map a fixed function
    of the weights (needed for finite-difference checks and evaluation).
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.register_buffer("sn_u", torch.zeros(self.out_channels))
        self.register_buffer("sigma", torch.ones(()))

    @torch.no_grad()
    def reset_sn_state(self, generator: torch.Generator | None = None) -> None:
        u = torch.randn(self.out_channels, generator=generator, dtype=self.weight.dtype)
        self.sn_u.copy_(u / u.norm().clamp_min(1e-12))
        self.refresh_sigma()

    @torch.no_grad()
    def refresh_sigma(self, iters: int = 1) -> bool:
        res = power_iteration(self.weight, self.sn_u, iters)
        if res.degenerate:
            self.sigma.fill_(0.0)
            return False
        self.sn_u.copy_(res.u)
        self.sigma.fill_(res.sigma)
        return True

    def normalized_weight(self) -> torch.Tensor:
        sigma = self.sigma.detach()
        if float(sigma) <= 0.0:
            return self.weight
        return self.weight / sigma

    def forward(self, x):
        if self.training and torch.is_grad_enabled():
            self.refresh_sigma()
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class NoisyLinear(nn.Module):
    """Affine layer with factorized Gaussian parameter noise.

    Weights are ``mu_w + sigma_w * outer(eps_out, eps_in)`` and the bias is
    ``mu_b + sigma_b * eps_out``. The noise vectors are buffers set through
    :meth:`set_noise`; zero noise yields the mean network.
    """

    def __init__(self, in_features: int, out_features: int, sigma0: float = 0.5):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.sigma0 = sigma0
        self.weight_mu = nn.Parameter(torch.empty(out_features, in_features))
        self.weight_sigma = nn.Parameter(torch.empty(out_features, in_features))
        self.bias_mu = nn.Parameter(torch.empty(out_features))
        self.bias_sigma = nn.Parameter(torch.empty(out_features))
        self.register_buffer("eps_in", torch.zeros(in_features))
        self.register_buffer("eps_out", torch.zeros(out_features))

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.in_features)
        self.weight_mu.uniform_(-bound, bound, generator=generator)
        self.bias_mu.uniform_(-bound, bound, generator=generator)
        self.weight_sigma.fill_(self.sigma0 / math.sqrt(self.in_features))
        self.bias_sigma.fill_(self.sigma0 / math.sqrt(self.in_features))

    def sample_noise(self, generator: torch.Generator | None = None):
        eps_in = scale_noise(torch.randn(self.in_features, generator=generator,
                                         dtype=self.weight_mu.dtype))
        eps_out = scale_noise(torch.randn(self.out_features, generator=generator,
                                          dtype=self.weight_mu.dtype))
        return eps_in, eps_out

    @torch.no_grad()
    def set_noise(self, eps_in=None, eps_out=None) -> None:
        if eps_in is None:
            self.eps_in.zero_()
            self.eps_out.zero_()
        else:
            self.eps_in.copy_(eps_in)
            self.eps_out.copy_(eps_out)

    def forward(self, x):
        weight = self.weight_mu + self.weight_sigma * torch.outer(self.eps_out, self.eps_in)
        bias = self.bias_mu + self.bias_sigma * self.eps_out
        return F.linear(x, weight, bias)


class PlainLinear(nn.Linear):
    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.in_features)
        self.weight.uniform_(-bound, bound, generator=generator)
        self.bias.uniform_(-bound, bound, generator=generator)


def _conv(c_in, c_out, sn: bool, kernel=3, stride=1, padding=1):
    cls = SNConv2d if sn else nn.Conv2d
    return cls(c_in, c_out, kernel, stride=stride, padding=padding)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, sn: bool):
        super().__init__()
        self.conv0 = _conv(channels, channels, sn)
        self.conv1 = _conv(channels, channels, sn)

    def forward(self, x):
        out = self.conv0(F.relu(x))
        out = self.conv1(F.relu(out))
        return x + out


class ImpalaStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, blocks: int, sn: bool):
        super().__init__()
        self.conv = _conv(c_in, c_out, sn=False)
        self.blocks = nn.ModuleList(ResidualBlock(c_out, sn) for _ in range(blocks))

    def forward(self, x):
        x = self.conv(x)
        x = F.max_pool2d(x, kernel_size=3, stride=2, padding=1)
        for block in self.blocks:
            x = block(x)
        return x


class ImpalaTrunk(nn.Module):
    def __init__(self, in_channels: int, spec: NetworkSpec):
        super().__init__()
        n_stages = len(spec.base_channels)
        stages = []
        c = in_channels
        for i, c_out in enumerate(spec.stage_channels):
            if spec.sn_variant == "all":
                sn = True
            elif spec.sn_variant == "last":
                sn = i == n_stages - 1
            else:
                sn = False
            stages.append(ImpalaStage(c, c_out, spec.blocks_per_stage, sn))
            c = c_out
        self.stages = nn.ModuleList(stages)
        self.pool = spec.adaptive_pool

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        x = F.relu(x)
        x = F.adaptive_max_pool2d(x, self.pool)
        return x.flatten(1)


class NatureTrunk(nn.Module):
    """The small three-layer DQN encoder, kept as a baseline toggle."""

    def __init__(self, in_channels: int, spec: NetworkSpec):
        super().__init__()
        m = spec.channel_multiplier
        self.convs = nn.ModuleList([
            nn.Conv2d(in_channels, 32 * m, 8, stride=4),
            nn.Conv2d(32 * m, 64 * m, 4, stride=2),
            nn.Conv2d(64 * m, 64 * m, 3, stride=1),
        ])
        self.pool = spec.adaptive_pool

    def forward(self, x):
        for conv in self.convs:
            x = F.relu(conv(x))
        return F.adaptive_max_pool2d(x, self.pool).flatten(1)


class MLPTrunk(nn.Module):
    """Single dense layer for vector observations."""

    def __init__(self, in_features: int, spec: NetworkSpec):
        super().__init__()
        self.fc = PlainLinear(in_features, spec.mlp_units * spec.channel_multiplier)

    def forward(self, x):
        return F.relu(self.fc(x.flatten(1)))


def dueling_combine(value: torch.Tensor, advantage: torch.Tensor) -> torch.Tensor:
    return value + advantage - advantage.mean(dim=1, keepdim=True)


NoiseDraw = dict  # layer name -> (eps_in, eps_out)


class QNetwork(nn.Module):
    def __init__(self, spec: NetworkSpec, input_shape: tuple[int, ...], num_actions: int):
        super().__init__()
        spec.validate()
        if num_actions < 2:
            raise ConfigError(f"num_actions must be >= 2, got {num_actions}")
        if any(int(d) <= 0 for d in input_shape):
            raise ConfigError(f"input dimensions must be positive, got {input_shape}")
        self.spec = copy.deepcopy(spec)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_actions = num_actions
        if spec.trunk == "mlp":
            self.trunk = MLPTrunk(math.prod(self.input_shape), spec)
        else:
            if len(self.input_shape) != 3:
                raise ConfigError(f"conv trunks need (C, H, W) input, got {input_shape}")
            trunk_cls = ImpalaTrunk if spec.trunk == "impala" else NatureTrunk
            self.trunk = trunk_cls(self.input_shape[0], spec)
        width = spec.flatten_width()

        def dense(i, o):
            return NoisyLinear(i, o, spec.sigma0) if spec.noisy else PlainLinear(i, o)

        self.hidden = dense(width, spec.hidden_units)
        if spec.dueling:
            self.value = dense(spec.hidden_units, 1)
            self.advantage = dense(spec.hidden_units, num_actions)
        else:
            self.q = dense(spec.hidden_units, num_actions)
        if spec.trunk != "mlp":
            # NHWC conv kernels run about twice as fast on CPU
            self.to(memory_format=torch.channels_last)

    # -- initialization -------------------------------------------------
    @torch.no_grad()
    def init(self, generator: torch.Generator | None = None) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = math.sqrt(6.0 / fan_in)
                m.weight.uniform_(-bound, bound, generator=generator)
                b = 1.0 / math.sqrt(fan_in)
                m.bias.uniform_(-b, b, generator=generator)
                if isinstance(m, SNConv2d):
                    m.reset_sn_state(generator)
            elif isinstance(m, (NoisyLinear, PlainLinear)):
                m.reset_parameters(generator)

    # -- noise ----------------------------------------------------------
    def noisy_layers(self):
        return [(name, m) for name, m in self.named_modules() if isinstance(m, NoisyLinear)]

    def sample_noise(self, generator: torch.Generator | None = None) -> NoiseDraw:
        return {name: m.sample_noise(generator) for name, m in self.noisy_layers()}

    def apply_noise(self, draw: NoiseDraw | None) -> None:
        """Install a noise draw; ``None`` zeroes all noise (mean network)."""
        for name, m in self.noisy_layers():
            if draw is None:
                m.set_noise()
            else:
                m.set_noise(*draw[name])

    def resample_noise(self, generator: torch.Generator | None = None) -> None:
        if self.spec.noisy:
            self.apply_noise(self.sample_noise(generator))

    # -- forward --------------------------------------------------------
    def features(self, obs: torch.Tensor) -> torch.Tensor:
        if tuple(obs.shape[1:]) != self.input_shape:
            raise InputError(f"expected observations of shape {self.input_shape}, "
                             f"got {tuple(obs.shape[1:])}")
        return F.relu(self.hidden(self.trunk(obs)))

    def value_and_advantage(self, obs: torch.Tensor):
        h = self.features(obs)
        return self.value(h), self.advantage(h)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        h = self.features(obs)
        if self.spec.dueling:
            return dueling_combine(self.value(h), self.advantage(h))
        return self.q(h)

    def sn_layers(self):
        return [(name, m) for name, m in self.named_modules() if isinstance(m, SNConv2d)]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build(spec: NetworkSpec, input_shape, num_actions: int, seed: int | None = 0,
          dtype: torch.dtype = torch.float32) -> QNetwork:
    net = QNetwork(spec, input_shape, num_actions).to(dtype)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    net.init(gen)
    return net


def forward(net: QNetwork, obs: torch.Tensor, noise: NoiseDraw | None = None) -> torch.Tensor:
    """Forward with an explicit noise draw (``None`` means zero noise)."""
    net.apply_noise(noise)
    return net(obs)


def hard_update(target: nn.Module, source: nn.Module) -> None:
    """Copy every parameter and buffer of ``source`` into ``target``."""
    with torch.no_grad():
        target.load_state_dict(source.state_dict())
