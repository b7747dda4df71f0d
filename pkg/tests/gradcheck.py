"""Central finite-difference oracle for parameter gradients.

Central differences only measure the derivative when no ReLU mask,
max-pool argmax or Huber branch changes inside [x - h, x + h]. The oracle
records that piecewise signature at every probe so callers can restrict
themselves to instances that stay inside one smooth piece.
"""

import contextlib

import numpy as np
import torch
import torch.nn.functional as F

from fastrainbow.agent import weighted_loss
from fastrainbow.network import NetworkSpec, build

TOY_SPEC = NetworkSpec(base_channels=[2], channel_multiplier=1, blocks_per_stage=1,
                       sn_variant="all", dueling=True, noisy=True, sigma0=0.5,
                       hidden_units=6, adaptive_pool=2, trunk="impala")


@contextlib.contextmanager
def record_pieces():
    """Capture ReLU masks and max-pool argmax indices of every forward call."""
    log = []
    relu, mp, amp = F.relu, F.max_pool2d, F.adaptive_max_pool2d

    def relu_rec(x, inplace=False):
        log.append((x > 0).detach().clone())
        return relu(x)

    def mp_rec(x, *args, **kw):
        kw.pop("return_indices", None)
        out, idx = mp(x, *args, return_indices=True, **kw)
        log.append(idx.clone())
        return out

    def amp_rec(x, size, return_indices=False):
        out, idx = amp(x, size, return_indices=True)
        log.append(idx.clone())
        return out

    F.relu, F.max_pool2d, F.adaptive_max_pool2d = relu_rec, mp_rec, amp_rec
    try:
        yield log
    finally:
        F.relu, F.max_pool2d, F.adaptive_max_pool2d = relu, mp, amp


def toy_problem(seed=0, spec=TOY_SPEC, batch=3, input_shape=(1, 8, 8)):
    torch.manual_seed(seed)
    net = build(spec, input_shape, 2, seed=seed, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 1)
    net.apply_noise(net.sample_noise(gen))
    # sigma estimates are frozen constants from here on
    net.eval()
    obs = torch.rand(batch, *input_shape, generator=gen, dtype=torch.float64)
    actions = torch.tensor([0, 1, 1][:batch])
    y = torch.randn(batch, generator=gen, dtype=torch.float64) * 0.5
    w = torch.rand(batch, generator=gen, dtype=torch.float64) + 0.5
    return net, obs, actions, y, w


def toy_loss(net, obs, actions, y, w, kind="huber"):
    q = net(obs).gather(1, actions[:, None]).squeeze(1)
    return weighted_loss(q, y, w, kind)


def _probe(net, args, kind):
    with record_pieces() as log:
        q = net(args[0]).gather(1, args[1][:, None]).squeeze(1)
        loss = weighted_loss(q, args[2], args[3], kind).item()
    if kind == "huber":
        log.append((args[2] - q).abs().detach() <= 1.0)
    return loss, log


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def autograd_grads(net, *args, kind="huber"):
    net.zero_grad(set_to_none=True)
    toy_loss(net, *args, kind=kind).backward()
    return {n: p.grad.detach().clone() for n, p in net.named_parameters()}


def finite_difference_grads(net, *args, h=1e-3, kind="huber"):
    """Returns (gradients, number of probes that crossed a piece boundary)."""
    out = {}
    crossings = 0
    with torch.no_grad():
        _, base = _probe(net, args, kind)
        for name, p in net.named_parameters():
            g = torch.zeros(p.shape, dtype=p.dtype)
            for idx in np.ndindex(*p.shape):
                orig = p[idx].item()
                p[idx] = orig + h
                plus, sig_p = _probe(net, args, kind)
                p[idx] = orig - h
                minus, sig_m = _probe(net, args, kind)
                p[idx] = orig
                g[idx] = (plus - minus) / (2 * h)
                crossings += not (_same(base, sig_p) and _same(base, sig_m))
            out[name] = g
    return out, crossings


def max_relative_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for name in analytic:
        a = analytic[name].numpy().ravel()
        n = numeric[name].numpy().ravel()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
