"""Central finite-difference checks for the full training objective.

The objective is piecewise smooth: the hard-negative argmax, the positive
filter and the margin fallback all switch branches at isolated points. A
direction whose +-h probes land on different branches than the base point is
not a valid test of the analytic gradient, so it is redrawn.
"""

from __future__ import annotations

import math

import numpy as np

from ddlab.losses import DDLWeights, ddl_total
from ddlab.pairing import build_minibatch, compute_pair_sets, pools_from_dataset
from ddlab.synth import SynthConfig, generate
from ddlab.tensor import EncoderNet, encoder_backward, encoder_forward

H = 1e-5


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _branch_signature(emb, head, labels, sets, margin):
    sig = []
    for ps in sets:
        sig += [ps.positives.left.tobytes(), ps.negatives.right.tobytes()]
    c = np.clip(np.einsum("ij,ji->i", emb, head[:, labels]), -1.0, 1.0)
    sig.append((c <= math.cos(math.pi - margin)).tobytes())
    return tuple(sig)


class Objective:
    """``ddl_total`` as a function of every network parameter on a fixed batch."""

    def __init__(self, net, batch, labels, weights, R, gamma=None, include_within=False):
        self.net, self.batch, self.labels = net, batch, labels
        self.weights, self.R, self.gamma, self.include_within = weights, R, gamma, include_within

    def __call__(self, params, grad=False):
        net = EncoderNet(params, self.net.activation)
        emb, cache = encoder_forward(net, self.batch.features)
        sets = compute_pair_sets(emb, self.batch)
        rep = ddl_total(emb, self.labels, sets, params["head"], self.weights, self.R, self.gamma, self.include_within)
        sig = _branch_signature(emb, params["head"], self.labels, sets, self.weights.margin)
        if not grad:
            return rep.total, sig
        g = encoder_backward(net, cache, rep.grad_embeddings)
        g["head"] = rep.grad_head
        return rep.total, sig, g


def directional_check(obj: Objective, rng, h: float = H, max_draws: int = 20):
    """Worst relative error between ``g . v`` and the central difference along ``v``.

    ``v`` is a random unit direction over all parameters.
    """
    params = obj.net.params
    _, sig0, g = obj(params, grad=True)
    for _ in range(max_draws):
        v = {k: rng.standard_normal(p.shape) for k, p in params.items()}
        norm = math.sqrt(sum(float(np.sum(x * x)) for x in v.values()))
        v = {k: x / norm for k, x in v.items()}
        lp, sp = obj({k: params[k] + h * v[k] for k in params})
        lm, sm = obj({k: params[k] - h * v[k] for k in params})
        if sp != sig0 or sm != sig0:
            continue
        fd = (lp - lm) / (2 * h)
        an = sum(float(np.sum(g[k] * v[k])) for k in params)
        return relative_error(fd, an)
    raise RuntimeError("no smooth direction found")


def random_setup(trial: int, R: int, b: int, K: int, weights: DDLWeights | None = None):
    """A small random problem: dataset, batch, net and labels seeded by ``trial``."""
    cfg = SynthConfig(
        n_identities=max(2 * b, 24),
        samples_per_identity=4,
        dim=12,
        hard_sigmas=(0.1, 0.15)[:K],
        hard_ranks=(6, 5)[:K],
        seed=trial,
    )
    _, ds = generate(cfg)
    pools = pools_from_dataset(ds)
    ids = np.unique(ds.identities)
    cls = {int(i): k for k, i in enumerate(ids)}
    batch = build_minibatch(pools, b, K, [trial, 7])
    net = EncoderNet.init([12, 16, 8], len(ids), [trial, 11])
    labels = np.array([cls[int(i)] for i in batch.identities])
    return Objective(net, batch, labels, weights or DDLWeights(), R)


def configs(n: int = 108):
    """``n`` trials cycling over every (R, b, K) combination."""
    grid = [(R, b, K) for R in (10, 50, 100) for b in (4, 8, 16) for K in (1, 2)]
    return [(t,) + grid[t % len(grid)] for t in range(n)]
