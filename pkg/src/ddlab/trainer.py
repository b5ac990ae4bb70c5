"""Training loop and evaluation.

A run is a pure function of (config, dataset, initial parameters): every
random draw is seeded from ``config.seed`` and the iteration counter.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import pairing
from .distribution import estimate_histogram
from .losses import DDLWeights, ddl_total, margin_softmax_loss
from .metrics import (
    DEFAULT_FAR_GRID,
    DomainEval,
    EvalReport,
    expectation_margin,
    histogram_intersection,
    rank1_identification,
    verification_metrics,
)
from .pairing import DegenerateDistributionError, build_minibatch, compute_pair_sets, pools_from_dataset
from .synth import EASY, Dataset
from .tensor import EncoderNet, OptimizerState, encoder_backward, encoder_forward, l2_normalize, sgd_step

logger = logging.getLogger(__name__)

MODES = ("baseline", "finetune-plain", "ddl", "ddl-random-mining", "ddl-mixture", "kl-only", "order-only")
PLAIN_MODES = ("baseline", "finetune-plain")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    b: int = 16
    K: int = 2
    iterations: int = 1000
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    weights: DDLWeights = field(default_factory=DDLWeights)
    bins: int = 100
    gamma: float | None = None
    seed: int = 0
    mode: str = "ddl"
    order_pairs: str = "cross"  # or "all"
    max_retries: int = 3
    eval_every: float = 0.1  # fraction of iterations between eval checkpoints
    eval_rounds: int = 4
    eval_seed: int = 12345
    gallery_per_identity: int = 3
    far_grid: tuple = DEFAULT_FAR_GRID

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.order_pairs not in ("cross", "all"):
            raise ValueError("order_pairs must be 'cross' or 'all'")
        if self.mode == "ddl-mixture" and self.K < 2:
            raise ValueError("mixture mode needs at least two hard domains to merge")

    def lr_at(self, it: int) -> float:
        """Base rate before iteration ceil(iterations / 2), a tenth of it from there on."""
        return self.lr if it < math.ceil(self.iterations / 2) else self.lr / 10.0

    def effective_weights(self) -> DDLWeights:
        w = self.weights
        if self.mode in PLAIN_MODES:
            return replace(w, lambda_pos=0.0, lambda_neg=0.0, lambda_order=0.0)
        if self.mode == "kl-only":
            return replace(w, lambda_order=0.0)
        if self.mode == "order-only":
            return replace(w, lambda_pos=0.0, lambda_neg=0.0)
        return w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["far_grid"] = list(self.far_grid)
        return d


@dataclass
class TrainLog:
    config: dict
    records: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def iterations(self) -> list:
        return [r for r in self.records if r["type"] == "iter"]

    @property
    def evals(self) -> list:
        return [r for r in self.records if r["type"] == "eval"]

    def lines(self):
        """Line-delimited JSON; wall time is kept out so logs stay byte-reproducible."""
        yield json.dumps({"type": "config", "seed": self.config["seed"], "config": self.config}, sort_keys=True)
        for r in self.records:
            yield json.dumps(r, sort_keys=True)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")


def class_index(dataset: Dataset) -> dict:
    return {int(i): k for k, i in enumerate(np.unique(dataset.identities))}


def _batch_domains(config: TrainConfig):
    if config.mode == "ddl-mixture":
        return [EASY, "hard-mix"], 1
    return None, config.K


def train(config: TrainConfig, dataset: Dataset, net: EncoderNet, eval_dataset: Dataset | None = None, on_checkpoint=None):
    """Run ``config.mode`` on ``dataset`` starting from ``net``.

    Args:
        config: run configuration.
        dataset: training split; head classes follow its sorted identity ids.
        net: initial parameters (not modified).
        eval_dataset: identity-disjoint split used for periodic evaluation.
        on_checkpoint: optional ``callback(iteration, net)`` at every eval point.

    Returns:
        ``(trained_net, TrainLog)``
    """
    start = time.perf_counter()
    classes = class_index(dataset)
    if net.head.shape[1] != len(classes):
        raise ValueError(f"head has {net.head.shape[1]} classes, dataset has {len(classes)} identities")
    domains, K = _batch_domains(config)
    pools = pools_from_dataset(dataset, mixture=config.mode == "ddl-mixture")
    weights = config.effective_weights()
    mining = "random" if config.mode == "ddl-random-mining" else "hard"
    include_within = config.order_pairs == "all"
    log = TrainLog(config.to_dict())
    params = {k: v.copy() for k, v in net.params.items()}
    state = OptimizerState(config.lr, config.momentum, config.weight_decay)
    every = max(1, int(round(config.eval_every * config.iterations)))

    for it in range(config.iterations):
        for attempt in range(config.max_retries + 1):
            batch_seed = [config.seed, it, attempt]
            batch = build_minibatch(pools, config.b, K, batch_seed, domains)
            cur = EncoderNet(params, net.activation)
            emb, cache = encoder_forward(cur, batch.features)
            labels = np.array([classes[int(i)] for i in batch.identities])
            try:
                if config.mode in PLAIN_MODES:
                    loss, g_emb, g_head = margin_softmax_loss(emb, labels, params["head"], weights.scale, weights.margin)
                    record = {"kl_pos": [0.0] * K, "kl_neg": [0.0] * K, "kl": 0.0, "order": 0.0,
                              "margin_softmax": loss, "total": loss}
                else:
                    sets = compute_pair_sets(emb, batch, mining, seed=batch_seed + [1])
                    rep = ddl_total(emb, labels, sets, params["head"], weights, config.bins, config.gamma, include_within)
                    g_emb, g_head, record = rep.grad_embeddings, rep.grad_head, rep.to_record()
                break
            except DegenerateDistributionError as exc:
                logger.warning("iteration %d attempt %d: degenerate batch (%s), resampling", it, attempt, exc)
        else:
            raise TrainingError(f"iteration {it}: degenerate batch after {config.max_retries} retries")

        grads = encoder_backward(cur, cache, g_emb)
        grads["head"] = g_head
        state.lr = config.lr_at(it)
        params, state = sgd_step(params, grads, state)
        log.records.append({"type": "iter", "iter": it, "lr": state.lr, "retries": attempt, **record})

        if (it + 1) % every == 0 or it + 1 == config.iterations:
            cur = EncoderNet(params, net.activation)
            if eval_dataset is not None:
                report = evaluate(cur, eval_dataset, config)
                log.records.append({"type": "eval", "iter": it, "report": report.to_dict()})
            if on_checkpoint is not None:
                on_checkpoint(it, cur)

    log.wall_time = time.perf_counter() - start
    return EncoderNet(params, net.activation), log


def _positive_pairs(ids):
    """All (i, j), i < j, index pairs sharing an identity."""
    left, right = [], []
    order = np.argsort(ids, kind="stable")
    _, starts = np.unique(ids[order], return_index=True)
    for rows in np.split(order, starts[1:]):
        a, b = np.triu_indices(len(rows), k=1)
        left.append(rows[a])
        right.append(rows[b])
    return np.concatenate(left), np.concatenate(right)


def _mined_negatives(emb, ids, b, rounds, rng):
    uniq = np.unique(ids)
    by_id = {int(i): np.flatnonzero(ids == i) for i in uniq}
    out = []
    for _ in range(rounds):
        perm = rng.permutation(uniq)
        reps = np.array([rng.choice(by_id[int(i)]) for i in perm])
        for chunk in np.array_split(reps, max(1, len(reps) // b)):
            if len(chunk) >= 2:
                out.append(pairing.hard_negative_similarities(emb, chunk).values)
    return np.concatenate(out)


def _impostor_pairs(ids, n, rng):
    m = len(ids)
    left = rng.integers(0, m, size=4 * n)
    right = rng.integers(0, m, size=4 * n)
    keep = ids[left] != ids[right]
    return left[keep][:n], right[keep][:n]


def evaluate(net: EncoderNet, dataset: Dataset, config: TrainConfig) -> EvalReport:
    """Per-domain statistics on an identity-disjoint evaluation split.

    For each domain: positives are every same-identity pair in the domain;
    negatives are hard-mined within groups of ``b`` distinct identities
    (``eval_rounds`` random groupings). Verification pits the positives
    against an equal number of random cross-identity pairs. Identification
    uses a gallery of per-identity means over the first
    ``gallery_per_identity`` easy samples; the remaining easy samples and all
    hard samples are probes.
    """
    ids_all = np.unique(dataset.identities)
    if len(ids_all) < 2:
        raise ValueError("evaluation needs at least two identities")
    emb_all, _ = encoder_forward(net, dataset.features)
    easy = np.flatnonzero(dataset.domains == EASY)
    gallery_rows, easy_probe_rows = [], []
    for i in ids_all:
        rows = easy[dataset.identities[easy] == i]
        gallery_rows.append(rows[: config.gallery_per_identity])
        easy_probe_rows.append(rows[config.gallery_per_identity:])
    gallery = l2_normalize(np.stack([emb_all[r].mean(axis=0) for r in gallery_rows]))
    easy_probe_rows = np.concatenate(easy_probe_rows)

    report = EvalReport(far_grid=tuple(config.far_grid))
    for dom, rows, pos, neg, rng in _domain_similarities(emb_all, dataset, config):
        emb, ids = emb_all[rows], dataset.identities[rows]
        il, ir = _impostor_pairs(ids, len(pos), rng)
        impostor = np.clip(np.einsum("ij,ij->i", emb[il], emb[ir]), -1.0, 1.0)
        acc, tar = verification_metrics(pos, impostor, config.far_grid)
        hp = estimate_histogram(pos, config.bins, config.gamma)
        hn = estimate_histogram(neg, config.bins, config.gamma)
        probes = easy_probe_rows if dom == EASY else rows
        if len(probes):
            rank1 = rank1_identification(gallery, ids_all, emb_all[probes], dataset.identities[probes])
        else:
            rank1 = float("nan")
        report.domains[dom] = DomainEval(
            margin=expectation_margin(pos, neg),
            intersection=histogram_intersection(hp, hn),
            accuracy=acc,
            tar=tar,
            rank1=rank1,
            mean_pos=float(pos.mean()),
            mean_neg=float(neg.mean()),
        )
    return report


def _domain_similarities(emb_all, dataset, config):
    """Yield ``(domain, rows, positives, mined negatives, rng)`` per domain."""
    for d_index, dom in enumerate(dataset.domain_names):
        rng = np.random.default_rng([config.eval_seed, d_index])
        rows = np.flatnonzero(dataset.domains == dom)
        emb, ids = emb_all[rows], dataset.identities[rows]
        l, r = _positive_pairs(ids)
        pos = np.clip(np.einsum("ij,ij->i", emb[l], emb[r]), -1.0, 1.0)
        neg = _mined_negatives(emb, ids, config.b, config.eval_rounds, rng)
        yield dom, rows, pos, neg, rng


def domain_histograms(net: EncoderNet, dataset: Dataset, config: TrainConfig) -> dict:
    """``{domain: (positive histogram, negative histogram)}`` using the evaluation pairing."""
    emb_all, _ = encoder_forward(net, dataset.features)
    return {
        dom: (estimate_histogram(pos, config.bins, config.gamma), estimate_histogram(neg, config.bins, config.gamma))
        for dom, _, pos, neg, _ in _domain_similarities(emb_all, dataset, config)
    }


def init_net(input_dim: int, n_classes: int, hidden=(64,), embed_dim: int = 16, seed=0, activation="tanh") -> EncoderNet:
    return EncoderNet.init([input_dim, *hidden, embed_dim], n_classes, seed, activation)
