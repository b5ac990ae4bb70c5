"""Distribution distillation objective and the angular-margin classification term.

All terms return analytic gradients. Similarity-level gradients are routed
back to embedding rows through the index provenance carried by each
:class:`~ddlab.pairing.SimilaritySet`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distribution import DEFAULT_BINS, MASS_FLOOR, SoftHistogram, estimate_histogram
from .pairing import PairSets, SimilaritySet
from .tensor import UNIT_TOL, ContractError


@dataclass(frozen=True)
class DDLWeights:
    lambda_pos: float = 0.1
    lambda_neg: float = 0.02
    lambda_order: float = 0.5
    scale: float = 64.0
    margin: float = 0.5

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0, got {v}")


def kl_divergence(P, Q):
    """``sum_r P_r log(P_r / Q_r)`` on floored masses.

    ``P`` and ``Q`` are :class:`SoftHistogram` objects or plain mass vectors.
    Returns ``(value, dKL/dP, dKL/dQ)``, derivatives taken w.r.t. the unfloored masses.
    """
    if isinstance(P, SoftHistogram) and isinstance(Q, SoftHistogram):
        if P.R != Q.R or not np.array_equal(P.nodes, Q.nodes):
            raise ValueError("histograms have different bins")
    p = getattr(P, "masses", P)
    q = getattr(Q, "masses", Q)
    p = np.asarray(p, dtype=np.float64) + MASS_FLOOR
    q = np.asarray(q, dtype=np.float64) + MASS_FLOOR
    if p.shape != q.shape:
        raise ValueError(f"bin count mismatch: {p.shape} vs {q.shape}")
    log_ratio = np.log(p / q)
    return float(np.sum(p * log_ratio)), log_ratio + 1.0, -p / q


@dataclass
class KLResult:
    value: float
    pos_terms: list
    neg_terms: list
    # (d/d positives, d/d negatives) per distribution, teacher first
    grads: list


def kl_loss(teacher: PairSets, students, weights: DDLWeights, R: int = DEFAULT_BINS, gamma=None) -> KLResult:
    """``sum_k lambda_pos KL(P+ || Q+_k) + lambda_neg KL(P- || Q-_k)``.

    Gradients reach both teacher and student similarities.
    """
    hp = estimate_histogram(teacher.positives.values, R, gamma)
    hn = estimate_histogram(teacher.negatives.values, R, gamma)
    g_tp = np.zeros(R)
    g_tn = np.zeros(R)
    value, pos_terms, neg_terms = 0.0, [], []
    grads = [None]
    for st in students:
        qp = estimate_histogram(st.positives.values, R, gamma)
        qn = estimate_histogram(st.negatives.values, R, gamma)
        kp, dP, dQ = kl_divergence(hp, qp)
        kn, dPn, dQn = kl_divergence(hn, qn)
        pos_terms.append(kp)
        neg_terms.append(kn)
        value += weights.lambda_pos * kp + weights.lambda_neg * kn
        g_tp += weights.lambda_pos * dP
        g_tn += weights.lambda_neg * dPn
        grads.append((qp.backward(weights.lambda_pos * dQ), qn.backward(weights.lambda_neg * dQn)))
    grads[0] = (hp.backward(g_tp), hn.backward(g_tn))
    return KLResult(value, pos_terms, neg_terms, grads)


def order_pairs(n_dist: int, include_within: bool = False):
    """Ordered (positive-set, negative-set) distribution index pairs.

    The default keeps only cross pairs ``i != j``; for one student this is the
    teacher-positive/student-negative and student-positive/teacher-negative pair.
    """
    return [(i, j) for i in range(n_dist) for j in range(n_dist) if include_within or i != j]


def order_loss(sets, lambda_order: float, include_within: bool = False):
    """``-lambda_order * sum_(i,j) (E[S+_i] - E[S-_j])``.

    Returns ``(value, grads)`` with ``grads[k] = (d/d positives_k, d/d negatives_k)``.
    """
    means_pos = []
    means_neg = []
    for ps in sets:
        if len(ps.positives) == 0 or len(ps.negatives) == 0:
            raise ValueError("order loss needs non-empty similarity sets")
        means_pos.append(ps.positives.values.mean())
        means_neg.append(ps.negatives.values.mean())
    coef_pos = np.zeros(len(sets))
    coef_neg = np.zeros(len(sets))
    value = 0.0
    for i, j in order_pairs(len(sets), include_within):
        value += means_pos[i] - means_neg[j]
        coef_pos[i] += 1.0
        coef_neg[j] += 1.0
    grads = []
    for k, ps in enumerate(sets):
        gp = np.full(len(ps.positives), -lambda_order * coef_pos[k] / len(ps.positives))
        gn = np.full(len(ps.negatives), lambda_order * coef_neg[k] / len(ps.negatives))
        grads.append((gp, gn))
    return -lambda_order * value, grads


def margin_softmax_loss(emb: np.ndarray, labels, head: np.ndarray, scale: float = 64.0, margin: float = 0.5):
    """Additive angular margin softmax, averaged over the batch.

    The target logit is ``scale * cos(theta_y + margin)``; past ``theta_y > pi - margin``
    it falls back to ``scale * (cos theta_y - margin * sin margin)`` as in the usual
    ArcFace implementation. Returns ``(loss, d/d emb, d/d head)``.
    """
    labels = np.asarray(labels)
    n, C = emb.shape[0], head.shape[1]
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ValueError("labels must be one class index in [0, n_classes) per row")
    cos = emb @ head
    if np.any(np.abs(cos) > 1.0 + UNIT_TOL):
        raise ContractError("cosine outside [-1, 1]; embeddings or head columns are not unit norm")
    cos = np.clip(cos, -1.0, 1.0)
    rows = np.arange(n)
    c = cos[rows, labels]

    cos_m, sin_m = math.cos(margin), math.sin(margin)
    th = math.cos(math.pi - margin)
    mm = math.sin(math.pi - margin) * margin
    sine = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    phi = c * cos_m - sine * sin_m
    dphi = cos_m + sin_m * c / np.maximum(sine, 1e-9)
    fallback = c <= th
    phi = np.where(fallback, c - mm, phi)
    dphi = np.where(fallback, 1.0, dphi)

    logits = scale * cos
    logits[rows, labels] = scale * phi
    zmax = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - zmax)
    denom = ex.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(denom[:, 0]) + zmax[:, 0] - logits[rows, labels]))

    dlogits = ex / denom
    dlogits[rows, labels] -= 1.0
    dcos = scale * dlogits / n
    dcos[rows, labels] *= dphi
    return loss, dcos @ head.T, emb.T @ dcos


def scatter_similarity_grad(grad_emb: np.ndarray, emb: np.ndarray, sims: SimilaritySet, g: np.ndarray) -> None:
    """Accumulate ``g_i * d<e_l, e_r>/d e`` into ``grad_emb`` in place."""
    np.add.at(grad_emb, sims.left, g[:, None] * emb[sims.right])
    np.add.at(grad_emb, sims.right, g[:, None] * emb[sims.left])


@dataclass
class LossReport:
    kl_pos: list
    kl_neg: list
    kl: float
    order: float
    margin_softmax: float
    total: float
    grad_embeddings: np.ndarray = field(repr=False)
    grad_head: np.ndarray = field(repr=False)

    def to_record(self) -> dict:
        return {
            "kl_pos": [float(x) for x in self.kl_pos],
            "kl_neg": [float(x) for x in self.kl_neg],
            "kl": float(self.kl),
            "order": float(self.order),
            "margin_softmax": float(self.margin_softmax),
            "total": float(self.total),
        }


def ddl_total(
    emb: np.ndarray,
    labels,
    pair_sets,
    head: np.ndarray,
    weights: DDLWeights,
    R: int = DEFAULT_BINS,
    gamma=None,
    include_within: bool = False,
) -> LossReport:
    """Full objective: KL + order + margin softmax over every batch row.

    ``pair_sets`` lists the teacher first, then the students.
    """
    teacher, students = pair_sets[0], list(pair_sets[1:])
    grad_emb = np.zeros_like(emb)
    kl_value, kl_pos, kl_neg = 0.0, [0.0] * len(students), [0.0] * len(students)
    if weights.lambda_pos > 0 or weights.lambda_neg > 0:
        res = kl_loss(teacher, students, weights, R, gamma)
        kl_value, kl_pos, kl_neg = res.value, res.pos_terms, res.neg_terms
        for ps, (gp, gn) in zip(pair_sets, res.grads):
            scatter_similarity_grad(grad_emb, emb, ps.positives, gp)
            scatter_similarity_grad(grad_emb, emb, ps.negatives, gn)
    order_value = 0.0
    if weights.lambda_order > 0:
        order_value, grads = order_loss(pair_sets, weights.lambda_order, include_within)
        for ps, (gp, gn) in zip(pair_sets, grads):
            scatter_similarity_grad(grad_emb, emb, ps.positives, gp)
            scatter_similarity_grad(grad_emb, emb, ps.negatives, gn)
    margin_value, g_emb_m, g_head = margin_softmax_loss(emb, labels, head, weights.scale, weights.margin)
    grad_emb += g_emb_m
    total = kl_value + order_value + margin_value
    return LossReport(kl_pos, kl_neg, kl_value, order_value, margin_value, total, grad_emb, g_head)
