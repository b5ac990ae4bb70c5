"""Evaluation statistics: expectation margin, histogram intersection,
threshold verification, TAR@FAR and rank-1 identification."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .distribution import SoftHistogram, expectation
from .tensor import format_float

DEFAULT_FAR_GRID = (1e-3, 1e-2, 1e-1)


def expectation_margin(pos, neg) -> float:
    return expectation(pos) - expectation(neg)


def histogram_intersection(h_pos, h_neg) -> float:
    """``sum_r min(h+_r, h-_r)``; accepts histograms or mass vectors."""
    if isinstance(h_pos, SoftHistogram) and isinstance(h_neg, SoftHistogram):
        if not np.array_equal(h_pos.nodes, h_neg.nodes):
            raise ValueError("histograms have different bins")
    a = np.asarray(getattr(h_pos, "masses", h_pos), dtype=np.float64)
    b = np.asarray(getattr(h_neg, "masses", h_neg), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"bin count mismatch: {a.shape} vs {b.shape}")
    return float(np.minimum(a, b).sum())


def best_threshold_accuracy(genuine, impostor):
    """Accuracy of the rule ``score >= t -> genuine`` at its best threshold.

    Candidate thresholds are the observed scores plus +inf; among equally
    good thresholds the lowest wins. Returns ``(accuracy, threshold)``.
    """
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    cand = np.unique(np.concatenate([g, i, [np.inf]]))
    tp = len(g) - np.searchsorted(g, cand, side="left")
    tn = np.searchsorted(i, cand, side="left")
    correct = tp + tn
    k = int(np.argmax(correct))  # first max = lowest threshold
    return correct[k] / (len(g) + len(i)), float(cand[k])


def tar_at_far(genuine, impostor, far_grid=DEFAULT_FAR_GRID) -> list[float]:
    """True-accept rate at thresholds taken from impostor score quantiles
    (linear interpolation)."""
    g = np.asarray(genuine, dtype=np.float64)
    i = np.asarray(impostor, dtype=np.float64)
    out = []
    for far in far_grid:
        thr = np.quantile(i, 1.0 - far)
        out.append(float(np.mean(g > thr)))
    return out


def verification_metrics(genuine, impostor, far_grid=DEFAULT_FAR_GRID):
    if len(genuine) == 0 or len(impostor) == 0:
        raise ValueError("verification needs non-empty genuine and impostor lists")
    acc, _ = best_threshold_accuracy(genuine, impostor)
    return float(acc), tar_at_far(genuine, impostor, far_grid)


def rank1_identification(gallery_emb, gallery_ids, probe_emb, probe_ids) -> float:
    """Fraction of probes whose most similar gallery entry has their identity."""
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    if len(gallery_ids) == 0 or len(probe_ids) == 0:
        raise ValueError("empty gallery or probe set")
    if len(np.unique(gallery_ids)) != len(gallery_ids):
        raise ValueError("gallery identities must be unique")
    sims = np.asarray(probe_emb) @ np.asarray(gallery_emb).T
    nearest = np.argmax(sims, axis=1)
    return float(np.mean(gallery_ids[nearest] == probe_ids))


@dataclass
class DomainEval:
    margin: float
    intersection: float
    accuracy: float
    tar: list
    rank1: float
    mean_pos: float = 0.0
    mean_neg: float = 0.0


@dataclass
class EvalReport:
    domains: dict = field(default_factory=dict)  # name -> DomainEval
    far_grid: tuple = DEFAULT_FAR_GRID

    def to_dict(self) -> dict:
        return {"far_grid": list(self.far_grid), "domains": {k: asdict(v) for k, v in self.domains.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls({k: DomainEval(**v) for k, v in d["domains"].items()}, tuple(d["far_grid"]))

    def csv_header(self) -> list[str]:
        cols = []
        for name in self.domains:
            cols += [f"{name}_margin", f"{name}_intersection", f"{name}_accuracy"]
            cols += [f"{name}_tar@{far:g}" for far in self.far_grid]
            cols += [f"{name}_rank1"]
        return cols

    def csv_values(self) -> list[str]:
        vals = []
        for d in self.domains.values():
            vals += [format_float(d.margin), format_float(d.intersection), format_float(d.accuracy)]
            vals += [format_float(t) for t in d.tar]
            vals += [format_float(d.rank1)]
        return vals
