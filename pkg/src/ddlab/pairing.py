"""Mini-batch assembly and positive/negative similarity sets.

A mini-batch holds one teacher block (easy domain) followed by K student
blocks (hard domains). Each block is laid out as ``b`` positive pairs
(rows ``2i, 2i+1``) followed by ``b`` singles of pairwise distinct identities,
so a block has ``3b`` rows and the batch ``3b(K+1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synth import EASY, Dataset, hard_domain


class DegenerateDistributionError(ValueError):
    """A similarity set came out empty (e.g. every positive pair was filtered)."""


@dataclass
class DomainPool:
    name: str
    features: np.ndarray
    identities: np.ndarray

    def __post_init__(self):
        order = np.argsort(self.identities, kind="stable")
        ids, starts = np.unique(self.identities[order], return_index=True)
        ends = np.append(starts[1:], len(order))
        self.by_identity = {int(i): order[s:e] for i, s, e in zip(ids, starts, ends)}

    def __len__(self) -> int:
        return len(self.identities)


def pools_from_dataset(dataset: Dataset, mixture: bool = False) -> dict[str, DomainPool]:
    """One pool per domain. With ``mixture`` all hard domains merge into ``hard-mix``."""
    pools = {}
    for dom in dataset.domain_names:
        mask = dataset.domains == dom
        pools[dom] = DomainPool(dom, dataset.features[mask], dataset.identities[mask])
    if mixture:
        mask = dataset.domains != EASY
        pools = {EASY: pools[EASY], "hard-mix": DomainPool("hard-mix", dataset.features[mask], dataset.identities[mask])}
    return pools


def build_positive_pairs(pool: DomainPool, b: int, seed) -> np.ndarray:
    """Draw ``b`` same-identity pairs of distinct pool rows, shape ``(b, 2)``.

    Identities are drawn without replacement when enough of them have at
    least two samples, otherwise with replacement.
    """
    rng = np.random.default_rng(seed)
    eligible = [i for i, rows in pool.by_identity.items() if len(rows) >= 2]
    if not eligible:
        raise ValueError(f"pool {pool.name!r}: no identity has two or more samples")
    chosen = rng.choice(eligible, size=b, replace=len(eligible) < b)
    pairs = np.empty((b, 2), dtype=np.int64)
    for k, ident in enumerate(chosen):
        pairs[k] = rng.choice(pool.by_identity[int(ident)], size=2, replace=False)
    return pairs


def draw_singles(pool: DomainPool, b: int, rng) -> np.ndarray:
    if len(pool.by_identity) < b:
        raise ValueError(f"pool {pool.name!r}: need {b} distinct identities, have {len(pool.by_identity)}")
    ids = rng.choice(sorted(pool.by_identity), size=b, replace=False)
    return np.array([rng.choice(pool.by_identity[int(i)]) for i in ids], dtype=np.int64)


@dataclass
class DistributionBlock:
    domain: str
    pairs: np.ndarray  # (b, 2) rows into the domain pool
    singles: np.ndarray  # (b,) rows into the domain pool


@dataclass
class MiniBatch:
    blocks: list
    features: np.ndarray
    identities: np.ndarray
    b: int

    @property
    def K(self) -> int:
        return len(self.blocks) - 1

    def __len__(self) -> int:
        return len(self.identities)

    def pair_rows(self, k: int) -> np.ndarray:
        """Batch rows of block ``k``'s positive pairs, shape ``(b, 2)``."""
        start = 3 * self.b * k
        return start + np.arange(2 * self.b).reshape(self.b, 2)

    def single_rows(self, k: int) -> np.ndarray:
        start = 3 * self.b * k + 2 * self.b
        return start + np.arange(self.b)


def build_minibatch(pools, b: int, K: int, seed, domains=None) -> MiniBatch:
    """Assemble a teacher block plus ``K`` student blocks.

    ``domains`` defaults to ``["easy", "hard-1", ..., "hard-K"]``.
    """
    if b < 2:
        raise ValueError("b must be at least 2")
    if domains is None:
        domains = [EASY] + [hard_domain(k + 1) for k in range(K)]
    if len(domains) != K + 1:
        raise ValueError(f"expected {K + 1} domains, got {len(domains)}")
    rng = np.random.default_rng(seed)
    blocks, feats, ids = [], [], []
    for dom in domains:
        pool = pools[dom]
        pairs = build_positive_pairs(pool, b, rng)
        singles = draw_singles(pool, b, rng)
        blocks.append(DistributionBlock(dom, pairs, singles))
        rows = np.concatenate([pairs.reshape(-1), singles])
        feats.append(pool.features[rows])
        ids.append(pool.identities[rows])
    return MiniBatch(blocks, np.concatenate(feats), np.concatenate(ids), b)


@dataclass
class SimilaritySet:
    """Similarity values with the embedding rows each value came from."""

    values: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class PairSets:
    positives: SimilaritySet
    negatives: SimilaritySet
    domain: str = ""


def _dots(emb, left, right):
    return np.clip(np.einsum("ij,ij->i", emb[left], emb[right]), -1.0, 1.0)


def positive_similarities(emb: np.ndarray, pair_rows: np.ndarray) -> SimilaritySet:
    """Cosine similarity of each pair, dropping pairs below zero as outliers."""
    pair_rows = np.asarray(pair_rows)
    s = _dots(emb, pair_rows[:, 0], pair_rows[:, 1])
    keep = s >= 0
    if not keep.any():
        raise DegenerateDistributionError("every positive pair has negative similarity")
    return SimilaritySet(s[keep], pair_rows[keep, 0], pair_rows[keep, 1])


def _single_sims(emb, rows):
    rows = np.asarray(rows)
    if len(rows) < 2:
        raise ValueError("negative mining needs at least two singles")
    e = emb[rows]
    return rows, np.clip(e @ e.T, -1.0, 1.0)


def hard_negative_similarities(emb: np.ndarray, single_rows: np.ndarray) -> SimilaritySet:
    """For every single keep its most similar other single (ties: lowest index)."""
    rows, sim = _single_sims(emb, single_rows)
    np.fill_diagonal(sim, -np.inf)
    j = np.argmax(sim, axis=1)
    i = np.arange(len(rows))
    return SimilaritySet(sim[i, j], rows[i], rows[j])


def random_negative_similarities(emb: np.ndarray, single_rows: np.ndarray, seed) -> SimilaritySet:
    rows, sim = _single_sims(emb, single_rows)
    n = len(rows)
    rng = np.random.default_rng(seed)
    offset = rng.integers(1, n, size=n)
    i = np.arange(n)
    j = (i + offset) % n
    return SimilaritySet(sim[i, j], rows[i], rows[j])


def compute_pair_sets(emb: np.ndarray, batch: MiniBatch, mining: str = "hard", seed=None) -> list[PairSets]:
    """Positive and negative similarity sets for every block of ``batch``.

    Negatives are mined within each block only.
    """
    if mining not in ("hard", "random"):
        raise ValueError(f"unknown mining strategy {mining!r}")
    rng = np.random.default_rng(seed) if mining == "random" else None
    out = []
    for k, block in enumerate(batch.blocks):
        pos = positive_similarities(emb, batch.pair_rows(k))
        if mining == "hard":
            neg = hard_negative_similarities(emb, batch.single_rows(k))
        else:
            neg = random_negative_similarities(emb, batch.single_rows(k), rng)
        out.append(PairSets(pos, neg, block.domain))
    return out
