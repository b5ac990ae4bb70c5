"""Synthetic identity data with one easy domain and K degraded hard domains.

Easy samples are noisy copies of an identity prototype. A hard-k sample is a
noisier copy pushed through a fixed rank-r(k) orthogonal projection, which
mimics an acquisition condition that destroys part of the identity signal.

Randomness comes from numpy's PCG64 bit generator (``numpy.random.default_rng``)
with standard-normal draws from its ziggurat sampler. Four independent streams
(prototypes, projection basis, easy noise, hard noise) are spawned from one
``SeedSequence(master_seed)``. Hard domains share the basis and the noise draw:
domain k keeps the leading r(k) basis directions and scales the noise by
sigma(k). Two domains of equal rank then differ only in noise scale, so the
noisier one has the lower mean intra-identity cosine.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .tensor import format_float, l2_normalize

EASY = "easy"


def hard_domain(k: int) -> str:
    return f"hard-{k}"


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 200
    samples_per_identity: int = 6
    dim: int = 32
    easy_sigma: float = 0.05
    hard_sigmas: tuple = (0.1, 0.15)
    hard_ranks: tuple = (16, 12)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hard_sigmas", tuple(float(s) for s in self.hard_sigmas))
        object.__setattr__(self, "hard_ranks", tuple(int(r) for r in self.hard_ranks))

    @property
    def n_hard(self) -> int:
        return len(self.hard_sigmas)

    @property
    def domains(self) -> list[str]:
        return [EASY] + [hard_domain(k + 1) for k in range(self.n_hard)]

    def validate(self) -> None:
        if self.n_identities < 1 or self.samples_per_identity < 1 or self.dim < 2:
            raise ValueError("identity count, samples per identity and dim must be positive")
        if self.n_hard < 1:
            raise ValueError("at least one hard domain is required")
        if len(self.hard_ranks) != self.n_hard:
            raise ValueError("hard_sigmas and hard_ranks must have the same length")
        if self.easy_sigma < 0:
            raise ValueError("easy_sigma must be >= 0")
        if not self.easy_sigma < min(self.hard_sigmas):
            raise ValueError("easy_sigma must be smaller than every hard sigma")
        for r in self.hard_ranks:
            if not 0 < r < self.dim:
                raise ValueError(f"hard rank {r} must lie in (0, {self.dim})")


class LabeledSample(NamedTuple):
    features: np.ndarray
    identity: int
    domain: str


@dataclass
class Dataset:
    """Column-oriented sample table."""

    features: np.ndarray
    identities: np.ndarray
    domains: np.ndarray
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.identities)

    def __getitem__(self, i) -> LabeledSample:
        return LabeledSample(self.features[i], int(self.identities[i]), str(self.domains[i]))

    @property
    def domain_names(self) -> list[str]:
        names = set(self.domains.tolist())
        hard = sorted((d for d in names if d != EASY), key=lambda d: (len(d), d))
        return ([EASY] if EASY in names else []) + hard

    def subset(self, mask) -> "Dataset":
        return Dataset(self.features[mask], self.identities[mask], self.domains[mask], self.config)


def _basis(rng, dim):
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q


def generate(config: SynthConfig):
    """Return ``(prototypes, dataset)`` for ``config``.

    Records are ordered domain-major, then identity, then sample index.
    """
    config.validate()
    ss = np.random.SeedSequence(config.seed)
    proto_ss, proj_ss, easy_ss, hard_ss = ss.spawn(4)

    protos = l2_normalize(np.random.default_rng(proto_ss).standard_normal((config.n_identities, config.dim)))
    # hard domains project onto nested leading subspaces of one random basis
    basis = _basis(np.random.default_rng(proj_ss), config.dim)
    projections = [basis[:, :r] @ basis[:, :r].T for r in config.hard_ranks]

    n, m = config.n_identities, config.samples_per_identity
    ids = np.repeat(np.arange(n), m)
    base = protos[ids]

    noise = np.random.default_rng(easy_ss).standard_normal((n * m, config.dim))
    blocks = [l2_normalize(base + config.easy_sigma * noise)]
    # one noise draw shared by every hard domain, so severity differs only by sigma and rank
    noise = np.random.default_rng(hard_ss).standard_normal((n * m, config.dim))
    for sigma, proj in zip(config.hard_sigmas, projections):
        blocks.append(l2_normalize((base + sigma * noise) @ proj))

    features = np.concatenate(blocks)
    identities = np.tile(ids, len(blocks))
    domains = np.repeat(np.array(config.domains), n * m)
    return protos, Dataset(features, identities, domains, asdict(config))


def split_train_eval(dataset: Dataset, fraction: float, seed):
    """Split by identity so no identity lands in both halves."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    ids = np.unique(dataset.identities)
    n_train = int(round(fraction * len(ids)))
    if len(ids) < 2 or n_train < 1 or n_train >= len(ids):
        raise ValueError(f"cannot split {len(ids)} identities with fraction {fraction}")
    perm = np.random.default_rng(seed).permutation(ids)
    train_mask = np.isin(dataset.identities, perm[:n_train])
    return dataset.subset(train_mask), dataset.subset(~train_mask)


# -- dataset files ------------------------------------------------------------
#
# <name>.csv          header "identity,domain,f0,...,f{d-1}", one sample per row,
#                     floats printed with 17 significant digits
# <name>.config.json  the generating config, echoed for provenance


def config_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".config.json")


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    d = dataset.features.shape[1]
    lines = [",".join(["identity", "domain"] + [f"f{j}" for j in range(d)])]
    for x, i, dom in zip(dataset.features, dataset.identities, dataset.domains):
        lines.append(",".join([str(int(i)), str(dom)] + [format_float(v) for v in x]))
    path.write_text("\n".join(lines) + "\n")
    config_sidecar(path).write_text(json.dumps(dataset.config, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    rows = path.read_text().splitlines()
    header = rows[0].split(",")
    if header[:2] != ["identity", "domain"]:
        raise ValueError(f"{path}: unexpected header {header[:2]}")
    ids, doms, feats = [], [], []
    for row in rows[1:]:
        if not row:
            continue
        parts = row.split(",")
        ids.append(int(parts[0]))
        doms.append(parts[1])
        feats.append([float(v) for v in parts[2:]])
    sidecar = config_sidecar(path)
    config = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Dataset(np.array(feats, dtype=np.float64), np.array(ids), np.array(doms), config)
