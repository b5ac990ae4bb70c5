"""Dense numerical substrate: unit normalization, a small feed-forward encoder
with hand-written backpropagation, SGD with momentum, and checkpoint I/O.

Everything runs in float64 on plain numpy arrays.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NORM_EPS = 1e-12
UNIT_TOL = 1e-6
CHECKPOINT_MAGIC = "# ddlab-checkpoint v1"


class DegenerateVectorError(ValueError):
    """Raised when a vector is too close to zero to normalize."""


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


class StaleCacheError(RuntimeError):
    """Raised when a backward pass receives a cache from a different forward pass."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN or Inf."""


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit L2 norm along its last axis.

    Works for a single vector or for a matrix of row vectors.
    """
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateVectorError(f"cannot normalize vector with norm <= {NORM_EPS}")
    return v / norms


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    for name, x in (("u", u), ("v", v)):
        n = np.linalg.norm(x)
        if abs(n - 1.0) > UNIT_TOL:
            raise ContractError(f"{name} is not unit norm (|{name}| = {n:.9g})")
    return float(np.clip(u @ v, -1.0, 1.0))


# -- activations --------------------------------------------------------------
# Each entry maps name -> (f(z), f'(z) expressed through (z, f(z))).

ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z, a: 0.5 * (1.0 + np.tanh(0.5 * z))),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


@dataclass
class EncoderNet:
    """Affine stack with a smooth nonlinearity between layers, followed by
    row-wise unit normalization, plus an angular-margin classification head.

    Parameters live in ``params`` under the keys ``W0, b0, ..., W{L-1}, b{L-1}``
    and ``head``. ``W_l`` has shape ``(fan_in, fan_out)`` and ``head`` has shape
    ``(embed_dim, n_classes)`` with unit-norm columns.
    """

    params: dict[str, np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        n = self.n_layers
        if n < 1:
            raise ValueError("encoder needs at least one affine layer")
        for l in range(n):
            W, b = self.params[f"W{l}"], self.params[f"b{l}"]
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {l}: bad shapes W{W.shape} b{b.shape}")
            if l > 0 and self.params[f"W{l - 1}"].shape[1] != W.shape[0]:
                raise ValueError(f"layer {l} does not chain with layer {l - 1}")
        head = self.params.get("head")
        if head is not None and head.shape[0] != self.embed_dim:
            raise ValueError(f"head rows {head.shape[0]} != embed dim {self.embed_dim}")

    @classmethod
    def init(cls, sizes, n_classes: int, seed, activation: str = "tanh") -> "EncoderNet":
        """Random initialization with ``1/sqrt(fan_in)`` scaled Gaussian weights.

        Args:
            sizes: layer widths ``[input_dim, hidden..., embed_dim]``.
            n_classes: number of identity classes in the head.
            seed: anything ``numpy.random.default_rng`` accepts.
        """
        if len(sizes) < 2:
            raise ValueError("sizes must list at least input and embedding dims")
        rng = np.random.default_rng(seed)
        params = {}
        for l, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"W{l}"] = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            params[f"b{l}"] = np.zeros(fan_out)
        head = rng.standard_normal((sizes[-1], n_classes))
        params["head"] = head / np.linalg.norm(head, axis=0, keepdims=True)
        return cls(params, activation)

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.params if k.startswith("W"))

    @property
    def input_dim(self) -> int:
        return self.params["W0"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.params[f"W{self.n_layers - 1}"].shape[1]

    @property
    def head(self) -> np.ndarray:
        return self.params["head"]

    def copy(self) -> "EncoderNet":
        return EncoderNet({k: v.copy() for k, v in self.params.items()}, self.activation)

    def fingerprint(self) -> str:
        return _fingerprint(self.params[k] for k in sorted(self.params))


def _fingerprint(arrays) -> str:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class ForwardCache:
    inputs: list  # input to each affine layer
    pre: list  # pre-activation output of each affine layer
    norms: np.ndarray  # row norms of the final pre-normalization output
    embeddings: np.ndarray
    fingerprint: str = field(repr=False)


def encoder_forward(net: EncoderNet, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Embed each row of ``batch`` onto the unit sphere.

    Returns the ``(n, embed_dim)`` embeddings and the cache needed by
    :func:`encoder_backward`.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"batch shape {x.shape} does not match input dim {net.input_dim}")
    act, _ = ACTIVATIONS[net.activation]
    inputs, pre = [], []
    a = x
    L = net.n_layers
    for l in range(L):
        inputs.append(a)
        z = a @ net.params[f"W{l}"] + net.params[f"b{l}"]
        pre.append(z)
        a = act(z) if l < L - 1 else z
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateVectorError("encoder produced a zero embedding")
    emb = a / norms
    if not np.all(np.isfinite(emb)):
        raise FloatingPointError("encoder produced non-finite embeddings")
    fp = _fingerprint([x] + [net.params[k] for k in sorted(net.params) if k != "head"])
    return emb, ForwardCache(inputs, pre, norms, emb, fp)


def encoder_backward(net: EncoderNet, cache: ForwardCache, grad_embeddings: np.ndarray) -> dict:
    """Backpropagate ``dLoss/dEmbeddings`` to the affine parameters.

    The unit-normalization Jacobian ``(I - e e^T) / |z|`` is applied per row.
    The returned dict has ``W*``/``b*`` keys only; head gradients come from the loss.
    """
    fp = _fingerprint([cache.inputs[0]] + [net.params[k] for k in sorted(net.params) if k != "head"])
    if fp != cache.fingerprint:
        raise StaleCacheError("cache was produced by a different batch or parameter set")
    g = np.asarray(grad_embeddings, dtype=np.float64)
    e = cache.embeddings
    if g.shape != e.shape:
        raise ValueError(f"gradient shape {g.shape} != embedding shape {e.shape}")
    _, dact = ACTIVATIONS[net.activation]

    gz = (g - e * np.sum(e * g, axis=1, keepdims=True)) / cache.norms
    grads = {}
    for l in range(net.n_layers - 1, -1, -1):
        grads[f"W{l}"] = cache.inputs[l].T @ gz
        grads[f"b{l}"] = gz.sum(axis=0)
        if l > 0:
            z_prev = cache.pre[l - 1]
            ga = gz @ net.params[f"W{l}"].T
            gz = ga * dact(z_prev, cache.inputs[l])
    return grads


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")


def sgd_step(params: dict, grads: dict, state: OptimizerState, unit_columns=("head",)):
    """One SGD-with-momentum step.

    ``buf <- mu * buf + (grad + wd * param)``; ``param <- param - lr * buf``.
    Parameters named in ``unit_columns`` get their columns re-normalized afterwards.
    Missing gradients count as zero. Returns ``(new_params, new_state)``;
    the inputs are left untouched.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(
            f"non-finite gradient at iteration {state.iteration} in {sorted(bad)}"
        )
    new_params, new_bufs = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
        buf = state.momentum * buf + (g + state.weight_decay * p)
        p = p - state.lr * buf
        if name in unit_columns:
            p = p / np.linalg.norm(p, axis=0, keepdims=True)
        new_params[name] = p
        new_bufs[name] = buf
    new_state = OptimizerState(
        state.lr, state.momentum, state.weight_decay, new_bufs, state.iteration + 1
    )
    return new_params, new_state


# -- checkpoint format --------------------------------------------------------
#
#   # ddlab-checkpoint v1
#   activation tanh
#   tensor <name> <rows> <cols>
#   <rows lines of <cols> space-separated floats, %.17g>
#   ...
#
# Vectors are stored as 1 x n tensors and restored as 1-d arrays when the
# header says ``vector``; names are sorted so the file is byte-stable.


def format_float(x: float) -> str:
    return "%.17g" % x


def save_checkpoint(net: EncoderNet, path) -> None:
    """Write ``net`` atomically (temp file + rename) in the text checkpoint format."""
    path = Path(path)
    lines = [CHECKPOINT_MAGIC, f"activation {net.activation}"]
    for name in sorted(net.params):
        a = net.params[name]
        kind = "vector" if a.ndim == 1 else "tensor"
        m = a.reshape(1, -1) if a.ndim == 1 else a
        lines.append(f"{kind} {name} {m.shape[0]} {m.shape[1]}")
        lines.extend(" ".join(format_float(x) for x in row) for row in m)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> EncoderNet:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a ddlab checkpoint")
    key, activation = lines[1].split()
    if key != "activation":
        raise ValueError(f"{path}: missing activation header")
    params = {}
    i = 2
    while i < len(lines):
        kind, name, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        data = np.array(
            [[float(x) for x in lines[i + 1 + r].split()] for r in range(rows)], dtype=np.float64
        ).reshape(rows, cols)
        params[name] = data.reshape(-1) if kind == "vector" else data
        i += 1 + rows
    return EncoderNet(params, activation)
