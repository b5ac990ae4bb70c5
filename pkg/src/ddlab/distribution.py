"""Soft histograms of similarity values on [-1, 1].

Each sample spreads a Gaussian kernel ``exp(-gamma (s - t_r)^2)`` over the
nodes ``t_r``; the per-node averages are then rescaled to sum to one so they
can be fed to a KL divergence. Kernel values are kept on the histogram for
the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import format_float

DEFAULT_BINS = 100
MASS_FLOOR = 1e-10


def histogram_nodes(R: int) -> np.ndarray:
    if R < 2:
        raise ValueError(f"need at least 2 bins, got {R}")
    return -1.0 + np.arange(R) * (2.0 / (R - 1))


def default_gamma(R: int) -> float:
    """Kernel sharpness whose standard deviation equals one bin step."""
    step = 2.0 / (R - 1)
    return 1.0 / (2.0 * step * step)


@dataclass
class SoftHistogram:
    nodes: np.ndarray
    masses: np.ndarray  # normalized, sums to 1
    raw: np.ndarray  # unnormalized per-node kernel averages
    gamma: float
    samples: np.ndarray
    kernel: np.ndarray  # (|S|, R) kernel weights
    scaled: np.ndarray  # kernel rescaled so its largest entry is 1; feeds the ratios

    @property
    def R(self) -> int:
        return len(self.nodes)

    def raw_jacobian(self) -> np.ndarray:
        """``d raw_r / d s_i`` as an ``(R, |S|)`` matrix."""
        diff = self.samples[:, None] - self.nodes[None, :]
        return (-2.0 * self.gamma * self.kernel * diff / len(self.samples)).T

    def jacobian(self) -> np.ndarray:
        """``d masses_r / d s_i`` as an ``(R, |S|)`` matrix (quotient rule)."""
        diff = self.samples[:, None] - self.nodes[None, :]
        draw = (-2.0 * self.gamma * self.scaled * diff / len(self.samples)).T
        total = self.scaled.mean(axis=0).sum()
        return (draw - self.masses[:, None] * draw.sum(axis=0, keepdims=True)) / total

    def backward(self, grad_masses: np.ndarray) -> np.ndarray:
        """Pull ``dL/d masses`` back to ``dL/d samples`` without forming the Jacobian."""
        g = np.asarray(grad_masses, dtype=np.float64)
        total = self.scaled.mean(axis=0).sum()
        # d masses / d raw applied to g, then raw -> samples
        g_raw = (g - g @ self.masses) / total
        diff = self.samples[:, None] - self.nodes[None, :]
        return (-2.0 * self.gamma / len(self.samples)) * np.sum(self.scaled * diff * g_raw, axis=1)


def estimate_histogram(similarities, R: int = DEFAULT_BINS, gamma: float | None = None) -> SoftHistogram:
    s = np.asarray(similarities, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("cannot estimate a histogram from an empty set")
    if np.any(np.abs(s) > 1.0):
        raise ValueError("similarities must lie in [-1, 1]")
    if gamma is None:
        gamma = default_gamma(R)
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    t = histogram_nodes(R)
    log_k = -gamma * (s[:, None] - t[None, :]) ** 2
    kernel = np.exp(log_k)
    # masses and their gradients are ratios, so a common shift of the log kernel
    # cancels; it keeps them finite when every raw mass underflows
    scaled = np.exp(log_k - log_k.max())
    raw_scaled = scaled.mean(axis=0)
    masses = raw_scaled / raw_scaled.sum()
    return SoftHistogram(t, masses, kernel.mean(axis=0), float(gamma), s, kernel, scaled)


def histogram_gradient(hist: SoftHistogram, similarities=None) -> np.ndarray:
    """Jacobian of the normalized masses w.r.t. the samples, ``(R, |S|)``.

    ``similarities``, when given, must match the samples ``hist`` was built from.
    """
    if similarities is not None:
        s = np.asarray(similarities, dtype=np.float64).reshape(-1)
        if s.shape != hist.samples.shape or not np.array_equal(s, hist.samples):
            raise ValueError("similarities do not match the cached histogram")
    return hist.jacobian()


def expectation(similarities) -> float:
    s = np.asarray(similarities, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("expectation of an empty set")
    return float(s.mean())


def write_histogram_csv(hist: SoftHistogram, path) -> None:
    rows = ["node,mass"] + [f"{format_float(t)},{format_float(m)}" for t, m in zip(hist.nodes, hist.masses)]
    Path(path).write_text("\n".join(rows) + "\n")
