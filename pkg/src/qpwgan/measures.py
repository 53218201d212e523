"""Points, discrete measures, l^q ground metrics and toy data samplers.

Points are plain 1-D float arrays and point sets are ``(k, n)`` arrays. The
transport cost between two points is ``d_q(x, y) ** p / p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from qpwgan.rng import SeededRng

WEIGHT_TOL = 1e-12


def as_point(x) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"a point must be a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point coordinates must be finite")
    return arr


def as_points(xs) -> np.ndarray:
    """Coerce a list of points (or a 1-D list of reals) to a ``(k, n)`` array."""
    arr = np.asarray(xs, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected a list of points, got array of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point coordinates must be finite")
    return arr


@dataclass(frozen=True)
class CostSpec:
    """Ground metric exponent ``q`` and transport exponent ``p``."""

    q: float = 2.0
    p: float = 1.0

    def __post_init__(self):
        if not (self.q >= 1.0 and np.isfinite(self.q)):
            raise ValueError(f"q must be >= 1, got {self.q}")
        if not (self.p >= 1.0 and np.isfinite(self.p)):
            raise ValueError(f"p must be >= 1, got {self.p}")


@dataclass
class DiscreteMeasure:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.atoms = as_points(self.atoms)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.atoms) != len(self.weights):
            raise ValueError(
                f"{len(self.atoms)} atoms but {len(self.weights)} weights"
            )
        if len(self.weights) == 0:
            raise ValueError("a measure needs at least one atom")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and non-negative")
        if abs(self.weights.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {self.weights.sum()!r}, not 1")

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def merged(self) -> dict[tuple[float, ...], float]:
        """Total mass per distinct atom (exact coordinate equality)."""
        out: dict[tuple[float, ...], float] = {}
        for a, w in zip(self.atoms, self.weights):
            key = tuple(float(c) for c in a)
            out[key] = out.get(key, 0.0) + float(w)
        return out


def lq_distance(x, y, q: float) -> float:
    x, y = as_point(x), as_point(y)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    diff = np.abs(x - y)
    if q == 1:
        return float(diff.sum())
    if q == 2:
        return float(np.sqrt(np.dot(diff, diff)))
    if np.isinf(q):
        return float(diff.max())
    return float(np.sum(diff**q) ** (1.0 / q))


def cost(x, y, spec: CostSpec) -> float:
    return lq_distance(x, y, spec.q) ** spec.p / spec.p


def distance_matrix(xs, ys, q: float) -> np.ndarray:
    xs, ys = as_points(xs), as_points(ys)
    if xs.shape[1] != ys.shape[1]:
        raise ValueError(f"dimension mismatch: {xs.shape[1]} vs {ys.shape[1]}")
    diff = np.abs(xs[:, None, :] - ys[None, :, :])
    if q == 1:
        return diff.sum(axis=-1)
    if q == 2:
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return np.sum(diff**q, axis=-1) ** (1.0 / q)


def cost_matrix(xs, ys, spec: CostSpec) -> np.ndarray:
    """``C[i, j] = cost(xs[i], ys[j], spec)``."""
    d = distance_matrix(xs, ys, spec.q)
    if spec.p == 1:
        return d
    return d**spec.p / spec.p


def cost_grad_x(x, y, spec: CostSpec) -> np.ndarray:
    """Gradient of ``cost(x, y)`` in ``x``, batched over leading axes.

    Uses the subgradient 0 wherever ``x == y`` coordinate-wise or as points.
    """
    u = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    a = np.abs(u)
    q, p = spec.q, spec.p
    d = np.sum(a**q, axis=-1, keepdims=True) ** (1.0 / q)
    with np.errstate(divide="ignore", invalid="ignore"):
        # d/du of d^p/p = d^(p-q) * sign(u) * |u|^(q-1)
        inner = np.sign(u) * (a ** (q - 1.0) if q != 1 else np.ones_like(a))
        g = np.where(d > 0, d ** (p - q), 0.0) * inner
    return np.where(np.isfinite(g), g, 0.0)


def empirical_measure(points: Sequence) -> DiscreteMeasure:
    pts = as_points(points) if len(points) else np.empty((0, 1))
    if len(pts) == 0:
        raise ValueError("empirical measure of an empty point list")
    m = len(pts)
    return DiscreteMeasure(pts, np.full(m, 1.0 / m))


def data_scale(points) -> float:
    """Largest side of the bounding box of ``points``; 1.0 for a single location."""
    pts = as_points(points)
    side = float(np.max(pts.max(axis=0) - pts.min(axis=0))) if len(pts) else 0.0
    return side if side > 0 else 1.0


@dataclass
class GmmComponent:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = as_point(self.mean)
        n = len(self.mean)
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(n)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (n, n):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dim {n}")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive definite")
        if int(self.count) != self.count or self.count <= 0:
            raise ValueError(f"component count must be a positive integer, got {self.count}")
        self.cov = cov
        self.count = int(self.count)


@dataclass
class GmmSpec:
    components: list[GmmComponent] = field(default_factory=list)

    def __post_init__(self):
        if not self.components:
            raise ValueError("a GMM needs at least one component")
        dims = {len(c.mean) for c in self.components}
        if len(dims) != 1:
            raise ValueError("all components must share the same dimension")

    @property
    def dim(self) -> int:
        return len(self.components[0].mean)

    @property
    def total(self) -> int:
        return sum(c.count for c in self.components)

    @classmethod
    def from_dict(cls, data: dict) -> "GmmSpec":
        return cls([GmmComponent(c["mean"], c["cov"], c["count"]) for c in data["components"]])

    def to_dict(self) -> dict:
        return {
            "components": [
                {"mean": c.mean.tolist(), "cov": c.cov.tolist(), "count": c.count}
                for c in self.components
            ]
        }


# Three clusters of sizes 60, 30 and 50 in the plane.
DEFAULT_GMM = {
    "components": [
        {"mean": [-2.0, 0.0], "cov": [[0.15, 0.05], [0.05, 0.15]], "count": 60},
        {"mean": [2.0, 0.0], "cov": [0.1, 0.1], "count": 30},
        {"mean": [0.0, 2.5], "cov": [0.2, 0.1], "count": 50},
    ]
}


def sample_gmm(spec: GmmSpec, rng: SeededRng) -> np.ndarray:
    """Draw exactly ``count`` points from each component, in component order."""
    chunks = []
    for comp in spec.components:
        chol = np.linalg.cholesky(comp.cov)
        z = rng.standard_normal((comp.count, len(comp.mean)))
        chunks.append(comp.mean + z @ chol.T)
    return np.concatenate(chunks, axis=0)


SOURCE_KINDS = ("uniform-cube", "gaussian")


def sample_source(kind: str, dim: int, m: int, rng: SeededRng) -> np.ndarray:
    """``m`` i.i.d. draws from the latent source; the cube is ``[-1, 1]^dim``."""
    if dim < 1 or m < 0:
        raise ValueError(f"need dim >= 1 and m >= 0, got dim={dim}, m={m}")
    if kind == "gaussian":
        return rng.standard_normal((m, dim))
    if kind == "uniform-cube":
        return rng.uniform(-1.0, 1.0, size=(m, dim))
    raise ValueError(f"unknown source kind {kind!r}; expected one of {SOURCE_KINDS}")
