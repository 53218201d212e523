"""Discrete c-transform, admissibility residuals and the penalized dual objective.

The critic ``phi`` lives on the target side. Its partner ``psi = phi^c`` is
approximated by minimizing over a finite search space ``B``::

    psi(y) = min_{x in B} c(x, y) - phi(x)

and ``xi(x, y) = c(x, y) - phi(x) - psi(y)`` is nonnegative exactly when the
pair is admissible. Gradients pass through the minimum only along the selected
(first) minimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qpwgan.autodiff import Tensor, as_tensor, concat, no_grad
from qpwgan.measures import CostSpec, as_point, as_points, cost, cost_matrix

SEARCH_MODES = ("BX", "BX_UNION_BY")


@dataclass(frozen=True)
class PenaltyWeights:
    lam1: float = 0.1
    lam2: float = 10.0

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("penalty weights must be non-negative")


def c_transform(phi_on_B, B, y, spec: CostSpec) -> tuple[float, int]:
    phi_on_B = np.asarray(phi_on_B, dtype=float).reshape(-1)
    B = as_points(B)
    if len(B) == 0:
        raise ValueError("empty search space")
    if len(phi_on_B) != len(B):
        raise ValueError(f"{len(phi_on_B)} potential values for {len(B)} points")
    vals = cost_matrix(B, as_point(y)[None, :], spec)[:, 0] - phi_on_B
    k = int(np.argmin(vals))
    return float(vals[k]), k


def c_transform_values(phi_on_B, B, Y, spec: CostSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`c_transform` over the rows of ``Y``."""
    vals = cost_matrix(B, Y, spec) - np.asarray(phi_on_B, dtype=float)[:, None]
    idx = np.argmin(vals, axis=0)
    return vals[idx, np.arange(vals.shape[1])], idx


def xi(x, y, phi_x: float, psi_y: float, spec: CostSpec) -> float:
    return cost(x, y, spec) - phi_x - psi_y


# -- differentiable versions -----------------------------------------------


def pairwise_cost(X, Y, spec: CostSpec) -> Tensor:
    """``C[i, j] = d_q(X_i, Y_j) ** p / p`` recorded on the tape."""
    X, Y = as_tensor(X), as_tensor(Y)
    a, n = X.shape
    b, n2 = Y.shape
    if n != n2:
        raise ValueError(f"dimension mismatch: {n} vs {n2}")
    diff = X.reshape(a, 1, n) - Y.reshape(1, b, n)
    q, p = spec.q, spec.p
    if q == 2:
        s = (diff * diff).sum(axis=-1)
        e = p / 2.0
    elif q == 1:
        s = diff.abs().sum(axis=-1)
        e = p
    else:
        s = diff.abs_pow(q).sum(axis=-1)
        e = p / q
    c = s if e == 1.0 else s.abs_pow(e)
    return c if p == 1.0 else c / p


def c_transform_tape(phi_B: Tensor, B, Y, spec: CostSpec) -> tuple[Tensor, np.ndarray]:
    """``psi`` at every row of ``Y`` plus the chosen index into ``B``."""
    C = pairwise_cost(B, Y, spec)
    return (C - phi_B.reshape(-1, 1)).min(axis=0)


def xi_matrix(C: Tensor, phi_rows: Tensor, psi_cols: Tensor) -> Tensor:
    return C - phi_rows.reshape(-1, 1) - psi_cols.reshape(1, -1)


def penalty_p1(B_x, B_y, phi_x: Tensor, psi_y: Tensor, lam1: float, spec: CostSpec) -> Tensor:
    """``lam1 / m^2 * sum_ij xi(x_i, y_j)^2``."""
    B_x, B_y = as_tensor(B_x), as_tensor(B_y)
    m = B_x.shape[0]
    if B_y.shape[0] != m:
        raise ValueError(f"batch sizes differ: {m} vs {B_y.shape[0]}")
    if lam1 == 0:
        return Tensor(0.0)
    X = xi_matrix(pairwise_cost(B_x, B_y, spec), as_tensor(phi_x), as_tensor(psi_y))
    return (X * X).sum() * (lam1 / m**2)


def penalty_p2(
    B_union, phi_u: Tensor, psi_u: Tensor, lam2: float, spec: CostSpec, form: str = "min"
) -> Tensor:
    """``lam2 / (4 m^2) * sum_{x, y in union} min(xi(x, y), 0)^2``.

    ``form="square"`` drops the ``min`` and penalizes ``xi^2`` for every pair.
    """
    B_union = as_tensor(B_union)
    size = B_union.shape[0]
    if lam2 == 0:
        return Tensor(0.0)
    X = xi_matrix(pairwise_cost(B_union, B_union, spec), as_tensor(phi_u), as_tensor(psi_u))
    if form == "min":
        X = -((-X).relu())
    elif form != "square":
        raise ValueError(f"unknown P2 form {form!r}")
    return (X * X).sum() * (lam2 / size**2)


def dual_estimate(phi_x, psi_y) -> Tensor:
    phi_x, psi_y = as_tensor(phi_x), as_tensor(psi_y)
    if phi_x.shape[0] != psi_y.shape[0]:
        raise ValueError(f"batch sizes differ: {phi_x.shape[0]} vs {psi_y.shape[0]}")
    return phi_x.mean() + psi_y.mean()


@dataclass
class CriticTerms:
    objective: Tensor  # dual estimate minus penalties
    dual: Tensor
    p1: Tensor
    p2: Tensor
    psi_y: Tensor


def qp_critic_terms(
    phi_fn,
    X: np.ndarray,
    Y,
    spec: CostSpec,
    search: str,
    weights: PenaltyWeights,
    p2_form: str = "min",
) -> CriticTerms:
    """Penalized dual objective for one critic step.

    ``phi_fn`` maps a point batch to a Tensor of critic values. The critic is
    evaluated once on ``B_x ∪ B_y`` so a single dropout mask covers all terms.
    """
    if search not in SEARCH_MODES:
        raise ValueError(f"unknown search space {search!r}")
    X = as_tensor(X)
    Y = as_tensor(Y)
    m = X.shape[0]
    if Y.shape[0] != m:
        raise ValueError(f"batch sizes differ: {m} vs {Y.shape[0]}")
    U = concat([X, Y], axis=0)
    phi_u = phi_fn(U).reshape(-1)
    phi_x = phi_u[:m]
    if search == "BX":
        B, phi_B = X, phi_x
    else:
        B, phi_B = U, phi_u
    need_union = weights.lam2 > 0
    queries = U if need_union else Y
    psi_q, _ = c_transform_tape(phi_B, B, queries, spec)
    psi_y = psi_q[m:] if need_union else psi_q
    dual = dual_estimate(phi_x, psi_y)
    p1 = penalty_p1(X, Y, phi_x, psi_y, weights.lam1, spec)
    p2 = penalty_p2(U, phi_u, psi_q, weights.lam2, spec, p2_form) if need_union else Tensor(0.0)
    return CriticTerms(dual - p1 - p2, dual, p1, p2, psi_y)


def qp_generator_loss(phi_fn, X: np.ndarray, Y: Tensor, spec: CostSpec, search: str) -> Tensor:
    """Dual estimate seen by the generator.

    The search space is detached, so ``Y`` influences the loss only through the
    cost term of its selected minimizer.
    """
    X = Tensor(X.data if isinstance(X, Tensor) else X)
    m = X.shape[0]
    B = X if search == "BX" else Tensor(np.concatenate([X.data, Y.data]))
    with no_grad():
        phi_B = Tensor(phi_fn(B).data.reshape(-1))
    phi_x = phi_B[:m]
    psi_y, _ = c_transform_tape(phi_B, B, Y, spec)
    return dual_estimate(phi_x, psi_y)
