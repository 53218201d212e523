"""Exact optimal transport between discrete measures.

These solvers are the ground truth for everything else in the package: the
brute-force permutation search, the 1-D sorted matching, the network simplex,
and an assignment fast path for uniform measures of equal size.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from qpwgan.measures import CostSpec, DiscreteMeasure, cost_matrix
from qpwgan.network_simplex import solve_transport

BRUTEFORCE_MAX = 8


@dataclass
class TransportPlan:
    gamma: np.ndarray
    value: float


@dataclass
class DualPotentials:
    phi: np.ndarray
    psi: np.ndarray

    def dual_value(self, mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
        return float(mu.weights @ self.phi + nu.weights @ self.psi)

    def max_violation(self, C: np.ndarray) -> float:
        """Largest amount by which ``phi_i + psi_j`` exceeds ``C_ij``."""
        return float(np.max(self.phi[:, None] + self.psi[None, :] - C))


def ot_bruteforce(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: CostSpec) -> TransportPlan:
    """Search all ``m!`` pairings of two uniform measures with ``m`` atoms."""
    m = len(mu)
    if len(nu) != m or not (mu.is_uniform() and nu.is_uniform()):
        raise ValueError("ot_bruteforce needs two uniform measures of equal size; use ot_exact")
    if m > BRUTEFORCE_MAX:
        raise ValueError(f"ot_bruteforce is limited to {BRUTEFORCE_MAX} atoms; use ot_exact")
    C = cost_matrix(mu.atoms, nu.atoms, spec)
    rows = np.arange(m)
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(m)):
        total = C[rows, perm].sum()
        if total < best:
            best, best_perm = total, perm
    gamma = np.zeros((m, m))
    gamma[rows, best_perm] = 1.0 / m
    return TransportPlan(gamma, float(best / m))


def ot_1d_sorted(xs, ys, spec: CostSpec) -> float:
    xs = np.sort(np.asarray(xs, dtype=float).reshape(-1))
    ys = np.sort(np.asarray(ys, dtype=float).reshape(-1))
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) == 0:
        raise ValueError("empty input")
    return float(np.mean(np.abs(xs - ys) ** spec.p / spec.p))


def _assignment_duals(C: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Potentials for an optimal permutation: v solves the difference constraints
    # v_j - v_cols[i] <= C_ij - C_i,cols[i] (Bellman-Ford from a virtual source).
    n = len(cols)
    rows = np.arange(n)
    tight = C[rows, cols]
    W = C - tight[:, None]
    v = np.zeros(n)
    for _ in range(n + 1):
        cand = np.min(v[cols][:, None] + W, axis=0)
        new = np.minimum(v, cand)
        if np.array_equal(new, v):
            break
        v = new
    u = tight - v[cols]
    return u, v


def ot_exact(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    spec: CostSpec,
    method: str = "auto",
) -> tuple[TransportPlan, DualPotentials]:
    """Optimal plan and Kantorovich potentials, normalized so ``phi[0] == 0``.

    ``method`` is ``"simplex"``, ``"assignment"`` (uniform measures of equal
    size only) or ``"auto"``, which picks the assignment path when it applies.
    """
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    C = cost_matrix(mu.atoms, nu.atoms, spec)
    square_uniform = len(mu) == len(nu) and mu.is_uniform() and nu.is_uniform()
    if method == "auto":
        method = "assignment" if square_uniform else "simplex"
    if method == "assignment":
        if not square_uniform:
            raise ValueError("assignment path needs two uniform measures of equal size")
        n = len(mu)
        rows, cols = linear_sum_assignment(C)
        gamma = np.zeros_like(C)
        gamma[rows, cols] = 1.0 / n
        value = float(C[rows, cols].sum() / n)
        u, v = _assignment_duals(C, cols)
    elif method == "simplex":
        gamma, u, v, _ = solve_transport(mu.weights, nu.weights, C)
        value = float(np.sum(gamma * C))
    else:
        raise ValueError(f"unknown method {method!r}")
    shift = u[0]
    return TransportPlan(gamma, value), DualPotentials(u - shift, v + shift)


def ot_value(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: CostSpec) -> float:
    return ot_exact(mu, nu, spec)[0].value


def wasserstein_qp(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: CostSpec) -> float:
    """``W_{q,p} = OT_{d_q^p / p}^{1/p}``; multiply by ``p**(1/p)`` for the usual W_p."""
    value = max(ot_value(mu, nu, spec), 0.0)
    return value ** (1.0 / spec.p)


def duality_gap(
    plan: TransportPlan, duals: DualPotentials, mu: DiscreteMeasure, nu: DiscreteMeasure
) -> float:
    if plan.gamma.shape != (len(mu), len(nu)):
        raise ValueError(f"plan shape {plan.gamma.shape} vs measures ({len(mu)}, {len(nu)})")
    if duals.phi.shape != (len(mu),) or duals.psi.shape != (len(nu),):
        raise ValueError("potential shapes do not match the measures")
    return plan.value - duals.dual_value(mu, nu)
