"""Property suites that validate the exact OT solvers, the c-transform and the
autodiff against independent oracles.

Each suite returns a :class:`PropertyResult`; failures carry the offending
inputs so a report can be replayed. ``cmd_oracle_check`` runs them all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from qpwgan.autodiff import Tensor, grad
from qpwgan.dual import c_transform_values
from qpwgan.exact_ot import DualPotentials, duality_gap, ot_1d_sorted, ot_bruteforce, ot_exact
from qpwgan.measures import CostSpec, DiscreteMeasure, cost_matrix, empirical_measure
from qpwgan.nn import build_mlp, forward
from qpwgan.rng import SeededRng, make_rng
from qpwgan.train import ot_envelope_gradient

EXPONENTS = (1.0, 1.2, 2.0, 5.0)
MAX_FAILURES_REPORTED = 5


@dataclass
class PropertyResult:
    name: str
    n_cases: int = 0
    worst: float = 0.0
    tolerance: float = 0.0
    failures: list[dict] = field(default_factory=list)
    n_failed: int = 0

    @property
    def passed(self) -> bool:
        return self.n_failed == 0 and self.n_cases > 0

    def record(self, error: float, inputs: dict) -> None:
        self.n_cases += 1
        self.worst = max(self.worst, float(error))
        if not error <= self.tolerance:
            self.n_failed += 1
            if len(self.failures) < MAX_FAILURES_REPORTED:
                self.failures.append({"error": float(error), "inputs": inputs})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "n_cases": self.n_cases,
            "n_failed": self.n_failed,
            "worst": self.worst,
            "tolerance": self.tolerance,
            "failures": self.failures,
        }


def random_instance(rng: SeededRng, m: int, dim: int = 2) -> tuple[DiscreteMeasure, DiscreteMeasure, CostSpec]:
    """Two uniform ``m``-atom measures in the unit cube and a random ``(q, p)``."""
    X = rng.random((m, dim))
    Y = rng.random((m, dim))
    q, p = rng.choice(EXPONENTS, size=2)
    return empirical_measure(X), empirical_measure(Y), CostSpec(float(q), float(p))


def _inputs(mu, nu, spec) -> dict:
    return {"x": mu.atoms.tolist(), "y": nu.atoms.tolist(), "q": spec.q, "p": spec.p}


def check_bruteforce_agreement(n: int, rng: SeededRng, tol: float = 1e-8) -> PropertyResult:
    res = PropertyResult("ot_exact_vs_bruteforce", tolerance=tol)
    for _ in range(n):
        mu, nu, spec = random_instance(rng, int(rng.integers(2, 8)))
        ref = ot_bruteforce(mu, nu, spec).value
        for method in ("simplex", "assignment"):
            err = abs(ot_exact(mu, nu, spec, method=method)[0].value - ref)
            res.record(err, {**_inputs(mu, nu, spec), "method": method})
    return res


def check_strong_duality(
    n: int,
    rng: SeededRng,
    gap_tol: float = 1e-7,
    weak_tol: float = 1e-9,
    slack_tol: float = 1e-7,
    perturb: float = 0.0,
) -> list[PropertyResult]:
    """Duality gap in ``[-weak_tol, gap_tol]``, admissibility and complementary slackness.

    ``perturb > 0`` shifts every ``phi`` by that amount before checking: a
    negative control that must make the gap property fail.
    """
    gap = PropertyResult("duality_gap", tolerance=0.0)
    slack = PropertyResult("complementary_slackness", tolerance=slack_tol)
    adm = PropertyResult("dual_admissibility", tolerance=1e-9)
    for _ in range(n):
        mu, nu, spec = random_instance(rng, int(rng.integers(2, 8)))
        for method in ("simplex", "assignment"):
            plan, duals = ot_exact(mu, nu, spec, method=method)
            if perturb:
                duals = DualPotentials(duals.phi + perturb, duals.psi)
            C = cost_matrix(mu.atoms, nu.atoms, spec)
            g = duality_gap(plan, duals, mu, nu)
            # Distance outside the allowed band; 0 when inside.
            gap.record(max(-weak_tol - g, g - gap_tol, 0.0), {**_inputs(mu, nu, spec), "gap": g, "method": method})
            tight = np.abs(duals.phi[:, None] + duals.psi[None, :] - C)[plan.gamma > 0]
            slack.record(float(tight.max()), {**_inputs(mu, nu, spec), "method": method})
            adm.record(max(duals.max_violation(C), 0.0), {**_inputs(mu, nu, spec), "method": method})
    return [gap, slack, adm]


def check_sorted_1d(n: int, rng: SeededRng, tol: float = 1e-8) -> PropertyResult:
    res = PropertyResult("ot_exact_vs_sorted_1d", tolerance=tol)
    for _ in range(n):
        m = int(rng.integers(1, 40))
        xs, ys = rng.normal(size=m), rng.normal(size=m) + rng.normal()
        spec = CostSpec(1.0, float(rng.choice(EXPONENTS)))
        exact = ot_exact(empirical_measure(xs[:, None]), empirical_measure(ys[:, None]), spec, method="simplex")
        err = abs(exact[0].value - ot_1d_sorted(xs, ys, spec))
        res.record(err, {"xs": xs.tolist(), "ys": ys.tolist(), "p": spec.p})
    return res


def check_c_transform(n: int, rng: SeededRng, tol: float = 1e-12) -> list[PropertyResult]:
    """``phi^{ccc} == phi^c`` and ``xi >= -tol`` on random finite sets."""
    idem = PropertyResult("c_transform_idempotence", tolerance=tol)
    nonneg = PropertyResult("xi_nonnegative", tolerance=tol)
    for _ in range(n):
        a, b = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        B, Y = rng.normal(size=(a, 2)), rng.normal(size=(b, 2))
        spec = CostSpec(*(float(v) for v in rng.choice(EXPONENTS, size=2)))
        phi = rng.normal(size=a)
        psi, _ = c_transform_values(phi, B, Y, spec)
        chi, _ = c_transform_values(psi, Y, B, spec)
        psi2, _ = c_transform_values(chi, B, Y, spec)
        inputs = {"B": B.tolist(), "Y": Y.tolist(), "phi": phi.tolist(), "q": spec.q, "p": spec.p}
        idem.record(float(np.max(np.abs(psi2 - psi))), inputs)
        xi = cost_matrix(B, Y, spec) - phi[:, None] - psi[None, :]
        nonneg.record(max(-float(xi.min()), 0.0), inputs)
    return [idem, nonneg]


def _random_mlp(rng: SeededRng):
    depth = int(rng.integers(1, 4))
    widths = [int(rng.integers(1, 5))] + [int(rng.integers(2, 7)) for _ in range(depth - 1)] + [1]
    acts = [str(rng.choice(["relu", "leaky_relu", "tanh", "identity"])) for _ in range(depth - 1)]
    return build_mlp(widths, acts + ["identity"], rng)


def _pre_activations(net, x) -> list[np.ndarray]:
    out, h = [], x
    for layer in net.layers:
        z = h @ layer.weight.data + layer.bias.data
        out.append(z)
        h = forward_activation(z, layer)
    return out


def forward_activation(z: np.ndarray, layer) -> np.ndarray:
    if layer.activation == "relu":
        return np.maximum(z, 0.0)
    if layer.activation == "leaky_relu":
        return np.where(z > 0, z, layer.slope * z)
    if layer.activation == "tanh":
        return np.tanh(z)
    return z


def near_kink(net, x, eps: float, margin: float = 1e-6) -> bool:
    """True if some piecewise-linear pre-activation lies within ``margin + eps``-ish of 0."""
    for z, layer in zip(_pre_activations(net, x), net.layers):
        if layer.activation in ("relu", "leaky_relu") and np.min(np.abs(z)) < max(margin, 10 * eps):
            return True
    return False


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def check_autodiff(n: int, rng: SeededRng, tol: float = 1e-5, eps: float = 1e-4) -> PropertyResult:
    """Parameter and input gradients of random MLP losses against central differences.

    Configurations with a ReLU pre-activation within ``max(1e-6, 10 eps)`` of
    its kink are redrawn, since a difference step there crosses the kink.
    """
    res = PropertyResult("autodiff_vs_finite_differences", tolerance=tol)
    while res.n_cases < n:
        net = _random_mlp(rng)
        x = rng.normal(size=(int(rng.integers(1, 4)), net.n_in))
        if near_kink(net, x, eps):
            continue
        params = net.parameters()
        xt = Tensor(x, True)
        loss = (forward(net, xt) * forward(net, xt)).sum()
        analytic = grad(loss, params + [xt])
        flats = [p.data for p in params] + [x]

        def value() -> float:
            return float(np.sum(forward(net, x).data ** 2))

        worst = 0.0
        for arr, g in zip(flats, analytic):
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                up = value()
                arr[idx] = old - eps
                down = value()
                arr[idx] = old
                fd[idx] = (up - down) / (2 * eps)
            worst = max(worst, rel_error(g, fd))
        widths = [net.n_in] + [l.n_out for l in net.layers]
        res.record(worst, {"widths": widths, "activations": [l.activation for l in net.layers]})
    return res


def check_envelope_gradient(
    n: int, rng: SeededRng, tol: float = 1e-4, eps: float = 1e-6, tie_gap: float = 1e-6
) -> PropertyResult:
    """Envelope gradient of ``OT(theta, target)`` against central differences.

    Configurations whose optimal plan is not unique within ``tie_gap`` (the
    second-best assignment is that close) are redrawn.
    """
    res = PropertyResult("envelope_gradient_vs_finite_differences", tolerance=tol)
    while res.n_cases < n:
        k = int(rng.integers(1, 6))
        target = empirical_measure(rng.random((k, 2)))
        theta = rng.random((k, 2))
        spec = CostSpec(float(rng.choice([1.2, 2.0, 5.0])), float(rng.choice([1.2, 2.0, 5.0])))
        if _plan_degenerate(theta, target, spec, tie_gap):
            continue
        _, g, _ = ot_envelope_gradient(theta, target, spec)
        fd = np.zeros_like(theta)
        for idx in np.ndindex(theta.shape):
            up, down = theta.copy(), theta.copy()
            up[idx] += eps
            down[idx] -= eps
            fd[idx] = (
                ot_exact(empirical_measure(up), target, spec)[0].value
                - ot_exact(empirical_measure(down), target, spec)[0].value
            ) / (2 * eps)
        res.record(rel_error(g, fd), {"theta": theta.tolist(), "target": target.atoms.tolist(), "q": spec.q, "p": spec.p})
    return res


def _plan_degenerate(theta, target, spec, tie_gap) -> bool:
    # For equal-size uniform measures the plans are permutations; compare the
    # best against every single transposition of it.
    from scipy.optimize import linear_sum_assignment

    C = cost_matrix(theta, target.atoms, spec)
    rows, cols = linear_sum_assignment(C)
    best = C[rows, cols].sum()
    k = len(cols)
    for i in range(k):
        for j in range(i + 1, k):
            alt = best - C[i, cols[i]] - C[j, cols[j]] + C[i, cols[j]] + C[j, cols[i]]
            if alt - best < tie_gap * k:
                return True
    d = np.linalg.norm(theta[:, None, :] - target.atoms[None, :, :], axis=-1)
    # Coincident points make the cost non-differentiable for p <= q.
    return bool(np.min(d) < 1e-3)


def run_suite(seed: int = 0, instances: int = 200, perturb_duals: float = 0.0) -> list[PropertyResult]:
    """All oracle properties with the default case counts."""
    rng = make_rng(seed)
    results = [check_bruteforce_agreement(instances, rng)]
    results += check_strong_duality(instances, rng, perturb=perturb_duals)
    results.append(check_sorted_1d(max(instances // 2, 1), rng))
    results += check_c_transform(max(instances // 2, 1), rng)
    results.append(check_autodiff(max(instances // 4, 1), rng))
    results.append(check_envelope_gradient(max(instances // 4, 1), rng))
    return results
