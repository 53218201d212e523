import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpwgan.autodiff import Tensor, grad
from qpwgan.checks import check_c_transform
from qpwgan.dual import (
    PenaltyWeights,
    c_transform,
    c_transform_tape,
    c_transform_values,
    dual_estimate,
    pairwise_cost,
    penalty_p1,
    penalty_p2,
    qp_critic_terms,
    qp_generator_loss,
    xi,
)
from qpwgan.exact_ot import ot_exact
from qpwgan.measures import CostSpec, cost, cost_matrix, empirical_measure
from qpwgan.nn import forward, toy_mlp
from qpwgan.rng import make_rng

EXPS = (1.0, 1.2, 2.0, 5.0)


def test_c_transform_examples():
    spec = CostSpec(2, 2)
    x1, y = np.array([1.0, 2.0]), np.array([-1.0, 0.5])
    value, idx = c_transform([0.7], [x1], y, spec)
    assert value == pytest.approx(cost(x1, y, spec) - 0.7) and idx == 0
    B = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, -1.0]])
    value, idx = c_transform(np.zeros(3), B, B[1], spec)
    assert value == 0.0 and idx == 1
    value, idx = c_transform([0.0, 0.0], [[0.0], [2.0]], [1.0], CostSpec(2, 1))
    assert value == 1.0 and idx == 0


def test_c_transform_errors():
    with pytest.raises(ValueError):
        c_transform([], np.zeros((0, 2)), [0.0, 0.0], CostSpec())
    with pytest.raises(ValueError):
        c_transform([1.0, 2.0], [[0.0, 0.0]], [0.0, 0.0], CostSpec())


def test_xi_examples():
    spec = CostSpec(2, 1)
    assert xi([0, 0], [3, 4], 2.0, 1.0, spec) == 2.0
    assert xi([0, 0], [3, 4], 0.0, 0.0, spec) == 5.0


def test_vectorized_and_tape_agree_with_scalar():
    rng = make_rng(0)
    B, Y = rng.normal(size=(6, 2)), rng.normal(size=(5, 2))
    phi = rng.normal(size=6)
    for q, p in [(1, 1), (2, 1), (2, 2), (1.2, 5), (5, 1.2)]:
        spec = CostSpec(q, p)
        vals, idx = c_transform_values(phi, B, Y, spec)
        tape, tidx = c_transform_tape(Tensor(phi), B, Y, spec)
        np.testing.assert_allclose(pairwise_cost(B, Y, spec).data, cost_matrix(B, Y, spec), rtol=1e-13)
        for j, y in enumerate(Y):
            v, k = c_transform(phi, B, y, spec)
            assert vals[j] == pytest.approx(v, rel=1e-13) and idx[j] == k
            assert tape.data[j] == pytest.approx(v, rel=1e-12) and tidx[j] == k


def test_idempotence_and_xi_nonnegativity():
    for res in check_c_transform(100, make_rng(1)):
        assert res.passed, res.failures


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 8),
    st.integers(1, 8),
    st.sampled_from(EXPS),
    st.sampled_from(EXPS),
    st.integers(0, 2**31),
)
def test_double_transform_dominates(a, b, q, p, seed):
    rng = make_rng(seed)
    B, Y = rng.normal(size=(a, 2)), rng.normal(size=(b, 2))
    spec = CostSpec(q, p)
    phi = rng.normal(size=a)
    psi, _ = c_transform_values(phi, B, Y, spec)
    chi, _ = c_transform_values(psi, Y, B, spec)
    assert np.all(chi >= phi - 1e-12)
    psi2, _ = c_transform_values(chi, B, Y, spec)
    np.testing.assert_allclose(psi2, psi, atol=1e-12, rtol=0)


def test_tie_break_determinism():
    B = np.array([[0.0], [2.0], [2.0]])
    for _ in range(3):
        _, idx = c_transform_values(np.zeros(3), B, np.array([[1.0], [2.0]]), CostSpec(2, 1))
        assert idx.tolist() == [0, 1]


def test_penalty_p1_examples():
    spec = CostSpec(2, 1)
    X, Y = np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])
    assert penalty_p1(X, Y, Tensor([2.0]), Tensor([1.0]), 0.1, spec).item() == pytest.approx(0.4)
    assert penalty_p1(X, Y, Tensor([5.0]), Tensor([0.0]), 0.1, spec).item() == 0.0
    assert penalty_p1(X, Y, Tensor([2.0]), Tensor([1.0]), 0.0, spec).item() == 0.0
    with pytest.raises(ValueError):
        penalty_p1(X, np.zeros((2, 2)), Tensor([0.0]), Tensor([0.0, 0.0]), 0.1, spec)


def test_penalty_p1_double_sum():
    rng = make_rng(2)
    X, Y = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    phi, psi = rng.normal(size=3), rng.normal(size=3)
    spec = CostSpec(2, 2)
    C = cost_matrix(X, Y, spec)
    expected = 0.3 / 9 * np.sum((C - phi[:, None] - psi[None, :]) ** 2)
    assert penalty_p1(X, Y, Tensor(phi), Tensor(psi), 0.3, spec).item() == pytest.approx(expected)


def test_penalty_p2_examples():
    spec = CostSpec(1, 1)
    U = np.array([[0.0], [1.0]])
    # Only the pair (x1, x1) violates admissibility, with xi = 0 - 1 - 0 = -1.
    phi, psi = Tensor([0.0, 1.0]), Tensor([0.0, 0.0])
    assert penalty_p2(U, phi, psi, 10.0, spec).item() == pytest.approx(2.5)
    assert penalty_p2(U, Tensor([0.0, 0.0]), psi, 10.0, spec).item() == 0.0


def test_penalty_p2_zero_when_admissible_and_square_form():
    rng = make_rng(3)
    U = rng.normal(size=(6, 2))
    spec = CostSpec(2, 2)
    phi = rng.normal(size=6)
    psi, _ = c_transform_values(phi, U, U, spec)
    assert penalty_p2(U, Tensor(phi), Tensor(psi), 10.0, spec).item() <= 1e-24
    C = cost_matrix(U, U, spec)
    expected = 10 / 36 * np.sum((C - phi[:, None] - psi[None, :]) ** 2)
    assert penalty_p2(U, Tensor(phi), Tensor(psi), 10.0, spec, form="square").item() == pytest.approx(expected)
    assert penalty_p2(U, Tensor(phi), Tensor(psi - 5), 0.0, spec).item() == 0.0
    with pytest.raises(ValueError):
        penalty_p2(U, Tensor(phi), Tensor(psi), 1.0, spec, form="abs")


def test_penalty_weights_validation():
    assert PenaltyWeights() == PenaltyWeights(0.1, 10.0)
    with pytest.raises(ValueError):
        PenaltyWeights(-1.0, 0.0)


def test_dual_estimate_examples():
    rng = make_rng(4)
    spec = CostSpec(2, 2)
    X, Y = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    psi, _ = c_transform_values(np.zeros(5), X, Y, spec)
    value = dual_estimate(np.zeros(5), psi).item()
    assert value == pytest.approx(cost_matrix(X, Y, spec).min(axis=0).mean())
    ot = ot_exact(empirical_measure(X), empirical_measure(Y), spec)[0].value
    assert value <= ot + 1e-9
    psi, _ = c_transform_values(np.zeros(5), X, X, spec)
    assert dual_estimate(np.zeros(5), psi).item() == 0.0
    plan, duals = ot_exact(empirical_measure(X), empirical_measure(Y), spec)
    assert dual_estimate(duals.phi, duals.psi).item() == pytest.approx(plan.value, abs=1e-7)
    with pytest.raises(ValueError):
        dual_estimate(np.zeros(3), np.zeros(4))


def test_weak_duality_for_random_critics():
    rng = make_rng(5)
    for _ in range(20):
        spec = CostSpec(*rng.choice(EXPS, size=2))
        critic = toy_mlp(2, 1, rng, hidden=8)
        X, Y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2)) + 1.0
        for search in ("BX", "BX_UNION_BY"):
            terms = qp_critic_terms(lambda z: forward(critic, z), X, Y, spec, search, PenaltyWeights(0, 0))
            ot = ot_exact(empirical_measure(X), empirical_measure(Y), spec)[0].value
            assert terms.dual.item() <= ot + 1e-9


def test_critic_terms_consistent_with_parts():
    rng = make_rng(6)
    spec = CostSpec(2, 2)
    critic = toy_mlp(2, 1, rng, hidden=8)
    X, Y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    w = PenaltyWeights(0.1, 10.0)
    terms = qp_critic_terms(lambda z: forward(critic, z), X, Y, spec, "BX_UNION_BY", w)
    U = np.concatenate([X, Y])
    phi_u = forward(critic, U).data.ravel()
    psi_u, _ = c_transform_values(phi_u, U, U, spec)
    assert terms.dual.item() == pytest.approx(phi_u[:4].mean() + psi_u[4:].mean())
    assert terms.p1.item() == pytest.approx(penalty_p1(X, Y, Tensor(phi_u[:4]), Tensor(psi_u[4:]), 0.1, spec).item())
    assert terms.p2.item() == 0.0
    assert terms.objective.item() == pytest.approx(terms.dual.item() - terms.p1.item())
    with pytest.raises(ValueError):
        qp_critic_terms(lambda z: forward(critic, z), X, Y, spec, "BY", w)


def test_generator_gradient_through_selected_cost():
    rng = make_rng(7)
    critic = toy_mlp(2, 1, rng, hidden=8)
    X, Y0 = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))

    def phi(z):
        return forward(critic, z)

    for search in ("BX", "BX_UNION_BY"):
        spec = CostSpec(1.2, 2.0)
        B = X if search == "BX" else np.concatenate([X, Y0])
        phi_B = forward(critic, B).data.ravel()

        def loss_fixed_B(Y):
            psi, _ = c_transform_values(phi_B, B, Y, spec)
            return phi_B[:5].mean() + psi.mean()

        Yt = Tensor(Y0.copy(), True)
        W = qp_generator_loss(phi, X, Yt, spec, search)
        assert W.item() == pytest.approx(loss_fixed_B(Y0))
        (g,) = grad(W, [Yt])
        h = 1e-6
        fd = np.zeros_like(Y0)
        for idx in np.ndindex(Y0.shape):
            up, down = Y0.copy(), Y0.copy()
            up[idx] += h
            down[idx] -= h
            fd[idx] = (loss_fixed_B(up) - loss_fixed_B(down)) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)
