"""Training loops: (q,p)-WGAN, weight-clipping WGAN, WGAN-GP, potential-as-generator,
and gradient descent on the support of a discrete model measure."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from qpwgan.autodiff import Tensor, grad, no_grad
from qpwgan.dual import (
    SEARCH_MODES,
    PenaltyWeights,
    c_transform_values,
    qp_critic_terms,
    qp_generator_loss,
)
from qpwgan.exact_ot import ot_exact
from qpwgan.measures import (
    CostSpec,
    DiscreteMeasure,
    cost_grad_x,
    data_scale,
    distance_matrix,
    empirical_measure,
)
from qpwgan.nn import AdamState, MlpNetwork, adam_step, clip_weights, forward, grad_wrt_input
from qpwgan.rng import split

METHODS = ("qp-wgan", "wgan-clip", "wgan-gp")
TRACE_VERSION = 1
TRACE_COLUMNS = (
    "iteration",
    "objective",
    "penalty_p1",
    "penalty_p2",
    "gradient_penalty",
    "critic_grad_norm",
    "generator_grad_norm",
    "eval_objective",
    "true_ot",
    "batch_ot",
    "lipschitz",
)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: "TrainTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    m: int = 64
    lr: float = 1e-4
    beta0: float = 0.5
    beta1: float = 0.999
    n_critic: int = 1
    n_iterations: int = 5000
    q: float = 2.0
    p: float = 1.0
    lam1: float = 0.1
    lam2: float = 10.0
    search: str = "BX_UNION_BY"
    p2_form: str = "min"
    method: str = "qp-wgan"
    clip: float = 0.01
    lam_gp: float = 10.0
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"batch size must be >= 1, got {self.m}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.n_critic < 1:
            raise ValueError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.search not in SEARCH_MODES:
            raise ValueError(f"search must be one of {SEARCH_MODES}, got {self.search!r}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        CostSpec(self.q, self.p)
        PenaltyWeights(self.lam1, self.lam2)

    @property
    def spec(self) -> CostSpec:
        return CostSpec(self.q, self.p)

    @property
    def penalties(self) -> PenaltyWeights:
        return PenaltyWeights(self.lam1, self.lam2)


# Hyperparameter profiles for the (q,p)-WGAN critic.
PRESETS = {
    "cifar-style": {"lam1": 0.1, "lam2": 10.0, "search": "BX_UNION_BY"},
    "mnist-style": {"lam1": 0.0, "lam2": 0.0, "search": "BX"},
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


@dataclass
class TrainTrace:
    rows: list[dict] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ValueError("trace iterations must increase")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.rows], dtype=float)

    def eval_rows(self) -> list[dict]:
        return [r for r in self.rows if r.get("true_ot") is not None]

    def to_csv(self) -> str:
        """CSV text with the fixed column order of ``TRACE_COLUMNS``.

        Floats use ``repr`` so the text round-trips exactly; missing values are empty.
        """
        buf = io.StringIO()
        buf.write(f"# qpwgan-trace v{TRACE_VERSION}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.rows:
            writer.writerow(["" if r.get(c) is None else repr(r[c]) for c in TRACE_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainTrace":
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        reader = csv.DictReader(lines)
        trace = cls()
        for rec in reader:
            row = {k: (None if v == "" else float(v)) for k, v in rec.items()}
            row["iteration"] = int(row["iteration"])
            trace.rows.append(row)
        return trace


def _grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def estimate_lipschitz(phi: Callable, points, q: float = 2.0) -> float:
    """Largest ``|phi(x) - phi(y)| / d_q(x, y)`` over distinct pairs of ``points``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if len(pts) < 2:
        raise ValueError("need at least two points")
    vals = np.asarray(phi(pts), dtype=float).reshape(-1)
    d = distance_matrix(pts, pts, q)
    mask = d > 0
    if not mask.any():
        raise ValueError("all points are identical")
    ratio = np.abs(vals[:, None] - vals[None, :])[mask] / d[mask]
    return float(ratio.max())


def _critic_values(critic: MlpNetwork, pts) -> np.ndarray:
    with no_grad():
        return forward(critic, pts, "eval").data.reshape(-1)


def _evaluate(config: TrainConfig, critic, generator, eval_data, eval_latent) -> dict:
    spec = config.spec
    with no_grad():
        gen = forward(generator, eval_latent, "eval").data
    true = ot_exact(empirical_measure(eval_data), empirical_measure(gen), spec)[0].value
    phi_x = _critic_values(critic, eval_data)
    phi_y = _critic_values(critic, gen)
    out = {"true_ot": true}
    if config.method == "qp-wgan":
        if config.search == "BX":
            B, phi_B = eval_data, phi_x
        else:
            B, phi_B = np.concatenate([eval_data, gen]), np.concatenate([phi_x, phi_y])
        psi, _ = c_transform_values(phi_B, B, gen, spec)
        out["eval_objective"] = float(phi_x.mean() + psi.mean())
    else:
        raw = float(phi_x.mean() - phi_y.mean())
        lip = estimate_lipschitz(lambda p: _critic_values(critic, p), np.concatenate([eval_data, gen]), spec.q)
        out["lipschitz"] = lip
        out["eval_objective"] = raw / lip if config.method == "wgan-clip" and lip > 0 else raw
    return out


def train_gan(
    config: TrainConfig,
    target_sampler: Callable,
    source_sampler: Callable,
    generator: MlpNetwork,
    critic: MlpNetwork,
    eval_data: np.ndarray | None = None,
    eval_latent: np.ndarray | None = None,
    on_iteration: Callable[[int, MlpNetwork], None] | None = None,
) -> tuple[MlpNetwork, MlpNetwork, TrainTrace]:
    """Alternate critic ascent and generator descent for ``config.method``.

    ``target_sampler(rng, m)`` and ``source_sampler(rng, m)`` return point
    batches. When ``eval_data`` and ``eval_latent`` are given, every
    ``eval_every`` iterations the exact OT value between ``eval_data`` and the
    generator's image of ``eval_latent`` is logged next to the critic's
    objective on the same sets. ``on_iteration(it, generator)`` runs after each
    generator update.
    """
    if critic.n_out != 1:
        raise ValueError("critic must have a scalar output")
    if generator.n_out != critic.n_in:
        raise ValueError(f"generator outputs {generator.n_out} dims, critic takes {critic.n_in}")
    spec, weights = config.spec, config.penalties
    rng_data, rng_noise, rng_drop, rng_gp = split(config.seed, 4)
    c_params, g_params = critic.parameters(), generator.parameters()
    c_state, g_state = AdamState.zeros_like(c_params), AdamState.zeros_like(g_params)
    trace = TrainTrace()
    t0 = time.perf_counter()
    m = config.m

    def phi_train(pts):
        return forward(critic, pts, "train", rng_drop)

    def phi_eval(pts):
        return forward(critic, pts, "eval")

    for it in range(1, config.n_iterations + 1):
        X = np.asarray(target_sampler(rng_data, m), dtype=float)
        Z = np.asarray(source_sampler(rng_noise, m), dtype=float)
        with no_grad():
            Y = forward(generator, Z, "eval").data
        row: dict = {"iteration": it}
        for _ in range(config.n_critic):
            if config.method == "qp-wgan":
                terms = qp_critic_terms(phi_train, X, Y, spec, config.search, weights, config.p2_form)
                loss = -terms.objective
                row["penalty_p1"] = terms.p1.item()
                row["penalty_p2"] = terms.p2.item()
            else:
                phi = forward(critic, Tensor(np.concatenate([X, Y])), "train", rng_drop).reshape(-1)
                loss = -(phi[:m].mean() - phi[m:].mean())
                if config.method == "wgan-gp":
                    gp = _gradient_penalty(critic, X, Y, rng_gp, config.lam_gp)
                    row["gradient_penalty"] = gp.item()
                    loss = loss + gp
            gs = grad(loss, c_params)
            adam_step(c_params, gs, c_state, config.lr, config.beta0, config.beta1)
            if config.method == "wgan-clip":
                clip_weights(critic, config.clip)
            row["critic_grad_norm"] = _grad_norm(gs)

        if eval_data is not None and (it - 1) % config.eval_every == 0 or (
            eval_data is not None and it == config.n_iterations
        ):
            row.update(_evaluate(config, critic, generator, eval_data, eval_latent))
            row["batch_ot"] = ot_exact(empirical_measure(X), empirical_measure(Y), spec)[0].value

        Yt = forward(generator, Z, "eval")
        if config.method == "qp-wgan":
            W = qp_generator_loss(phi_eval, X, Yt, spec, config.search)
        else:
            phi_x = _critic_values(critic, X)
            W = Tensor(phi_x.mean()) - forward(critic, Yt, "eval").mean()
        row["objective"] = W.item()
        gg = grad(W, g_params)
        adam_step(g_params, gg, g_state, config.lr, config.beta0, config.beta1)
        row["generator_grad_norm"] = _grad_norm(gg)

        trace.append(row)
        trace.wall_clock.append(time.perf_counter() - t0)
        if not all(np.isfinite(v) for v in row.values() if v is not None):
            raise TrainingDiverged(f"non-finite value at iteration {it}: {row}", trace)
        if on_iteration is not None:
            on_iteration(it, generator)
    return generator, critic, trace


def _gradient_penalty(critic: MlpNetwork, X, Y, rng, lam_gp: float) -> Tensor:
    t = rng.random((len(X), 1))
    xhat = Tensor(t * X + (1.0 - t) * Y, True)
    out = forward(critic, xhat, "eval").sum()
    (g,) = grad(out, [xhat], create_graph=True)
    norms = (g * g).sum(axis=1).abs_pow(0.5)
    dev = norms - 1.0
    return (dev * dev).mean() * lam_gp


def gradient_penalty_value(critic: MlpNetwork, points, lam_gp: float) -> float:
    """``lam_gp * mean (||grad phi|| - 1)^2`` at the given points."""
    g = grad_wrt_input(critic, points)
    return float(lam_gp * np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))


def train_qp_wgan(config, target_sampler, source_sampler, generator, critic, **kw):
    return train_gan(replace(config, method="qp-wgan"), target_sampler, source_sampler, generator, critic, **kw)


def train_wgan_clip(config, target_sampler, source_sampler, generator, critic, clip=None, **kw):
    cfg = replace(config, method="wgan-clip", clip=config.clip if clip is None else clip)
    return train_gan(cfg, target_sampler, source_sampler, generator, critic, **kw)


def train_wgan_gp(config, target_sampler, source_sampler, generator, critic, lam_gp=None, **kw):
    cfg = replace(config, method="wgan-gp", lam_gp=config.lam_gp if lam_gp is None else lam_gp)
    return train_gan(cfg, target_sampler, source_sampler, generator, critic, **kw)


# -- potentials as generators ----------------------------------------------


def transport_map_apply(critic: MlpNetwork, y, spec: CostSpec) -> np.ndarray:
    """``T(y) = y - |grad phi(y)|^(p' - 2) grad phi(y)`` with ``1/p + 1/p' = 1``.

    Accepts one point or a batch. Where the gradient vanishes and ``p' < 2`` the
    singular factor is taken as 0, so the point is left in place.
    """
    if spec.q != 2:
        raise ValueError("the transport map formula needs the Euclidean ground metric (q = 2)")
    if spec.p <= 1:
        raise ValueError("the transport map needs p > 1")
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = y[None, :] if single else y
    g = grad_wrt_input(critic, Y)
    p_conj = spec.p / (spec.p - 1.0)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    if p_conj == 2.0:
        factor = np.ones_like(norm)
    else:
        with np.errstate(divide="ignore"):
            factor = np.where(norm > 0, norm ** (p_conj - 2.0), 0.0)
    out = Y - factor * g
    return out[0] if single else out


def train_potential(
    config: TrainConfig,
    source_sampler: Callable,
    target_sampler: Callable,
    critic: MlpNetwork,
    eval_source: np.ndarray | None = None,
    eval_target: np.ndarray | None = None,
) -> tuple[MlpNetwork, TrainTrace]:
    """Fit a Kantorovich potential on the source side; no generator network.

    The critic sits on the source batch and its c-transform on the target
    batch, so ``transport_map_apply`` pushes source points toward the target.
    """
    spec, weights = config.spec, config.penalties
    rng_src, rng_tgt, rng_drop = split(config.seed, 3)
    params = critic.parameters()
    state = AdamState.zeros_like(params)
    trace = TrainTrace()
    t0 = time.perf_counter()

    def phi_train(pts):
        return forward(critic, pts, "train", rng_drop)

    for it in range(1, config.n_iterations + 1):
        S = np.asarray(source_sampler(rng_src, config.m), dtype=float)
        T = np.asarray(target_sampler(rng_tgt, config.m), dtype=float)
        row: dict = {"iteration": it}
        for _ in range(config.n_critic):
            terms = qp_critic_terms(phi_train, S, T, spec, config.search, weights, config.p2_form)
            gs = grad(-terms.objective, params)
            adam_step(params, gs, state, config.lr, config.beta0, config.beta1)
            row.update(
                objective=terms.dual.item(),
                penalty_p1=terms.p1.item(),
                penalty_p2=terms.p2.item(),
                critic_grad_norm=_grad_norm(gs),
            )
        if eval_source is not None and ((it - 1) % config.eval_every == 0 or it == config.n_iterations):
            mapped = transport_map_apply(critic, eval_source, spec)
            row["true_ot"] = ot_exact(empirical_measure(mapped), empirical_measure(eval_target), spec)[0].value
        trace.append(row)
        trace.wall_clock.append(time.perf_counter() - t0)
        if not all(np.isfinite(v) for v in row.values() if v is not None):
            raise TrainingDiverged(f"non-finite value at iteration {it}: {row}", trace)
    return critic, trace


def potential_generator_experiment(
    config: TrainConfig,
    source_points: np.ndarray,
    target_points: np.ndarray,
    critic: MlpNetwork,
) -> tuple[np.ndarray, TrainTrace]:
    """Train a potential between two point sets and map the source through it.

    Batches are drawn without replacement from each set; returns the mapped
    source points and the training trace.
    """
    source_points = np.asarray(source_points, dtype=float)
    target_points = np.asarray(target_points, dtype=float)
    if source_points.shape[1] != target_points.shape[1]:
        raise ValueError(
            f"source dim {source_points.shape[1]} differs from data dim {target_points.shape[1]}"
        )
    if critic.n_in != source_points.shape[1]:
        raise ValueError("critic input dimension does not match the data")
    spec = config.spec
    if spec.q != 2 or spec.p <= 1:
        raise ValueError("potential-as-generator needs q = 2 and p > 1")
    critic, trace = train_potential(
        config,
        dataset_sampler(source_points),
        dataset_sampler(target_points),
        critic,
        eval_source=source_points,
        eval_target=target_points,
    )
    return transport_map_apply(critic, source_points, spec), trace


def dataset_sampler(points: np.ndarray) -> Callable:
    """Mini-batches drawn without replacement (with replacement if ``m`` exceeds the set)."""
    points = np.asarray(points, dtype=float)

    def sample(rng, m):
        idx = rng.choice(len(points), size=m, replace=m > len(points))
        return points[idx]

    return sample


# -- discrete support fitting ----------------------------------------------


@dataclass
class AtomModel:
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if len(self.theta) < 1:
            raise ValueError("need at least one atom")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("atoms must be finite")

    def measure(self) -> DiscreteMeasure:
        return empirical_measure(self.theta)


@dataclass
class SupportOptimizer:
    # Step size in units of the target's data scale.
    lr: float = 0.05
    beta0: float = 0.9
    beta1: float = 0.999
    # Learning rate decays geometrically to lr * final_lr_fraction over the run.
    final_lr_fraction: float = 0.001


def ot_envelope_gradient(theta: np.ndarray, target: DiscreteMeasure, spec: CostSpec):
    """Exact ``OT(theta, target)`` and its gradient in the atom positions.

    The gradient is ``sum_j gamma*_ij grad c(theta_i, x_j)`` for the optimal
    plan ``gamma*``, valid wherever that plan is unique.
    """
    model = empirical_measure(theta)
    plan, _ = ot_exact(model, target, spec)
    g = cost_grad_x(theta[:, None, :], target.atoms[None, :, :], spec)
    return plan.value, np.einsum("ij,ijk->ik", plan.gamma, g), plan


def fit_discrete_support(
    target: DiscreteMeasure,
    k: int,
    spec: CostSpec,
    steps: int,
    optimizer: SupportOptimizer | None = None,
    init: np.ndarray | None = None,
    rng=None,
) -> tuple[AtomModel, dict]:
    """Adam descent on the support of a ``k``-atom uniform measure toward ``target``.

    Returns the final model and a dict with per-step ``objective`` (``W_p^p``),
    ``grad_norm`` and ``trail`` (atom positions before each step, plus the final).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    opt = optimizer or SupportOptimizer()
    if init is None:
        init = np.zeros((k, target.dim))
        if rng is not None:
            init = init + 1e-3 * rng.standard_normal(init.shape)
    theta = np.array(init, dtype=float).reshape(k, target.dim)
    state = AdamState.zeros_like([theta])
    lr = opt.lr * data_scale(target.atoms)
    decay = opt.final_lr_fraction ** (1.0 / max(steps - 1, 1))
    objective, grad_norm, trail = [], [], [theta.copy()]
    for s in range(steps):
        value, g, _ = ot_envelope_gradient(theta, target, spec)
        objective.append(value)
        grad_norm.append(float(np.linalg.norm(g)))
        adam_step([theta], [g], state, lr * decay**s, opt.beta0, opt.beta1)
        trail.append(theta.copy())
    value, g, plan = ot_envelope_gradient(theta, target, spec)
    objective.append(value)
    grad_norm.append(float(np.linalg.norm(g)))
    return AtomModel(theta), {
        "objective": np.array(objective),
        "grad_norm": np.array(grad_norm),
        "trail": np.array(trail),
        "plan": plan.gamma,
    }


def nearest_training_distance(generated, training) -> np.ndarray:
    gen = np.asarray(generated, dtype=float)
    tr = np.asarray(training, dtype=float)
    if gen.ndim == 1:
        gen = gen[:, None]
    if tr.ndim == 1:
        tr = tr[:, None]
    if len(tr) == 0:
        raise ValueError("empty training set")
    if len(gen) == 0:
        return np.zeros(0)
    out = np.empty(len(gen))
    for lo in range(0, len(gen), 1024):
        out[lo : lo + 1024] = distance_matrix(gen[lo : lo + 1024], tr, 2.0).min(axis=1)
    return out
