"""Desk-scale experiments behind the CLI: discrete support fitting, the Gaussian
mixture toy, potentials as generators, nearest-training distances and the
oracle self-check.

Every runner takes a resolved config dict (see :mod:`qpwgan.config`) and an
output directory and returns ``(ok, results, files)``. Figures are drawn only
from the CSV files the runner wrote, via the ``plot_*`` functions.

CSV files start with a ``# qpwgan-<kind> v<version>`` line followed by a
header row; floats are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

import numpy as np

from qpwgan import checks, svg
from qpwgan.exact_ot import ot_exact
from qpwgan.measures import (
    CostSpec,
    GmmSpec,
    data_scale,
    distance_matrix,
    empirical_measure,
    sample_gmm,
    sample_source,
)
from qpwgan.nn import forward, load_checkpoint, save_checkpoint, toy_mlp
from qpwgan.rng import make_rng, split
from qpwgan.train import (
    TRACE_COLUMNS,
    SupportOptimizer,
    TrainConfig,
    TrainTrace,
    TrainingDiverged,
    dataset_sampler,
    fit_discrete_support,
    nearest_training_distance,
    potential_generator_experiment,
    train_gan,
)

CSV_VERSION = 1
SUPPORT_COLUMNS = ("run", "step", "objective", "grad_norm")
SAMPLE_COLUMNS = ("run", "series", "step", "index", "weight")
HISTOGRAM_COLUMNS = ("bin_lo", "bin_hi", "count")
DISTANCE_COLUMNS = ("index", "distance")


# -- file helpers ----------------------------------------------------------


def atomic_write(path, data) -> None:
    """Write text or bytes to ``path`` through a temporary file and ``os.replace``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(kind: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# qpwgan-{kind} v{CSV_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def read_csv(path, kind: str | None = None) -> tuple[list[str], list[dict]]:
    """Rows of a versioned CSV as dicts of strings; checks the kind line if given."""
    text = Path(path).read_text(encoding="utf-8")
    first, _, rest = text.partition("\n")
    if not first.startswith("# qpwgan-"):
        raise ValueError(f"{path} lacks the qpwgan CSV header line")
    found_kind, _, version = first[len("# qpwgan-") :].rpartition(" v")
    if kind is not None and found_kind != kind:
        raise ValueError(f"{path} holds {found_kind!r} data, expected {kind!r}")
    if int(version) != CSV_VERSION:
        raise ValueError(f"{path}: unsupported CSV version {version}")
    reader = csv.DictReader(io.StringIO(rest))
    return list(reader.fieldnames or []), list(reader)


def _num(s: str) -> float:
    return float("nan") if s == "" else float(s)


def points_csv(points: np.ndarray) -> str:
    points = np.asarray(points, dtype=float)
    cols = [f"x{d}" for d in range(points.shape[1])]
    return csv_text("points", cols, points.tolist())


def read_points(path) -> np.ndarray:
    cols, rows = read_csv(path, "points")
    if not cols or any(not c.startswith("x") for c in cols):
        raise ValueError(f"{path}: point files have columns x0, x1, ...")
    return np.array([[float(r[c]) for c in cols] for r in rows], dtype=float).reshape(len(rows), len(cols))


def samples_csv(rows: list[tuple], dim: int) -> str:
    """``rows`` hold ``(run, series, step, index, weight, coords)``."""
    cols = SAMPLE_COLUMNS + tuple(f"x{d}" for d in range(dim))
    return csv_text("samples", cols, [(*r[:5], *np.asarray(r[5], dtype=float).tolist()) for r in rows])


def read_samples(path) -> list[dict]:
    cols, rows = read_csv(path, "samples")
    coord_cols = [c for c in cols if c.startswith("x")]
    out = []
    for r in rows:
        out.append(
            {
                "run": r["run"],
                "series": r["series"],
                "step": int(r["step"]),
                "index": int(r["index"]),
                "weight": _num(r["weight"]),
                "x": np.array([float(r[c]) for c in coord_cols]),
            }
        )
    return out


def _select(samples, **match) -> np.ndarray:
    pts = [s["x"] for s in samples if all(s[k] == v for k, v in match.items())]
    return np.array(pts).reshape(len(pts), -1) if pts else np.zeros((0, 2))


# -- oracle self-check -----------------------------------------------------


def run_oracle_check(cfg: dict, out: Path) -> tuple[bool, dict, list[str]]:
    perturb = float(cfg.get("test_mode", {}).get("perturb_duals", 0.0))
    results = checks.run_suite(cfg["seed"], cfg["instances"], perturb_duals=perturb)
    report = {
        "passed": all(r.passed for r in results),
        "perturb_duals": perturb,
        "properties": [r.to_dict() for r in results],
    }
    atomic_write(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    summary = {r.name: r.passed for r in results}
    return report["passed"], summary, ["report.json"]


# -- discrete support fitting ----------------------------------------------


def balanced_lloyd(target_atoms: np.ndarray, k: int, rng, restarts: int = 50, max_iter: int = 500):
    """Best of ``restarts`` runs of Lloyd's algorithm with equal cluster masses.

    The ``k`` centers each carry mass ``1/k`` against the uniform target, so
    the assignment step is an optimal transport plan (a fractional, balanced
    assignment) and the update step moves each center to the barycenter of its
    share. Returns ``(value, centers)`` with ``value`` in the package cost
    convention, ``sum gamma_ij |theta_i - x_j|^2 / 2``.
    """
    target = empirical_measure(target_atoms)
    spec = CostSpec(2.0, 2.0)
    n = len(target)
    best_value, best_centers = np.inf, None
    for _ in range(restarts):
        centers = target.atoms[rng.choice(n, size=k, replace=k > n)].copy()
        previous = np.inf
        for _ in range(max_iter):
            plan, _ = ot_exact(empirical_measure(centers), target, spec)
            centers = k * plan.gamma @ target.atoms
            if previous - plan.value <= 1e-15 * max(1.0, previous):
                break
            previous = plan.value
        value = ot_exact(empirical_measure(centers), target, spec)[0].value
        if value < best_value:
            best_value, best_centers = value, centers
    return best_value, best_centers


def discrete_target(cfg: dict, rng) -> np.ndarray:
    t = cfg["target"]
    if "atoms" in t:
        return np.asarray(t["atoms"], dtype=float).reshape(len(t["atoms"]), -1)
    return rng.random((t["n_atoms"], t["dim"]))


def run_toy_discrete(cfg: dict, out: Path) -> tuple[bool, dict, list[str]]:
    rng_target, rng_init = split(cfg["seed"], 2)
    atoms = discrete_target(cfg, rng_target)
    target = empirical_measure(atoms)
    k, dim = cfg["k"], target.dim
    init = 1e-3 * rng_init.standard_normal((k, dim))
    opt = SupportOptimizer(lr=cfg["lr"], final_lr_fraction=cfg["final_lr_fraction"])
    trace_rows, sample_rows = [], [("", "target", 0, i, 1.0 / len(atoms), a) for i, a in enumerate(atoms)]
    results = {"scale": data_scale(atoms), "runs": {}}
    every = cfg["trail_every"]
    for p in cfg["p_values"]:
        label = f"p={p:g}"
        spec = CostSpec(cfg["q"], p)
        model, hist = fit_discrete_support(target, k, spec, cfg["steps"], opt, init=init)
        for s, (v, g) in enumerate(zip(hist["objective"], hist["grad_norm"])):
            trace_rows.append((label, s, float(v), float(g)))
        for s, theta in enumerate(hist["trail"]):
            if s % every == 0 or s == len(hist["trail"]) - 1:
                sample_rows += [(label, "trail", s, i, 1.0 / k, a) for i, a in enumerate(theta)]
        final = len(hist["trail"]) - 1
        sample_rows += [(label, "model", final, i, 1.0 / k, a) for i, a in enumerate(model.theta)]
        gamma = hist["plan"]
        for i, j in zip(*np.nonzero(gamma > 1e-12)):
            # Plan rows: index is the model atom, coordinates are the target atom.
            sample_rows.append((label, "plan", final, int(i), float(gamma[i, j]), atoms[j]))
        nearest = distance_matrix(model.theta, atoms, 2.0).min(axis=1)
        results["runs"][label] = {
            "p": p,
            "initial_objective": float(hist["objective"][0]),
            "final_objective": float(hist["objective"][-1]),
            "max_nearest_target_distance": float(nearest.max()),
        }
    ok = True
    if cfg["lloyd_restarts"] > 0 and any(p == 2 for p in cfg["p_values"]) and cfg["q"] == 2:
        value, _ = balanced_lloyd(atoms, k, make_rng(cfg["seed"]), restarts=cfg["lloyd_restarts"])
        fit = results["runs"]["p=2"]["final_objective"]
        results["lloyd_best"] = value
        results["ratio_to_lloyd"] = fit / value if value > 0 else (1.0 if fit == 0 else np.inf)
    atomic_write(out / "trace.csv", csv_text("support-trace", SUPPORT_COLUMNS, trace_rows))
    atomic_write(out / "samples.csv", samples_csv(sample_rows, dim))
    files = ["trace.csv", "samples.csv"]
    if cfg["plots"]:
        atomic_write(out / "figure_support.svg", plot_toy_discrete(out / "trace.csv", out / "samples.csv"))
        files.append("figure_support.svg")
    return ok, results, files


def plot_toy_discrete(trace_path, samples_path) -> str:
    """Support-fitting panels: one per run with trails and plan lines, plus the objective curves."""
    samples = read_samples(samples_path)
    _, trace = read_csv(trace_path, "support-trace")
    runs = list(dict.fromkeys(r["run"] for r in trace))
    target = _select(samples, series="target")
    panels = []
    for c, run in enumerate(runs):
        ax = svg.Axes(title=run, equal=True)
        if target.shape[1] >= 2:
            trail = [s for s in samples if s["run"] == run and s["series"] == "trail"]
            idx = sorted({s["index"] for s in trail})
            for i in idx:
                path = np.array([s["x"] for s in trail if s["index"] == i])
                ax.line(path[:, 0], path[:, 1], color="#999999", width=0.8)
            model = {s["index"]: s["x"] for s in samples if s["run"] == run and s["series"] == "model"}
            plan = [s for s in samples if s["run"] == run and s["series"] == "plan"]
            if plan:
                ax.segments(
                    [model[s["index"]][0] for s in plan],
                    [model[s["index"]][1] for s in plan],
                    [s["x"][0] for s in plan],
                    [s["x"][1] for s in plan],
                    color=svg.PALETTE[2],
                )
            ax.scatter(target[:, 0], target[:, 1], color=svg.PALETTE[0], size=4, label="target")
            m = np.array(list(model.values()))
            ax.scatter(m[:, 0], m[:, 1], color=svg.PALETTE[1], size=3, label="model")
            ax.scatter([0.0], [0.0], color="#000000", size=4, marker="cross")
        panels.append(ax)
    obj = svg.Axes(title="log10 W_p^p, gradient norm dashed", xlabel="step")
    for c, run in enumerate(runs):
        rows = [r for r in trace if r["run"] == run]
        steps = np.array([int(r["step"]) for r in rows])
        v = np.array([_num(r["objective"]) for r in rows])
        g = np.array([_num(r["grad_norm"]) for r in rows])
        color = svg.PALETTE[c % len(svg.PALETTE)]
        with np.errstate(divide="ignore"):
            obj.line(steps, np.log10(np.maximum(v, 1e-300)), color=color, label=run)
            obj.line(steps, np.log10(np.maximum(g, 1e-300)), color=color, dash="4,3")
    panels.append(obj)
    return svg.render_figure(panels, ncols=len(panels))


# -- Gaussian mixture toy --------------------------------------------------


def run_label(run: dict) -> str:
    if run.get("label"):
        return run["label"]
    if run["method"] == "qp-wgan":
        return f"qp-wgan-p{run['p']:g}"
    return run["method"]


def tracking_error(trace: TrainTrace, estimate: str = "objective", fraction: float = 0.2) -> float:
    """Mean ``|estimate - true_ot| / true_ot`` over the last ``fraction`` of logged evaluations."""
    rows = trace.eval_rows()
    if not rows:
        raise ValueError("trace has no evaluation rows")
    tail = rows[len(rows) - max(1, int(round(fraction * len(rows)))) :]
    return float(np.mean([abs(r[estimate] - r["true_ot"]) / r["true_ot"] for r in tail]))


def convergence_ratio(trace: TrainTrace, fraction: float = 0.2) -> float:
    """Final-window mean of the true OT value divided by its first logged value."""
    rows = trace.eval_rows()
    tail = rows[len(rows) - max(1, int(round(fraction * len(rows)))) :]
    return float(np.mean([r["true_ot"] for r in tail]) / rows[0]["true_ot"])


def traces_csv(traces: dict[str, TrainTrace]) -> str:
    rows = []
    for label, tr in traces.items():
        for r in tr.rows:
            rows.append((label, *[r.get(c) for c in TRACE_COLUMNS]))
    return csv_text("trace", ("run",) + TRACE_COLUMNS, rows)


def read_traces(path) -> dict[str, TrainTrace]:
    _, rows = read_csv(path, "trace")
    out: dict[str, TrainTrace] = {}
    for r in rows:
        row = {c: (None if r[c] == "" else float(r[c])) for c in TRACE_COLUMNS}
        row["iteration"] = int(row["iteration"])
        out.setdefault(r["run"], TrainTrace()).rows.append(row)
    return out


def gmm_data(cfg: dict) -> np.ndarray:
    data_rng = split(cfg["seed"], 3)[0]
    return sample_gmm(GmmSpec.from_dict(cfg["data"]["gmm"]), data_rng)


def run_toy_gmm(cfg: dict, out: Path) -> tuple[bool, dict, list[str]]:
    """Train every configured method on one shared dataset and initialization."""
    _, rng_eval, rng_init = split(cfg["seed"], 3)
    data = gmm_data(cfg)
    dim = data.shape[1]
    kind = cfg["source"]["kind"]
    latent_dim = cfg["source"]["dim"]
    eval_latent = sample_source(kind, latent_dim, len(data), rng_eval)
    g_init_rng, c_init_rng = split(int(rng_init.integers(2**31)), 2)
    g0 = toy_mlp(latent_dim, dim, g_init_rng, cfg["hidden"])
    c0 = toy_mlp(dim, 1, c_init_rng, cfg["hidden"])

    def source(rng, m):
        return sample_source(kind, latent_dim, m, rng)

    snapshots = sorted(set(cfg["snapshots"]))
    traces: dict[str, TrainTrace] = {}
    sample_rows = [("", "data", 0, i, None, x) for i, x in enumerate(data)]
    results: dict = {"runs": {}}
    files = []
    ok = True
    for run in cfg["runs"]:
        label = run_label(run)
        settings = {k: v for k, v in run.items() if k != "label"}
        config = TrainConfig(**{**cfg["train"], **settings, "seed": cfg["seed"]})
        gen, critic = g0.copy(), c0.copy()
        marks = set(snapshots) | {config.n_iterations}

        def snap(it, generator, label=label):
            if it in marks:
                pts = forward(generator, eval_latent, "eval").data
                sample_rows.extend((label, "generated", it, i, None, x) for i, x in enumerate(pts))

        try:
            gen, critic, trace = train_gan(
                config,
                dataset_sampler(data),
                source,
                gen,
                critic,
                eval_data=data,
                eval_latent=eval_latent,
                on_iteration=snap,
            )
            status = "ok"
        except TrainingDiverged as exc:
            trace, status, ok = exc.trace, f"diverged: {exc}", False
        traces[label] = trace
        info = {"method": config.method, "p": config.p, "q": config.q, "status": status}
        if trace.eval_rows():
            info["tracking_error"] = tracking_error(trace, "objective")
            info["tracking_error_eval"] = tracking_error(trace, "eval_objective")
            info["convergence_ratio"] = convergence_ratio(trace)
        results["runs"][label] = info
        if cfg["save_checkpoints"] and status == "ok":
            save_checkpoint(gen, out / f"generator_{label}.ckpt")
            files.append(f"generator_{label}.ckpt")
    atomic_write(out / "data.csv", points_csv(data))
    atomic_write(out / "trace.csv", traces_csv(traces))
    atomic_write(out / "samples.csv", samples_csv(sample_rows, dim))
    files += ["data.csv", "trace.csv", "samples.csv"]
    if cfg["plots"]:
        atomic_write(out / "figure_samples.svg", plot_gmm_samples(out / "samples.csv"))
        atomic_write(out / "figure_tracking.svg", plot_gmm_tracking(out / "trace.csv"))
        files += ["figure_samples.svg", "figure_tracking.svg"]
    return ok, results, files


def plot_gmm_samples(samples_path) -> str:
    """Rows are runs, columns the snapshot iterations: generated points over the data."""
    samples = read_samples(samples_path)
    data = _select(samples, series="data")
    gen = [s for s in samples if s["series"] == "generated"]
    runs = list(dict.fromkeys(s["run"] for s in gen))
    steps = sorted({s["step"] for s in gen})
    panels = []
    for run in runs:
        for step in steps:
            ax = svg.Axes(title=f"{run}, iteration {step}", equal=True)
            ax.scatter(data[:, 0], data[:, 1], color="#9e9e9e", size=2)
            pts = _select(gen, run=run, step=step)
            if len(pts):
                ax.scatter(pts[:, 0], pts[:, 1], color=svg.PALETTE[0], size=2)
            panels.append(ax)
    if not panels:
        ax = svg.Axes(title="data", equal=True)
        ax.scatter(data[:, 0], data[:, 1], color="#9e9e9e", size=2)
        panels.append(ax)
    return svg.render_figure(panels, ncols=max(len(steps), 1), panel_w=260, panel_h=240)


def plot_gmm_tracking(trace_path) -> str:
    """Dual objective (blue) against the exact OT value (red) at each evaluation.

    WGAN rows plot the critic objective on the evaluation sets, which for
    weight clipping is divided by the estimated Lipschitz constant.
    """
    traces = read_traces(trace_path)
    panels = []
    for label, tr in traces.items():
        rows = tr.eval_rows()
        it = np.array([r["iteration"] for r in rows], dtype=float)
        true = np.array([r["true_ot"] for r in rows])
        col = "objective" if not label.startswith("wgan") else "eval_objective"
        est = np.array([np.nan if r.get(col) is None else r[col] for r in rows])
        ax = svg.Axes(title=label, xlabel="generator iteration")
        ax.line(it, est, color=svg.PALETTE[0], label="dual objective")
        ax.line(it, true, color=svg.PALETTE[1], label="exact OT")
        panels.append(ax)
    return svg.render_figure(panels, ncols=min(len(panels), 3) or 1)


# -- potentials as generators ----------------------------------------------


def run_potential_generator(cfg: dict, out: Path) -> tuple[bool, dict, list[str]]:
    rng_src, rng_init = split(cfg["seed"], 3)[1:]
    data = gmm_data(cfg)
    dim = data.shape[1]
    n_src = cfg["source"]["n"] or len(data)
    source = data.copy() if cfg["control"] else sample_source(cfg["source"]["kind"], dim, n_src, rng_src)
    train = dict(cfg["train"])
    if train.get("m") is None:
        train["m"] = min(len(source), len(data))
    config = TrainConfig(**{**train, "seed": cfg["seed"]})
    critic = toy_mlp(dim, 1, rng_init, cfg["hidden"])
    mapped, trace = potential_generator_experiment(config, source, data, critic)
    spec = CostSpec(2.0, config.p)
    w_raw = ot_exact(empirical_measure(source), empirical_measure(data), spec)[0].value
    w_map = ot_exact(empirical_measure(mapped), empirical_measure(data), spec)[0].value
    disp = float(np.linalg.norm(mapped - source, axis=1).mean())
    results = {
        "ot_source_data": w_raw,
        "ot_mapped_data": w_map,
        "mean_displacement": disp,
        "scale": data_scale(data),
    }
    rows = [("", "target", 0, i, None, x) for i, x in enumerate(data)]
    rows += [("", "source", 0, i, None, x) for i, x in enumerate(source)]
    rows += [("", "mapped", config.n_iterations, i, None, x) for i, x in enumerate(mapped)]
    atomic_write(out / "trace.csv", traces_csv({"potential": trace}))
    atomic_write(out / "samples.csv", samples_csv(rows, dim))
    files = ["trace.csv", "samples.csv"]
    if cfg["plots"]:
        atomic_write(out / "figure_potential.svg", plot_potential(out / "samples.csv"))
        files.append("figure_potential.svg")
    return True, results, files


def plot_potential(samples_path) -> str:
    samples = read_samples(samples_path)
    panels = []
    for series, color in (("source", svg.PALETTE[2]), ("mapped", svg.PALETTE[0])):
        ax = svg.Axes(title=f"{series} over target", equal=True)
        t = _select(samples, series="target")
        ax.scatter(t[:, 0], t[:, 1], color="#9e9e9e", size=2, label="target")
        pts = _select(samples, series=series)
        ax.scatter(pts[:, 0], pts[:, 1], color=color, size=2, label=series)
        panels.append(ax)
    return svg.render_figure(panels, ncols=2)


# -- nearest training distance ---------------------------------------------


def histogram(distances: np.ndarray, bin_width: float) -> tuple[np.ndarray, np.ndarray]:
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    if len(distances) == 0:
        return np.zeros(0), np.zeros(0, dtype=int)
    n_bins = int(np.floor(distances.max() / bin_width)) + 1
    edges = bin_width * np.arange(n_bins + 1)
    idx = np.minimum((distances / bin_width).astype(int), n_bins - 1)
    return edges, np.bincount(idx, minlength=n_bins)


def run_nn_distance(cfg: dict, out: Path) -> tuple[bool, dict, list[str]]:
    gen = load_checkpoint(cfg["checkpoint"])
    training = read_points(cfg["training_data"])
    if training.shape[1] != gen.n_out:
        raise ValueError(f"training data has dimension {training.shape[1]}, generator outputs {gen.n_out}")
    n = cfg["n_samples"]
    rng = make_rng(cfg["seed"])
    if n > 0:
        z = sample_source(cfg["source"]["kind"], gen.n_in, n, rng)
        samples = forward(gen, z, "eval").data
    else:
        samples = np.zeros((0, gen.n_out))
    d = nearest_training_distance(samples, training)
    edges, counts = histogram(d, cfg["bin_width"])
    hist_rows = [(float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    atomic_write(out / "histogram.csv", csv_text("histogram", HISTOGRAM_COLUMNS, hist_rows))
    atomic_write(out / "distances.csv", csv_text("distances", DISTANCE_COLUMNS, list(enumerate(d.tolist()))))
    rows = [("", "generated", 0, i, None, x) for i, x in enumerate(samples)]
    atomic_write(out / "samples.csv", samples_csv(rows, gen.n_out))
    files = ["histogram.csv", "distances.csv", "samples.csv"]
    results = {"n_samples": n, "median_distance": float(np.median(d)) if n else None}
    if cfg["plots"]:
        atomic_write(out / "figure_histogram.svg", plot_histogram(out / "histogram.csv"))
        files.append("figure_histogram.svg")
    return True, results, files


def plot_histogram(hist_path) -> str:
    _, rows = read_csv(hist_path, "histogram")
    edges = [float(r["bin_lo"]) for r in rows] + ([float(rows[-1]["bin_hi"])] if rows else [])
    counts = [float(r["count"]) for r in rows]
    ax = svg.Axes(title="distance to the nearest training point", xlabel="l2 distance", ylabel="count")
    ax.bars(edges, counts)
    return svg.render_figure([ax], panel_w=420, panel_h=300)


RUNNERS = {
    "oracle-check": run_oracle_check,
    "toy-discrete": run_toy_discrete,
    "toy-gmm": run_toy_gmm,
    "potential-generator": run_potential_generator,
    "nn-distance": run_nn_distance,
}
