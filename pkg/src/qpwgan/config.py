"""Experiment configs: JSON schema, built-in defaults and override precedence.

A config file is one JSON object with an ``experiment`` key naming the CLI
subcommand. Values resolve as command-line flag > config file > preset >
built-in default. ``train`` blocks accept the :class:`~qpwgan.train.TrainConfig`
fields; a ``preset`` name fills ``lam1``, ``lam2`` and ``search`` first.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from qpwgan.measures import DEFAULT_GMM, SOURCE_KINDS
from qpwgan.experiments import run_label
from qpwgan.train import METHODS, PRESETS, TrainConfig

EXPERIMENTS = ("oracle-check", "toy-discrete", "toy-gmm", "potential-generator", "nn-distance")


class ConfigError(ValueError):
    """Raised for any config problem; the CLI maps it to exit code 2."""


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_exp = {"type": "number", "minimum": 1}
_count = {"type": "integer", "minimum": 1}

TRAIN_PROPS = {
    "m": _count,
    "lr": _pos,
    "beta0": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "n_critic": _count,
    "n_iterations": _count,
    "q": _exp,
    "p": _exp,
    "lam1": {"type": "number", "minimum": 0},
    "lam2": {"type": "number", "minimum": 0},
    "search": {"enum": ["BX", "BX_UNION_BY"]},
    "p2_form": {"enum": ["min", "square"]},
    "clip": _pos,
    "lam_gp": {"type": "number", "minimum": 0},
    "eval_every": _count,
}
TRAIN_SCHEMA = {"type": "object", "properties": TRAIN_PROPS, "additionalProperties": False}

GMM_SCHEMA = {
    "type": "object",
    "required": ["components"],
    "additionalProperties": False,
    "properties": {
        "components": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["mean", "cov", "count"],
                "additionalProperties": False,
                "properties": {
                    "mean": {"type": "array", "items": _num, "minItems": 1},
                    "cov": {
                        "anyOf": [
                            _pos,
                            {"type": "array", "items": _num},
                            {"type": "array", "items": {"type": "array", "items": _num}},
                        ]
                    },
                    "count": _count,
                },
            },
        }
    },
}
DATA_SCHEMA = {
    "type": "object",
    "required": ["gmm"],
    "additionalProperties": False,
    "properties": {"gmm": GMM_SCHEMA},
}

COMMON = {
    "experiment": {"enum": list(EXPERIMENTS)},
    "seed": {"type": "integer", "minimum": 0},
    "out": {"type": "string"},
    "plots": {"type": "boolean"},
}

SCHEMAS = {
    "oracle-check": {
        **COMMON,
        "instances": _count,
        "test_mode": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"perturb_duals": {"type": "number"}},
        },
    },
    "toy-discrete": {
        **COMMON,
        "target": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["atoms"],
                    "additionalProperties": False,
                    "properties": {
                        "atoms": {
                            "type": "array",
                            "minItems": 1,
                            "items": {"type": "array", "items": _num, "minItems": 1},
                        }
                    },
                },
                {
                    "type": "object",
                    "required": ["n_atoms", "dim"],
                    "additionalProperties": False,
                    "properties": {"n_atoms": _count, "dim": _count},
                },
            ]
        },
        "k": _count,
        "p_values": {"type": "array", "items": _exp, "minItems": 1},
        "q": _exp,
        "steps": _count,
        "lr": _pos,
        "final_lr_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "trail_every": _count,
        "lloyd_restarts": {"type": "integer", "minimum": 0},
    },
    "toy-gmm": {
        **COMMON,
        "preset": {"enum": sorted(PRESETS)},
        "train": TRAIN_SCHEMA,
        "data": DATA_SCHEMA,
        "source": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"kind": {"enum": list(SOURCE_KINDS)}, "dim": _count},
        },
        "runs": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["method"],
                "additionalProperties": False,
                "properties": {
                    **TRAIN_PROPS,
                    "method": {"enum": list(METHODS)},
                    "label": {"type": "string", "pattern": "^[A-Za-z0-9_.=-]+$"},
                },
            },
        },
        "snapshots": {"type": "array", "items": _count},
        "hidden": _count,
        "save_checkpoints": {"type": "boolean"},
    },
    "potential-generator": {
        **COMMON,
        "preset": {"enum": sorted(PRESETS)},
        "train": {
            "type": "object",
            "properties": {**TRAIN_PROPS, "m": {"anyOf": [_count, {"type": "null"}]}},
            "additionalProperties": False,
        },
        "data": DATA_SCHEMA,
        "source": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(SOURCE_KINDS)},
                "n": {"anyOf": [_count, {"type": "null"}]},
            },
        },
        "control": {"type": "boolean"},
        "hidden": _count,
    },
    "nn-distance": {
        **COMMON,
        "checkpoint": {"type": "string"},
        "training_data": {"type": "string"},
        "n_samples": {"type": "integer", "minimum": 0},
        "bin_width": _pos,
        "source": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"kind": {"enum": list(SOURCE_KINDS)}},
        },
    },
}

# Training settings of the two WGAN baselines follow their original papers.
BASELINE_DEFAULTS = {
    "wgan-clip": {"n_critic": 5, "p": 1.0, "q": 2.0},
    "wgan-gp": {"n_critic": 5, "beta1": 0.9, "p": 1.0, "q": 2.0},
}

DEFAULTS = {
    "oracle-check": {"seed": 0, "out": "runs/oracle-check", "plots": True, "instances": 200, "test_mode": {}},
    "toy-discrete": {
        "seed": 0,
        "out": "runs/toy-discrete",
        "plots": True,
        "target": {"n_atoms": 10, "dim": 2},
        "k": 7,
        "p_values": [1, 2, 5],
        "q": 2,
        "steps": 2000,
        "lr": 0.05,
        "final_lr_fraction": 0.001,
        "trail_every": 10,
        "lloyd_restarts": 50,
    },
    "toy-gmm": {
        "seed": 0,
        "out": "runs/toy-gmm",
        "plots": True,
        "preset": "mnist-style",
        "train": {"m": 64, "lr": 1e-4, "n_iterations": 5000, "eval_every": 10, "q": 2.0},
        "data": {"gmm": DEFAULT_GMM},
        "source": {"kind": "gaussian", "dim": 2},
        "runs": [
            {"method": "qp-wgan", "p": 1.0},
            {"method": "qp-wgan", "p": 2.0},
            {"method": "qp-wgan", "p": 5.0},
            {"method": "wgan-clip"},
            {"method": "wgan-gp"},
        ],
        "snapshots": [100, 500],
        "hidden": 128,
        "save_checkpoints": True,
    },
    "potential-generator": {
        "seed": 0,
        "out": "runs/potential-generator",
        "plots": True,
        "preset": "mnist-style",
        "train": {"m": None, "lr": 3e-4, "beta0": 0.9, "n_iterations": 3000, "p": 2.0, "q": 2.0, "eval_every": 100},
        "data": {"gmm": DEFAULT_GMM},
        "source": {"kind": "gaussian", "n": None},
        "control": False,
        "hidden": 128,
    },
    "nn-distance": {
        "seed": 0,
        "out": "runs/nn-distance",
        "plots": True,
        "n_samples": 5000,
        "bin_width": 0.05,
        "source": {"kind": "gaussian"},
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("data", "target", "test_mode"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(experiment: str, cfg: dict) -> None:
    if experiment not in SCHEMAS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    schema = {"type": "object", "properties": SCHEMAS[experiment], "additionalProperties": False}
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def load_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def resolve(experiment: str, file_cfg: dict | None = None, flags: dict | None = None) -> dict:
    """Validate and merge a config; raises :class:`ConfigError` before any compute.

    ``flags`` may hold ``seed``, ``out``, ``p`` and ``q`` (``None`` means unset).
    """
    file_cfg = dict(file_cfg or {})
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    named = file_cfg.pop("experiment", experiment)
    if named != experiment:
        raise ConfigError(f"config is for {named!r}, not {experiment!r}")
    validate(experiment, file_cfg)
    cfg = _merge(DEFAULTS[experiment], file_cfg)
    if "preset" in cfg:
        base = DEFAULTS[experiment]["train"]
        cfg["train"] = {**base, **PRESETS[cfg["preset"]], **file_cfg.get("train", {})}
    for key in ("seed", "out"):
        if key in flags:
            cfg[key] = flags[key]
    _apply_exponent_flags(experiment, cfg, flags)
    cfg["experiment"] = experiment
    validate(experiment, {k: v for k, v in cfg.items() if k != "experiment"})
    _check_semantics(experiment, cfg)
    return cfg


def _apply_exponent_flags(experiment: str, cfg: dict, flags: dict) -> None:
    p, q = flags.get("p"), flags.get("q")
    if p is None and q is None:
        return
    if experiment in ("oracle-check", "nn-distance"):
        raise ConfigError(f"--p/--q do not apply to {experiment}")
    if experiment == "toy-discrete":
        if p is not None:
            cfg["p_values"] = [p]
        if q is not None:
            cfg["q"] = q
    elif experiment == "potential-generator":
        cfg["train"].update({k: v for k, v in (("p", p), ("q", q)) if v is not None})
    elif experiment == "toy-gmm":
        runs, seen = [], set()
        for run in cfg["runs"]:
            if run["method"] == "qp-wgan":
                run = {**run, **{k: v for k, v in (("p", p), ("q", q)) if v is not None}}
                run.pop("label", None)
                key = json.dumps(run, sort_keys=True)
                if key in seen:
                    continue
                seen.add(key)
            runs.append(run)
        cfg["runs"] = runs


def _check_semantics(experiment: str, cfg: dict) -> None:
    if experiment == "toy-gmm":
        dims = {len(c["mean"]) for c in cfg["data"]["gmm"]["components"]}
        if len(dims) != 1:
            raise ConfigError("all mixture components need the same dimension")
        full = []
        for run in cfg["runs"]:
            r = dict(run)
            if r["method"] in BASELINE_DEFAULTS:
                r = {**BASELINE_DEFAULTS[r["method"]], **r}
            r.setdefault("p", float(cfg["train"].get("p", 1.0)))
            full.append(r)
        cfg["runs"] = full
        labels = [run_label(r) for r in full]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"run labels must be unique, got {labels}")
        for r in full:
            try:
                TrainConfig(**{**cfg["train"], **{k: v for k, v in r.items() if k != "label"}})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid run {r}: {exc}") from None
    elif experiment == "potential-generator":
        t = cfg["train"]
        if t.get("q", 2.0) != 2.0 or t.get("p", 2.0) <= 1.0:
            raise ConfigError("potential-generator needs q = 2 and p > 1 (the transport map is undefined for p = 1)")
    elif experiment == "toy-discrete":
        if "atoms" in cfg["target"]:
            dims = {len(a) for a in cfg["target"]["atoms"]}
            if len(dims) != 1:
                raise ConfigError("target atoms must share one dimension")
    elif experiment == "nn-distance":
        for key in ("checkpoint", "training_data"):
            if key not in cfg:
                raise ConfigError(f"nn-distance needs {key!r}")
            if not Path(cfg[key]).is_file():
                raise ConfigError(f"{key} file not found: {cfg[key]}")


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form, excluding the output directory."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
