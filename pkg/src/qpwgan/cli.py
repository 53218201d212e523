"""Command-line entry point: ``qpwgan <subcommand> [--config PATH] [--seed N] [--out DIR] [--p X] [--q Y]``.

Exit codes: 0 success, 1 failed property or run, 2 config error. Every run
ends by writing ``manifest.json`` into the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from qpwgan import __version__
from qpwgan.config import EXPERIMENTS, ConfigError, config_hash, load_file, resolve
from qpwgan.experiments import RUNNERS, atomic_write

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpwgan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qpwgan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=str, help="output directory")
        sp.add_argument("--p", type=float, help="cost exponent p")
        sp.add_argument("--q", type=float, help="ground metric exponent q")
    return parser


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, cfg: dict, started: str, files: list[str], ok: bool, results: dict) -> None:
    manifest = {
        "format": "qpwgan-manifest",
        "version": 1,
        "experiment": cfg["experiment"],
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seed": cfg["seed"],
        "code_version": __version__,
        "started": started,
        "finished": _now(),
        "files": sorted(files),
        "ok": ok,
        "results": results,
    }
    atomic_write(out / "manifest.json", json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    flags = {"seed": args.seed, "out": args.out, "p": args.p, "q": args.q}
    try:
        file_cfg = load_file(args.config) if args.config else {}
        cfg = resolve(args.command, file_cfg, flags)
        out = Path(cfg["out"])
        try:
            out.mkdir(parents=True, exist_ok=True)
            probe = out / ".write-probe"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    except ConfigError as exc:
        print(f"qpwgan: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    started = _now()
    try:
        ok, results, files = RUNNERS[args.command](cfg, out)
    except Exception as exc:  # report any run failure through the manifest
        write_manifest(out, cfg, started, [], False, {"error": f"{type(exc).__name__}: {exc}"})
        print(f"qpwgan: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    write_manifest(out, cfg, started, files, ok, results)
    print(json.dumps(_jsonable({"experiment": args.command, "ok": ok, "out": str(out), "results": results}), indent=2))
    return EXIT_OK if ok else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
