"""Command line driver: ``crystal <kind> --config <path> [--jobs N] [--out DIR]``.

Exit codes: 0 success, 1 an acceptance check failed, 2 invalid configuration,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import platform
import sys
import time
import traceback
from importlib import metadata
from pathlib import Path

from crystal import __version__, io
from crystal.config import KINDS, SCHEMA_VERSION, ConfigError, load_config
from crystal.dynamics import IntegrationError
from crystal.tangent import FrontReachedBoundary

EXIT_OK, EXIT_FAILED, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3

NUMERICAL_ERRORS = (IntegrationError, FrontReachedBoundary, OverflowError, FloatingPointError)


def versions() -> dict:
    out = {"crystal": __version__, "python": platform.python_version(), "schema": SCHEMA_VERSION}
    for pkg in ("numpy", "scipy", "numba", "pyyaml", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crystal", description="Anharmonic lattice dynamics experiments.")
    ap.add_argument("kind", choices=KINDS)
    ap.add_argument("--config", required=True, type=Path, help="YAML experiment config")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    ap.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")
    return ap


def write_manifest(out: Path, cfg, jobs: int, wall: float, status: str, summary: dict | None = None):
    io.write_json(
        out / "manifest.json",
        {
            "kind": cfg.kind,
            "config_sha256": cfg.sha256(),
            "config": cfg.raw,
            "versions": versions(),
            "jobs": jobs,
            "wall_time_s": wall,
            "status": status,
            "summary": summary or {},
        },
    )


def main(argv: list[str] | None = None) -> int:
    from crystal.experiments import run_experiment

    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = load_config(args.config, args.kind)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = args.out or (args.config.parent / cfg.output if cfg.output else Path("out") / cfg.kind)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        result = run_experiment(cfg, out, args.jobs)
    except NUMERICAL_ERRORS as exc:
        step = getattr(exc, "step", None)
        msg = f"numerical failure: {exc}" + (f" (step {step})" if step is not None else "")
        print(msg, file=sys.stderr)
        write_manifest(out, cfg, args.jobs, time.perf_counter() - t0, "numerical failure", {"error": str(exc)})
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"invalid parameters: {exc}", file=sys.stderr)
        traceback.print_exc(limit=2, file=sys.stderr)
        write_manifest(out, cfg, args.jobs, time.perf_counter() - t0, "invalid", {"error": str(exc)})
        return EXIT_INVALID
    wall = time.perf_counter() - t0
    status = "ok" if result.ok else "failed"
    write_manifest(out, cfg, args.jobs, wall, status, result.summary)
    lines = [f"crystal {cfg.kind}  config={args.config}  sha256={cfg.sha256()[:12]}", *result.report,
             f"status: {status}", f"wall time: {wall:.2f} s"]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if cfg.kind == "accept" and not result.ok:
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

