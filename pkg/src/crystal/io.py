"""Diff-stable CSV/JSON artifact writers and the lattice-state CSV format."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from crystal.lattice import Cube, LatticeSpec, LatticeState

BACKGROUND = "background"


def fmt(value) -> str:
    """Format a scalar for artifacts: floats with 17 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17g}"
    if value is None:
        return ""
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else fmt(v)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path: Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def state_header(d: int, nu: int) -> list[str]:
    return (
        [f"site_{a}" for a in range(d)]
        + [f"q_{a}" for a in range(nu)]
        + [f"p_{a}" for a in range(nu)]
    )


def state_rows(x: LatticeState, include_background: bool = True):
    d, nu = x.spec.d, x.spec.nu
    for site in x.support.sites():
        idx = x.support.index(site)
        yield list(site) + list(x.q[idx]) + list(x.p[idx])
    if include_background and (np.any(x.q_background) or np.any(x.p_background)):
        yield [BACKGROUND] * d + list(x.q_background) + list(x.p_background)


def write_state_csv(path: Path, x: LatticeState) -> Path:
    """One row per support site; a trailing ``background`` row if it is not rest."""
    return write_csv(path, state_header(x.spec.d, x.spec.nu), state_rows(x))


def read_state_csv(path: Path, spec: LatticeSpec) -> LatticeState:
    d, nu = spec.d, spec.nu
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != state_header(d, nu):
            raise ValueError(f"unexpected state header {header}")
        sites, qs, ps = [], [], []
        qb = pb = None
        for row in reader:
            if row[0] == BACKGROUND:
                qb = np.array(row[d : d + nu], float)
                pb = np.array(row[d + nu :], float)
                continue
            sites.append(tuple(int(v) for v in row[:d]))
            qs.append([float(v) for v in row[d : d + nu]])
            ps.append([float(v) for v in row[d + nu :]])
    if not sites:
        raise ValueError("state file has no sites")
    arr = np.array(sites)
    lo, hi = arr.min(axis=0), arr.max(axis=0)
    sides = hi - lo
    if np.any(sides != sides[0]) or sides[0] % 2:
        raise ValueError("state support must be a cube of odd side")
    support = Cube(tuple((lo + hi) // 2), int(sides[0]) // 2)
    if len(sites) != support.n_sites or len(set(sites)) != len(sites):
        raise ValueError("state support rows do not cover the cube exactly once")
    q = np.zeros(support.shape + (nu,))
    p = np.zeros_like(q)
    for s, qv, pv in zip(sites, qs, ps):
        q[support.index(s)] = qv
        p[support.index(s)] = pv
    return LatticeState(spec, support, q, p, qb, pb)
