"""Tangent flow of the partial dynamics, Poisson brackets and light cones.

The Jacobian blocks are propagated with the exact differential of every
velocity-Verlet step, so the assembled Jacobian of the discrete map is
symplectic up to roundoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from crystal.dynamics import IntegratorConfig, Trajectory, _record_set, verlet_run
from crystal.lattice import Cube, LatticeSpec, LatticeState, as_site, l1_norm, neighbors


class FrontReachedBoundary(RuntimeError):
    """The perturbation front came within two sites of the box boundary."""


def coupling_matrix(x_t: LatticeState, j, h, box: Cube | None = None) -> np.ndarray:
    """Block ``B_{j,h}`` of the Hessian coupling at the state ``x_t``.

    Sites farther than 1 apart give the structural zero block. With ``box``,
    bonds leaving the box are dropped as in the partial dynamics.
    """
    spec = x_t.spec
    j, h = as_site(j, spec.d), as_site(h, spec.d)
    nu = spec.nu
    dist = l1_norm(np.subtract(j, h))
    if dist > 1:
        return np.zeros((nu, nu))
    if box is not None and not (box.contains(j) and box.contains(h)):
        raise ValueError("sites must lie inside the box")
    qj = x_t.site(j)[0]
    out = np.zeros((nu, nu))
    if dist == 0 and spec.U is not None:
        out -= spec.U.hessian(qj)
    if spec.V is not None:
        for l in neighbors(j):
            if box is not None and not box.contains(l):
                continue
            coef = (1.0 if j == h else 0.0) - (1.0 if l == h else 0.0)
            if coef:
                out -= coef * spec.V.hessian(qj - x_t.site(l)[0])
    return out


@dataclass(frozen=True, eq=False)
class TangentField:
    """Blocks ``Delta_{j,i}(t)`` for every ``j`` in the box, shape ``box.shape + (2nu, 2nu)``."""

    source: tuple
    t: float
    box: Cube
    blocks: np.ndarray

    def block(self, j) -> np.ndarray:
        return self.blocks[self.box.index(j)]

    def norms(self) -> np.ndarray:
        """Spectral norm of every block."""
        return np.linalg.norm(self.blocks, ord=2, axis=(-2, -1))


@dataclass(frozen=True, eq=False)
class TangentSeries:
    source: tuple
    box: Cube
    times: np.ndarray
    blocks: np.ndarray
    q: np.ndarray
    p: np.ndarray
    config: IntegratorConfig

    def __len__(self):
        return len(self.times)

    def __getitem__(self, k: int) -> TangentField:
        return TangentField(self.source, float(self.times[k]), self.box, self.blocks[k])

    def index_of(self, t: float) -> int:
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-9 * max(1.0, t)))
        if hits.size == 0:
            raise ValueError(f"time {t} is not a recorded snapshot")
        return int(hits[0])

    def at(self, t: float) -> TangentField:
        return self[self.index_of(t)]


def _run_with_tangent(x0: LatticeState, box: Cube, cfg: IntegratorConfig, dq0, dp0, record_steps=()):
    q0, p0 = x0.values_on(box)
    return verlet_run(
        x0.spec, q0, p0, cfg.dt, cfg.n_steps, _record_set(cfg, record_steps), tangent=(dq0, dp0)
    )


def integrate_tangent(
    x0: LatticeState, i, box: Cube, cfg: IntegratorConfig, record_steps=()
) -> TangentSeries:
    """Propagate the ``2nu`` tangent columns of source site ``i`` along the base run."""
    spec = x0.spec
    i = as_site(i, spec.d)
    if not box.contains(i):
        raise ValueError(f"source {i} is outside the box {box}")
    nu = spec.nu
    dq0 = np.zeros(box.shape + (nu, 2 * nu))
    dp0 = np.zeros_like(dq0)
    idx = box.index(i)
    dq0[idx][:, :nu] = np.eye(nu)
    dp0[idx][:, nu:] = np.eye(nu)
    snaps = _run_with_tangent(x0, box, cfg, dq0, dp0, record_steps)
    steps = np.array([s[0] for s in snaps])
    blocks = np.stack([np.concatenate([s[3], s[4]], axis=-2) for s in snaps])
    return TangentSeries(
        source=i,
        box=box,
        times=steps * cfg.dt,
        blocks=blocks,
        q=np.stack([s[1] for s in snaps]),
        p=np.stack([s[2] for s in snaps]),
        config=cfg,
    )


def full_jacobian(x0: LatticeState, box: Cube, cfg: IntegratorConfig) -> np.ndarray:
    """Jacobian of the discrete flow over the whole box at ``cfg.t_final``.

    Coordinates are ordered ``(q of all sites, p of all sites)``, sites in
    C order, so the canonical form is ``[[0, I], [-I, 0]]``.
    """
    nu, n = x0.spec.nu, box.n_sites
    m = 2 * nu * n
    dq0 = np.zeros(box.shape + (nu, m))
    dp0 = np.zeros_like(dq0)
    dq0.reshape(n * nu, m)[:, : n * nu] = np.eye(n * nu)
    dp0.reshape(n * nu, m)[:, n * nu :] = np.eye(n * nu)
    last = _run_with_tangent(x0, box, cfg, dq0, dp0)[-1]
    return np.concatenate([last[3].reshape(n * nu, m), last[4].reshape(n * nu, m)])


def canonical_form(dim: int) -> np.ndarray:
    half = dim // 2
    J = np.zeros((dim, dim))
    J[:half, half:] = np.eye(half)
    J[half:, :half] = -np.eye(half)
    return J


def symplecticity_defect(M: np.ndarray) -> float:
    """``max |M^T J M - J|``."""
    J = canonical_form(M.shape[0])
    return float(np.abs(M.T @ J @ M - J).max())


@dataclass(frozen=True)
class Observable:
    """A function of one oscillator's ``(q, p)`` in ``R^{2nu}`` with its gradient.

    Without ``grad`` the gradient is taken by central differences.
    """

    func: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    step: float = 1e-6

    def __call__(self, x) -> float:
        return float(self.func(np.asarray(x, float)))

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.grad is not None:
            return np.asarray(self.grad(x), float)
        g = np.empty_like(x)
        for a in range(x.size):
            e = np.zeros_like(x)
            e[a] = self.step
            g[a] = (self.func(x + e) - self.func(x - e)) / (2 * self.step)
        return g

    @classmethod
    def linear(cls, coeffs) -> Observable:
        c = np.asarray(coeffs, float)
        return cls(lambda x: float(c @ x), lambda x: c)

    @classmethod
    def position(cls, nu: int, a: int = 0) -> Observable:
        c = np.zeros(2 * nu)
        c[a] = 1.0
        return cls.linear(c)

    @classmethod
    def momentum(cls, nu: int, a: int = 0) -> Observable:
        c = np.zeros(2 * nu)
        c[nu + a] = 1.0
        return cls.linear(c)


def poisson_bracket(
    f: Observable, g: Observable, i, j, t: float, tangent: TangentSeries,
    traj: Trajectory | None = None,
) -> float:
    """``{f_i, Phi_t g_j}`` at the initial state, via the chain rule through ``Delta_{j,i}(t)``.

    The base coordinates come from ``traj`` when given, otherwise from the
    base run stored alongside the tangent.
    """
    box = tangent.box
    i, j = as_site(i, box.d), as_site(j, box.d)
    if i != tangent.source:
        raise ValueError(f"tangent was computed for source {tangent.source}, not {i}")
    if not box.contains(j):
        raise ValueError(f"site {j} is outside the box {box}")
    k = tangent.index_of(t)
    if traj is not None:
        qi, pi = traj.initial.site(i)
        qj, pj = (a[traj.index_of(t)] for a in traj.site_series(j))
    else:
        if tangent.times[0] != 0:
            raise ValueError("tangent series must start at t=0")
        qi, pi = tangent.q[0][box.index(i)], tangent.p[0][box.index(i)]
        qj, pj = tangent.q[k][box.index(j)], tangent.p[k][box.index(j)]
    nu = qi.size
    row = g.gradient(np.concatenate([qj, pj])) @ tangent.blocks[k][box.index(j)]
    df = f.gradient(np.concatenate([qi, pi]))
    return float(df[:nu] @ row[nu:] - df[nu:] @ row[:nu])


def cone_exponent_threshold(spec: LatticeSpec) -> float:
    """Lower limit ``(4 - eta d) / (2 - eta d)`` for the light-cone exponent."""
    ed = spec.eta * spec.d
    if ed >= 2:
        raise ValueError(f"eta*d={ed:g} >= 2: no light-cone exponent is admissible")
    return (4 - ed) / (2 - ed)


def check_alpha(spec: LatticeSpec, alpha: float):
    lim = cone_exponent_threshold(spec)
    if not alpha > lim:
        raise ValueError(
            f"alpha={alpha} must exceed (4 - eta d)/(2 - eta d) = {lim:g} (strict inequality)"
        )


def cone_curve(t: float, alpha: float) -> float:
    """``t log(t)^alpha`` for ``t > 1``; zero for ``t <= 1``."""
    return t * math.log(t) ** alpha if t > 1 else 0.0


@dataclass
class LightCone:
    source: tuple
    box: Cube
    threshold: float
    alpha: float
    b: float
    t_list: list[float]
    r: list[int]
    curve: list[float]
    off_front: list[float]
    weighted_beyond_curve: list[float]
    profiles: list[tuple[np.ndarray, np.ndarray]] = field(repr=False)

    def front_rows(self):
        return list(zip(self.t_list, self.r, self.curve, self.off_front))

    def profile_rows(self):
        rows = []
        for t, (dist, norm) in zip(self.t_list, self.profiles):
            rows.extend((t, int(dd), float(nn)) for dd, nn in zip(dist, norm))
        return rows

    def off_front_ok(self, factor: float = 1e-3) -> bool:
        return all(v <= factor * self.threshold for v in self.off_front)


def light_cone_scan(
    x0: LatticeState,
    i,
    box: Cube,
    t_list: Sequence[float],
    threshold: float,
    cfg: IntegratorConfig,
    alpha: float,
    b: float = 1.0,
) -> LightCone:
    """Perturbation front ``r(t) = max{|j-i| : ||Delta_{j,i}(t)|| >= threshold}``.

    The profile at each time is the largest block norm at each distance.

    Raises:
        FrontReachedBoundary: if ``r(t)`` comes within two sites of the box edge.
    """
    spec = x0.spec
    check_alpha(spec, alpha)
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    i = as_site(i, spec.d)
    t_list = [float(t) for t in t_list]
    run_cfg = IntegratorConfig(cfg.dt, max(t_list), record_stride=max(1, round(max(t_list) / cfg.dt)))
    steps = [run_cfg.step_of(t) for t in t_list]
    series = integrate_tangent(x0, i, box, run_cfg, record_steps=steps)
    dist = box.distances_from(i)
    room = int(min(box.radius - abs(a - c) for a, c in zip(i, box.center)))
    d_values = np.arange(int(dist.max()) + 1)
    rs, curves, offs, weighted, profiles = [], [], [], [], []
    for t in t_list:
        norms = series.at(t).norms()
        prof = np.array([norms[dist == v].max() for v in d_values])
        r = int(d_values[prof >= threshold].max()) if np.any(prof >= threshold) else 0
        if r >= room - 2:
            raise FrontReachedBoundary(
                f"front r={r} at t={t} is within two sites of the box edge (room {room}); use a larger box"
            )
        curve = cone_curve(t, alpha)
        beyond = prof[d_values > curve]
        rs.append(r)
        curves.append(curve)
        offs.append(float(prof[r + 5]) if r + 5 < prof.size else float("nan"))
        weighted.append(math.exp(b * t) * float(beyond.max()) if beyond.size else 0.0)
        profiles.append((d_values, prof))
    return LightCone(i, box, threshold, alpha, b, t_list, rs, curves, offs, weighted, profiles)


@dataclass(frozen=True)
class FrontFit:
    slope: float
    intercept: float
    c_fit: float
    below: bool
    violations: tuple[float, ...]


def fit_front(t_list: Sequence[float], r: Sequence[float], alpha: float) -> FrontFit:
    """Linear fit of the front and the least ``c`` with ``r <= c t log^alpha t``.

    ``c`` is fitted on the times where the curve is positive; ``below`` also
    requires ``r = 0`` wherever the curve vanishes, and ``violations`` lists
    the times where that fails.
    """
    t = np.asarray(t_list, float)
    r = np.asarray(r, float)
    slope, intercept = np.polyfit(t, r, 1) if t.size >= 2 else (float("nan"), float("nan"))
    curve = np.array([cone_curve(v, alpha) for v in t])
    pos = curve > 0
    c_fit = float(np.max(r[pos] / curve[pos])) if pos.any() else float("nan")
    viol = tuple(float(v) for v in t[(~pos) & (r > 0)])
    return FrontFit(float(slope), float(intercept), c_fit, not viol, viol)


def series_bound(i, j, t: float, q_sup: float, spec: LatticeSpec, C: float = 1.0) -> float:
    """Upper bound for ``||Delta_{j,i}(t)||`` from the iterated-kernel series.

    Evaluates ``(1+t) sum_{n >= |j-i|} [C t^2 log^eta(e+|i|+n) Q^eta / n^2]^n``,
    truncated once a summand drops below 1e-300. Returns ``inf`` when the
    first summand is at least 1. The ``n = 0`` summand (``j = i``) is 1.
    """
    if not q_sup >= 1:
        raise ValueError("q_sup must be >= 1")
    if t < 0 or C <= 0:
        raise ValueError("need t >= 0 and C > 0")
    i = as_site(i, spec.d)
    n0 = l1_norm(np.subtract(as_site(j, spec.d), i))
    eta, ni = spec.eta, l1_norm(i)
    total = 1.0 if n0 == 0 else 0.0
    if t == 0:
        return total
    cut = math.log(1e-300)

    def log_term(n):
        return n * (
            math.log(C) + 2 * math.log(t) + eta * math.log(math.log(math.e + ni + n))
            + eta * math.log(q_sup) - 2 * math.log(n)
        )

    n = max(n0, 1)
    if log_term(n) >= 0:
        return math.inf
    while True:
        lt = log_term(n)
        if lt < cut:
            break
        total += math.exp(lt)
        n += 1
    return (1 + t) * total
