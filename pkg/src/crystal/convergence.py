"""Convergence of the partial dynamics in the box size and the box center.

The infinite-volume flow is the limit of the partial dynamics as the box
grows. This module measures how fast that limit is approached, how little it
depends on where the box is centered, and how the local-energy functional Q
grows along the approximated flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from crystal.dynamics import IntegratorConfig, Trajectory, integrate_partial
from crystal.lattice import Cube, LatticeSpec, LatticeState, as_site, log_radius, q_functional
from crystal.parallel import pmap

EPS = np.finfo(float).eps
NOISE_FACTOR = 1e2


def _check_pair(a: Trajectory, b: Trajectory):
    if a.config.dt != b.config.dt:
        raise ValueError(f"trajectories use different dt ({a.config.dt} vs {b.config.dt})")
    if a.times.shape != b.times.shape or not np.array_equal(a.times, b.times):
        raise ValueError("trajectories are recorded on different time grids")
    if a.initial != b.initial:
        raise ValueError("trajectories start from different initial conditions")


def _grid_limit(traj: Trajectory, t: float) -> int:
    """Number of snapshots with time <= t."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return int(np.searchsorted(traj.times, t + 1e-9 * max(1.0, t), side="right"))


def displacement_delta(traj_a: Trajectory, traj_b: Trajectory, i, t: float) -> float:
    """Grid maximum over ``s <= t`` of ``|q_i^A(s) - q_i^B(s)|``."""
    _check_pair(traj_a, traj_b)
    i = as_site(i, traj_a.box.d)
    if not (traj_a.box.contains(i) and traj_b.box.contains(i)):
        raise ValueError(f"site {i} is not in both boxes")
    m = _grid_limit(traj_a, t)
    qa = traj_a.site_series(i)[0][:m]
    qb = traj_b.site_series(i)[0][:m]
    return float(np.max(np.linalg.norm(qa - qb, axis=-1)))


def _delta_array(traj_a: Trajectory, traj_b: Trajectory, cube: Cube, t: float) -> np.ndarray:
    """Per-snapshot displacement differences on ``cube``, shape ``(m,) + cube.shape``."""
    _check_pair(traj_a, traj_b)
    m = _grid_limit(traj_a, t)
    out = []
    for traj in (traj_a, traj_b):
        ov = cube.overlap(traj.box)
        if ov is None or not traj.box.contains_cube(cube):
            raise ValueError(f"{cube} is not inside {traj.box}")
        mine, theirs = ov
        out.append(traj.q[(slice(0, m),) + theirs])
    return np.linalg.norm(out[0] - out[1], axis=-1)


def delta_field(traj_a: Trajectory, traj_b: Trajectory, cube: Cube, t: float) -> dict:
    """Map ``site -> displacement_delta`` for every site of ``cube``."""
    arr = _delta_array(traj_a, traj_b, cube, t).max(axis=0)
    return {site: float(arr[cube.index(site)]) for site in cube.sites()}


def u_max(delta: dict, cube: Cube) -> float:
    """Maximum of a site field over ``cube``; every cube site must be present."""
    missing = [s for s in cube.sites() if s not in delta]
    if missing:
        raise KeyError(f"delta field misses site {missing[0]}")
    return max(delta[s] for s in cube.sites())


def check_growth_parameters(spec: LatticeSpec, gamma: float, beta: float, A: float | None = None):
    eta_d = spec.eta * spec.d
    if not eta_d < gamma < 2:
        raise ValueError(
            f"gamma={gamma} must lie in (eta*d, 2) = ({eta_d:g}, 2), "
            "the range where the energy-growth bound holds"
        )
    if not beta > 0:
        raise ValueError(f"beta={beta} must be positive")
    if A is not None and not A > 1:
        raise ValueError(f"A={A} must be > 1")


def n_star(k: int, t: float, Q: float, gamma: float, beta: float, A: float, mu, spec: LatticeSpec) -> int:
    """Box radius beyond which the partial dynamics is within ``2^-(n-k)``."""
    check_growth_parameters(spec, gamma, beta, A)
    if not Q >= 1:
        raise ValueError(f"Q={Q} must be >= 1")
    if t < 0:
        raise ValueError("t must be >= 0")
    d = spec.d
    beta_p = (2 - gamma) * beta / d
    growth = (1 + t**2 * (1 + t**beta_p) * Q ** (gamma / d)) ** (1 / (2 - gamma))
    return 2 * int(k) + math.floor(A * growth * log_radius(mu, d))


def _integrate(job):
    x0, box, cfg, record = job
    return integrate_partial(x0, box, cfg, record_steps=record)


def default_q_scan(x0: LatticeState) -> tuple[list, int]:
    """Centers and radius cap for a Q scan covering the support of ``x0``."""
    sup = x0.support
    k_max = max(2, sup.radius // 4)
    inner = Cube(sup.center, max(sup.radius - k_max, 0))
    return list(inner.sites()), k_max


@dataclass
class ConvergenceReport:
    k: int
    t: float
    mu: tuple
    n_list: list[int]
    u_values: list[float]
    n_star: int
    A: float
    gamma: float
    beta: float
    q_value: float
    noise_floor: float
    fitted_rate: float
    u_series: dict = field(default_factory=dict, repr=False)

    @property
    def bounds(self) -> list[float]:
        return [2.0 ** -(n - self.k) for n in self.n_list]

    @property
    def passes(self) -> list[bool]:
        return [u <= b for u, b in zip(self.u_values, self.bounds)]

    @property
    def status(self) -> str:
        if all(u == 0 for u in self.u_values):
            return "trivial"
        if all(u <= self.noise_floor for u in self.u_values):
            return "converged below measurable"
        return "measured"

    @property
    def probed_beyond_n_star(self) -> list[int]:
        return [n for n in self.n_list if n >= self.n_star]

    @property
    def bound_holds_beyond_n_star(self) -> bool:
        return all(p for n, p in zip(self.n_list, self.passes) if n >= self.n_star)

    @property
    def decay_onset(self) -> int | None:
        """Smallest n from which measurable u values never increase."""
        pts = [(n, u) for n, u in zip(self.n_list, self.u_values) if u > self.noise_floor]
        if not pts:
            return None
        onset = pts[-1][0]
        for (n0, u0), (_, u1) in zip(reversed(pts[:-1]), reversed(pts[1:])):
            if u1 > u0:
                break
            onset = n0
        return onset

    def rows(self):
        return [(n, u, b, p) for n, u, b, p in zip(self.n_list, self.u_values, self.bounds, self.passes)]

    def summary(self) -> dict:
        return {
            "k": self.k,
            "t": self.t,
            "mu": list(self.mu),
            "n_star": self.n_star,
            "fitted_rate": self.fitted_rate,
            "A": self.A,
            "gamma": self.gamma,
            "beta": self.beta,
            "Q": self.q_value,
            "noise_floor": self.noise_floor,
            "status": self.status,
            "decay_onset": self.decay_onset,
            "probed_beyond_n_star": self.probed_beyond_n_star,
            "bound_holds_beyond_n_star": self.bound_holds_beyond_n_star,
        }


def fit_geometric_rate(ns: Sequence[int], us: Sequence[float], floor: float) -> float:
    """Per-step factor ``exp(slope)`` of a least-squares fit of ``log u`` on ``n``."""
    pts = [(n, math.log(u)) for n, u in zip(ns, us) if u > floor]
    if len(pts) < 2:
        return float("nan")
    x, y = np.array(pts).T
    return float(math.exp(np.polyfit(x, y, 1)[0]))


def convergence_scan(
    x0: LatticeState,
    mu,
    k: int,
    n_list: Sequence[int],
    t: float,
    cfg: IntegratorConfig,
    *,
    gamma: float,
    beta: float,
    A: float = 2.0,
    q_value: float | None = None,
    jobs: int = 1,
) -> ConvergenceReport:
    """Measure ``u_k^{mu,n}(t)`` for every ``n`` in ``n_list``.

    Each ``n`` needs the runs on ``Lambda_{mu,n}`` and ``Lambda_{mu,n+1}``;
    all runs share ``cfg.dt`` and record every step.
    """
    spec = x0.spec
    mu = as_site(mu, spec.d)
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing")
    if min(n_list) <= k:
        raise ValueError(f"need min(n_list) > k={k}")
    if q_value is None:
        q_value = q_functional(x0, *default_q_scan(x0))
    n_st = n_star(k, t, q_value, gamma, beta, A, mu, spec)
    run_cfg = replace(cfg, t_final=t, record_stride=1)
    radii = sorted(set(n_list) | {n + 1 for n in n_list})
    trajs = dict(zip(radii, pmap(_integrate, [(x0, Cube(mu, n), run_cfg, ()) for n in radii], jobs)))
    q0, _ = x0.values_on(Cube(mu, radii[-1]))
    scale = float(np.abs(q0).max()) or 1.0
    floor = NOISE_FACTOR * EPS * scale
    obs = Cube(mu, k)
    u_values, series = [], {}
    for n in n_list:
        per_step = _delta_array(trajs[n + 1], trajs[n], obs, t).reshape(len(trajs[n].times), -1)
        running = np.maximum.accumulate(per_step.max(axis=1))
        series[n] = running
        u_values.append(float(running[-1]))
    return ConvergenceReport(
        k=k, t=t, mu=mu, n_list=n_list, u_values=u_values, n_star=n_st, A=A,
        gamma=gamma, beta=beta, q_value=q_value, noise_floor=floor,
        fitted_rate=fit_geometric_rate(n_list, u_values, floor), u_series=series,
    )


def _midpoint(a, b):
    return tuple((x + y) // 2 for x, y in zip(a, b))


def mu_independence(
    x0: LatticeState, mu_a, mu_b, n: int, k: int, t: float, cfg: IntegratorConfig,
    center=None, jobs: int = 1,
) -> float:
    """Largest displacement gap between boxes centred at ``mu_a`` and ``mu_b``.

    The gap is observed on ``Lambda_{center,k}``; ``center`` defaults to the
    (floored) midpoint of the two box centers.
    """
    d = x0.spec.d
    mu_a, mu_b = as_site(mu_a, d), as_site(mu_b, d)
    box_a, box_b = Cube(mu_a, n), Cube(mu_b, n)
    if box_a.overlap(box_b) is None:
        raise ValueError("the two boxes do not intersect")
    obs = Cube(_midpoint(mu_a, mu_b) if center is None else as_site(center, d), k)
    if not (box_a.contains_cube(obs) and box_b.contains_cube(obs)):
        raise ValueError(f"observation cube {obs} is not inside both boxes")
    if mu_a == mu_b:
        return 0.0
    run_cfg = replace(cfg, t_final=t, record_stride=1)
    ta, tb = pmap(_integrate, [(x0, box_a, run_cfg, ()), (x0, box_b, run_cfg, ())], jobs)
    return float(_delta_array(ta, tb, obs, t).max())


@dataclass(frozen=True)
class GrowthRow:
    t: float
    n_star: int
    n_used: int
    q_t: float
    bound_factor: float
    c_t: float
    cap_gap: float


@dataclass
class EnergyGrowthTable:
    q0: float
    gamma: float
    beta: float
    A: float
    rows: list[GrowthRow]

    def bounded(self, factor: float = 10.0) -> bool:
        """Every implied constant stays below ``factor`` times the first positive-time one."""
        ref = next(r.c_t for r in self.rows if r.t > 0)
        return all(r.c_t <= factor * ref for r in self.rows)

    def table(self):
        return [
            (r.t, r.n_star, r.n_used, r.q_t, r.bound_factor, r.c_t, r.cap_gap) for r in self.rows
        ]


def growth_denominator(q0: float, t: float, gamma: float, beta: float, d: int) -> float:
    return q0 * (1 + t ** (2 * d / (2 - gamma)) * (1 + t**beta) * q0 ** (gamma / (2 - gamma)))


def _growth_job(job):
    x0, center, n_used, cfg, mu_range, k_max, cap_check = job
    traj = integrate_partial(x0, Cube(center, n_used), cfg)
    x_t = traj.state_at(-1)
    q_t = q_functional(x_t, mu_range, k_max)
    gap = 0.0
    if cap_check:
        wide = integrate_partial(x0, Cube(center, n_used + cap_check), cfg).state_at(-1)
        region = Cube(center, n_used)
        gap = float(np.abs(wide.values_on(region)[0] - x_t.values_on(region)[0]).max())
    return q_t, gap


def energy_growth_check(
    x0: LatticeState,
    mu_range,
    k_range,
    t_list: Sequence[float],
    gamma: float,
    beta: float,
    cfg: IntegratorConfig,
    *,
    A: float = 2.0,
    center=None,
    n_cap: int | None = None,
    cap_check: int = 16,
    jobs: int = 1,
) -> EnergyGrowthTable:
    """Implied constant of the energy-growth bound along the approximated flow.

    The flow at time ``t`` is approximated by the partial dynamics on a box
    of radius ``n_star`` around ``center`` (enlarged so every scanned cube
    fits). When ``n_cap`` truncates that radius, the run is repeated on a box
    ``cap_check`` sites wider and the largest position gap is reported.
    """
    spec = x0.spec
    check_growth_parameters(spec, gamma, beta, A)
    mu_range = [as_site(mu, spec.d) for mu in mu_range]
    k_max = max(k_range)
    center = x0.support.center if center is None else as_site(center, spec.d)
    q0 = q_functional(x0, mu_range, k_max)
    far = max(mu_range, key=lambda m: sum(abs(v) for v in m))
    reach = max(int(np.max(np.abs(np.subtract(m, center)))) for m in mu_range)
    jobs_in, meta = [], []
    for t in t_list:
        if t == 0:
            meta.append((t, 0, 0))
            continue
        ns = n_star(k_max, t, q0, gamma, beta, A, far, spec) + reach
        used = ns if n_cap is None else min(ns, n_cap)
        run_cfg = replace(cfg, t_final=t, record_stride=max(1, round(t / cfg.dt)))
        jobs_in.append((x0, center, used, run_cfg, mu_range, k_max, cap_check if used < ns else 0))
        meta.append((t, ns, used))
    results = iter(pmap(_growth_job, jobs_in, jobs))
    rows = []
    for t, ns, used in meta:
        q_t, gap = (q0, 0.0) if t == 0 else next(results)
        denom = growth_denominator(q0, t, gamma, beta, spec.d)
        rows.append(GrowthRow(t, ns, used, q_t, denom, q_t / denom, gap))
    return EnergyGrowthTable(q0, gamma, beta, A, rows)
