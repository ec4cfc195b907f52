"""Desk-scale acceptance suite.

Each criterion runs a small, fully seeded experiment and compares measured
quantities against fixed tolerances. Tables go to ``cNN/*.csv`` under the
output directory; runtimes and the pass/fail summary go to
``acceptance.json`` and the report only, so CSV bytes stay reproducible.
"""

from __future__ import annotations

import filecmp
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from crystal import io
from crystal.convergence import (
    convergence_scan,
    default_q_scan,
    energy_growth_check,
    mu_independence,
    n_star,
)
from crystal.dynamics import IntegratorConfig, energy_drift, energy_series, integrate_partial
from crystal.gibbs import GibbsConfig, gibbs_chain, q_tail_estimate, sample_gibbs, superstability_scan
from crystal.lattice import Cube, LatticeSpec, LatticeState, q_functional
from crystal.parallel import pmap
from crystal.tangent import (
    cone_exponent_threshold,
    fit_front,
    full_jacobian,
    integrate_tangent,
    light_cone_scan,
    symplecticity_defect,
)

HARMONIC = LatticeSpec.from_coeffs(1, 1, U=[0, 1], V=[0, 1])
QUARTIC = LatticeSpec.from_coeffs(1, 1, U=[0, 1, 1], V=[0, 1])
OSCILLATOR = LatticeSpec.from_coeffs(1, 1, U=[0, 1])
DT = 1e-3
GROWTH = {"gamma": 1.5, "beta": 0.5, "A": 2.0}


@dataclass(frozen=True)
class Check:
    label: str
    value: float
    limit: str
    ok: bool


@dataclass
class CriterionResult:
    number: int
    title: str
    checks: list[Check]
    runtime_limit: float
    runtime: float = float("nan")
    tables: dict = field(default_factory=dict, repr=False)
    notes: list[str] = field(default_factory=list)

    @property
    def within_time(self) -> bool:
        return not self.runtime_limit or self.runtime < self.runtime_limit

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks) and self.within_time

    def line(self) -> str:
        parts = [f"{c.label}={c.value:.4g} ({c.limit}{'' if c.ok else ' FAIL'})" for c in self.checks]
        if self.runtime_limit:
            parts.append(f"runtime={self.runtime:.1f}s (< {self.runtime_limit:g}s{'' if self.within_time else ' FAIL'})")
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.title}: " + "; ".join(parts)


def _check(label, value, ok, limit) -> Check:
    return Check(label, float(value), limit, bool(ok))


@lru_cache(maxsize=None)
def gibbs_state(spec: LatticeSpec, radius: int, seed: int) -> LatticeState:
    """Seeded equilibrium initial state used by the dynamical criteria."""
    return sample_gibbs(spec, GibbsConfig(1.0, Cube((0,), radius), sweeps=2000, burn_in=500, seed=seed))


# 1 ---------------------------------------------------------------------------

def _drift_job(dt):
    x0 = gibbs_state(HARMONIC, 32, 0)
    cfg = IntegratorConfig(dt, 10.0, record_stride=round(0.01 / dt))
    traj = integrate_partial(x0, x0.support, cfg)
    return traj.times, energy_series(traj), energy_drift(traj)


def criterion_1(jobs: int) -> CriterionResult:
    dts = [DT, DT / 2]
    runs = pmap(_drift_job, dts, jobs)
    drift, half = runs[0][2], runs[1][2]
    ratio = drift / half
    return CriterionResult(
        1, "integrator order and energy conservation",
        [
            _check("drift", drift, drift <= 1e-6, "<= 1e-6"),
            _check("halving_ratio", ratio, 3.5 <= ratio <= 4.5, "in [3.5, 4.5]"),
        ],
        10.0,
        tables={
            "drift": (["dt", "drift"], [(dt, r[2]) for dt, r in zip(dts, runs)]),
            "energy": (["dt", "t", "energy"], [(dt, t, e) for dt, r in zip(dts, runs) for t, e in zip(r[0], r[1])]),
        },
    )


# 2 ---------------------------------------------------------------------------

def criterion_2(jobs: int) -> CriterionResult:
    t_end = math.pi / math.sqrt(2)
    dt = t_end / round(t_end / DT)
    x0 = LatticeState(OSCILLATOR, Cube((0,), 0), np.ones((1, 1)), np.zeros((1, 1)))
    traj = integrate_partial(x0, x0.support, IntegratorConfig(dt, t_end, record_stride=50))
    q_end = float(traj.q[-1].ravel()[0])
    err = abs(q_end + 1)
    rows = [(t, float(q.ravel()[0]), math.cos(math.sqrt(2) * t)) for t, q in zip(traj.times, traj.q)]
    return CriterionResult(
        2, "closed-form oscillator",
        [_check("abs_q_plus_1", err, err <= 1e-4, "<= 1e-4")],
        1.0,
        tables={"oscillator": (["t", "q", "q_exact"], rows)},
        notes=[f"dt={dt!r}, steps={round(t_end / dt)}"],
    )


# 3 ---------------------------------------------------------------------------

def criterion_3(jobs: int) -> CriterionResult:
    x0 = gibbs_state(QUARTIC, 32, 42)
    k, t = 2, 1.0
    q0 = q_functional(x0, *default_q_scan(x0))
    ns = n_star(k, t, q0, GROWTH["gamma"], GROWTH["beta"], GROWTH["A"], (0,), QUARTIC)
    n_list = list(range(4, 13)) + ([ns] if ns > 12 else [])
    rep = convergence_scan(x0, (0,), k, n_list, t, IntegratorConfig(DT, t), q_value=q0, jobs=jobs, **GROWTH)
    beyond = rep.probed_beyond_n_star
    rate = rep.fitted_rate
    return CriterionResult(
        3, "partial-dynamics convergence",
        [
            _check("fitted_rate", rate, rate <= 0.5, "<= 0.5"),
            _check("n_probed_beyond_n_star", len(beyond), len(beyond) >= 1, ">= 1"),
            _check("bound_holds_beyond_n_star", rep.bound_holds_beyond_n_star, rep.bound_holds_beyond_n_star, "== 1"),
        ],
        120.0,
        tables={
            "converge": (["n", "u_value", "bound_2_pow", "passes"], rep.rows()),
            "summary": (["Q", "n_star", "fitted_rate", "status"], [(q0, ns, rate, rep.status)]),
            "n_star_sweep": (["A", "n_star"], [
                (a, n_star(k, t, q0, GROWTH["gamma"], GROWTH["beta"], a, (0,), QUARTIC)) for a in (1.5, 2.0, 4.0)
            ]),
        },
    )


# 4 ---------------------------------------------------------------------------

def _mu_job(n):
    x0 = gibbs_state(QUARTIC, 32, 42)
    return mu_independence(x0, (0,), (2,), n, 1, 1.0, IntegratorConfig(DT, 1.0))


def criterion_4(jobs: int) -> CriterionResult:
    ns = [8, 10, 12]
    gaps = pmap(_mu_job, ns, jobs)
    mono = all(b < a for a, b in zip(gaps, gaps[1:]))
    return CriterionResult(
        4, "independence of the box center",
        [
            _check("strictly_decreasing", mono, mono, "== 1"),
            _check("delta_n12", gaps[-1], gaps[-1] <= 1e-6, "<= 1e-6"),
        ],
        120.0,
        tables={"mu_indep": (["n", "delta"], list(zip(ns, gaps)))},
    )


# 5 ---------------------------------------------------------------------------

def criterion_5(jobs: int) -> CriterionResult:
    x0 = gibbs_state(QUARTIC, 32, 42)
    centers = [(m,) for m in range(-24, 25)]
    tab = energy_growth_check(
        x0, centers, range(1, 9), [1.0, 2.0, 4.0, 8.0], GROWTH["gamma"], GROWTH["beta"],
        IntegratorConfig(DT, 1.0), A=GROWTH["A"], n_cap=96, cap_check=16, jobs=jobs,
    )
    c1 = tab.rows[0].c_t
    worst = max(r.c_t for r in tab.rows) / c1
    gap = max(r.cap_gap for r in tab.rows)
    return CriterionResult(
        5, "energy-growth bound",
        [
            _check("max_C_over_C1", worst, tab.bounded(10.0), "<= 10"),
            _check("cap_gap", gap, gap <= 1e-10, "<= 1e-10"),
        ],
        300.0,
        tables={"energy_growth": (["t", "n_star", "n_used", "q_t", "bound_factor", "c_t", "cap_gap"], tab.table())},
    )


# 6 ---------------------------------------------------------------------------

FD_EPS = 1e-6


def _fd_job(source):
    x0 = gibbs_state(QUARTIC, 8, 42)
    box, cfg = x0.support, IntegratorConfig(DT, 1.0)
    block = integrate_tangent(x0, source, box, cfg).blocks[-1]
    fd = np.zeros_like(block)
    idx = box.index(source)
    for col in range(2):
        ends = []
        for sign in (1.0, -1.0):
            q, p = x0.q.copy(), x0.p.copy()
            (q if col == 0 else p)[idx][0] += sign * FD_EPS
            end = integrate_partial(LatticeState(QUARTIC, box, q, p), box, cfg)
            ends.append(np.concatenate([end.q[-1], end.p[-1]], axis=-1))
        fd[..., col] = (ends[0] - ends[1]) / (2 * FD_EPS)
    return float(np.max(np.abs(fd - block)))


def criterion_6(jobs: int) -> CriterionResult:
    x0 = gibbs_state(QUARTIC, 8, 42)
    sources = list(x0.support.sites())
    errs = pmap(_fd_job, sources, jobs)
    defect = symplecticity_defect(full_jacobian(x0, x0.support, IntegratorConfig(DT, 1.0)))
    worst = max(errs)
    return CriterionResult(
        6, "tangent Jacobian correctness",
        [
            _check("max_fd_error", worst, worst <= 1e-4, "<= 1e-4"),
            _check("symplecticity_defect", defect, defect <= 1e-8, "<= 1e-8"),
        ],
        60.0,
        tables={"fd_errors": (["source", "max_abs_error"], [(s[0], e) for s, e in zip(sources, errs)])},
    )


# 7 ---------------------------------------------------------------------------

CONE_T = [1.0, 2.0, 4.0]
CONE_THRESHOLD = 1e-8
CONE_ALPHA = 4.0


def _cone_job(seed):
    x0 = gibbs_state(QUARTIC, 64, seed)
    return light_cone_scan(x0, (0,), x0.support, CONE_T, CONE_THRESHOLD, IntegratorConfig(DT, 4.0), CONE_ALPHA)


def criterion_7(jobs: int) -> CriterionResult:
    seeds = list(range(8))
    cones = pmap(_cone_job, seeds, jobs)
    r = [max(c.r[k] for c in cones) for k in range(len(CONE_T))]
    off = max(max(c.off_front) for c in cones)
    fit = fit_front(CONE_T, r, CONE_ALPHA)
    alpha_min = cone_exponent_threshold(QUARTIC)
    notes = [f"front linear fit r = {fit.slope:.4g} t + {fit.intercept:.4g}; c_fit over t>1 = {fit.c_fit:.4g}"]
    if fit.violations:
        notes.append(f"t log^alpha t vanishes at t={list(fit.violations)} while r > 0 there")
    return CriterionResult(
        7, "light-cone front",
        [
            _check("alpha_minus_threshold", CONE_ALPHA - alpha_min, CONE_ALPHA > alpha_min, "> 0"),
            _check("front_below_curve", fit.below, fit.below, "== 1"),
            _check("off_front_norm", off, off <= 1e-3 * CONE_THRESHOLD, f"<= {1e-3 * CONE_THRESHOLD:g}"),
        ],
        600.0,
        tables={
            "front": (["t", "r_t", "t_log_alpha_t", "max_norm_at_front_plus_5"],
                      [(t, rr, c, max(cc.off_front[k] for cc in cones))
                       for k, (t, rr, c) in enumerate(zip(CONE_T, r, cones[0].curve))]),
            "front_by_seed": (["seed", "t", "r_t", "t_log_alpha_t", "max_norm_at_front_plus_5"],
                              [(s, *row) for s, c in zip(seeds, cones) for row in c.front_rows()]),
        },
        notes=notes,
    )


# 8 and 9 -------------------------------------------------------------------

def _chain_job(which):
    if which == "single":
        return gibbs_chain(OSCILLATOR, GibbsConfig(1.0, Cube((0,), 0), sweeps=10**6 + 1000, burn_in=1000, thin=10, seed=1))
    return gibbs_chain(HARMONIC, GibbsConfig(1.0, Cube((0,), 16), sweeps=401_000, burn_in=1000, thin=5, seed=2))


@lru_cache(maxsize=None)
def harmonic_chains(jobs: int = 1):
    return tuple(pmap(_chain_job, ["single", "chain"], jobs))


def harmonic_covariance(n_sites: int, beta: float = 1.0) -> np.ndarray:
    """Exact covariance ``(2 beta K)^-1`` of the free-boundary harmonic chain."""
    k = np.eye(n_sites)
    for a in range(n_sites - 1):
        k[a, a] += 1
        k[a + 1, a + 1] += 1
        k[a, a + 1] -= 1
        k[a + 1, a] -= 1
    return np.linalg.inv(2 * beta * k)


def criterion_8(jobs: int) -> CriterionResult:
    single, chain = harmonic_chains(jobs)
    var1 = float(single.q.var())
    n = chain.config.box.n_sites
    qs = chain.q.reshape(len(chain), n)
    emp = np.cov(qs, rowvar=False)
    exact = harmonic_covariance(n)
    diag_err = float(np.max(np.abs(np.diag(emp) / np.diag(exact) - 1)))
    frob_err = float(np.linalg.norm(emp - exact) / np.linalg.norm(exact))
    pvar = float(np.concatenate([single.p.ravel(), chain.p.ravel()]).var())
    mid = n // 2
    return CriterionResult(
        8, "Gibbs sampler exactness",
        [
            _check("single_site_var_rel_err", abs(var1 / 0.5 - 1), abs(var1 / 0.5 - 1) <= 0.03, "<= 0.03"),
            _check("chain_var_max_rel_err", diag_err, diag_err <= 0.05, "<= 0.05"),
            _check("chain_cov_rel_frobenius_err", frob_err, frob_err <= 0.05, "<= 0.05"),
            _check("momentum_var_rel_err", abs(pvar - 1), abs(pvar - 1) <= 0.02, "<= 0.02"),
        ],
        120.0,
        tables={
            "variances": (["quantity", "empirical", "exact"],
                          [("single_site_q", var1, 0.5), ("momentum", pvar, 1.0)]),
            "chain_covariance": (["site", "var_empirical", "var_exact", "cov_mid_empirical", "cov_mid_exact"],
                                 [(a - mid, emp[a, a], exact[a, a], emp[mid, a], exact[mid, a]) for a in range(n)]),
            "acceptance": (["chain", "acceptance_rate", "proposal_scale"],
                           [("single", single.acceptance_rate, single.proposal_scale),
                            ("chain", chain.acceptance_rate, chain.proposal_scale)]),
        },
    )


Q_TAIL_N = [1.5, 2.0, 2.5, 3.0]


def criterion_9(jobs: int) -> CriterionResult:
    _, chain = harmonic_chains(jobs)
    scan = superstability_scan(chain, 0.05, (0,), [1, 2, 3], tolerance=0.2)
    tail = q_tail_estimate(chain, [(0,)], 4, Q_TAIL_N)
    return CriterionResult(
        9, "superstability and Q tail",
        [
            _check("c_omega_spread", scan.spread, scan.stable, "<= 0.2"),
            _check("q_tail_strictly_decreasing", tail.strictly_decreasing, tail.strictly_decreasing, "== 1"),
        ],
        180.0,
        tables={
            "superstability": (["k", "estimate", "c_omega"], scan.rows()),
            "q_tail": (["N", "count", "frequency", "ci_low", "ci_high"], tail.rows()),
        },
    )


CRITERIA: dict[int, Callable[[int], CriterionResult]] = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
    6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9,
}


def clear_caches():
    gibbs_state.cache_clear()
    harmonic_chains.cache_clear()


def run_criterion(number: int, out: Path, jobs: int = 1) -> CriterionResult:
    t0 = time.perf_counter()
    res = CRITERIA[number](jobs)
    res.runtime = time.perf_counter() - t0
    sub = Path(out) / f"c{number:02d}"
    for name, (header, rows) in res.tables.items():
        io.write_csv(sub / f"{name}.csv", header, rows)
    return res


def csv_files(root: Path) -> list[Path]:
    root = Path(root)
    return sorted(p.relative_to(root) for p in root.glob("c0*/*.csv"))


def compare_csv_trees(a: Path, b: Path) -> list[str]:
    """Relative paths that differ or exist in only one of the two trees."""
    fa, fb = set(csv_files(a)), set(csv_files(b))
    bad = sorted(str(p) for p in fa ^ fb)
    bad += [str(p) for p in sorted(fa & fb) if not filecmp.cmp(a / p, b / p, shallow=False)]
    return bad


@dataclass
class SuiteResult:
    results: list[CriterionResult]
    determinism: CriterionResult | None = None

    @property
    def all_results(self) -> list[CriterionResult]:
        return self.results + ([self.determinism] if self.determinism else [])

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.all_results)

    def report_lines(self) -> list[str]:
        lines = []
        for r in self.all_results:
            lines.append(r.line())
            lines += [f"     {n}" for n in r.notes]
        n_pass = sum(r.passed for r in self.all_results)
        lines.append(f"{n_pass}/{len(self.all_results)} criteria passed")
        return lines

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "criteria": [
                {
                    "number": r.number, "title": r.title, "passed": r.passed,
                    "runtime_s": r.runtime, "runtime_limit_s": r.runtime_limit,
                    "checks": [{"label": c.label, "value": c.value, "limit": c.limit, "ok": c.ok} for c in r.checks],
                    "notes": r.notes,
                }
                for r in self.all_results
            ],
        }


def run_suite(out: Path, jobs: int = 1, criteria=None, determinism: bool = True) -> SuiteResult:
    """Run the selected criteria (default all) and optionally the determinism re-run.

    The determinism check repeats the same criteria with the other job count
    (1 if ``jobs > 1``, else 8) into ``out/rerun_jobsN`` and compares every
    CSV byte for byte.
    """
    out = Path(out)
    numbers = sorted(criteria or CRITERIA)
    clear_caches()
    results = [run_criterion(n, out, jobs) for n in numbers]
    det = None
    if determinism:
        other = 1 if jobs > 1 else 8
        rerun = out / f"rerun_jobs{other}"
        clear_caches()
        t0 = time.perf_counter()
        for n in numbers:
            run_criterion(n, rerun, other)
        bad = compare_csv_trees(out, rerun)
        det = CriterionResult(
            10, f"determinism (jobs {jobs} vs {other})",
            [_check("differing_csv_files", len(bad), not bad, "== 0"),
             _check("csv_files_compared", len(csv_files(out)), len(csv_files(out)) > 0, "> 0")],
            0.0,
            runtime=time.perf_counter() - t0,
            notes=[f"differs: {p}" for p in bad],
        )
    suite = SuiteResult(results, det)
    io.write_csv(
        out / "acceptance.csv",
        ["criterion", "check", "value", "limit", "passed"],
        [(r.number, c.label, c.value, c.limit, c.ok) for r in suite.all_results for c in r.checks],
    )
    io.write_json(out / "acceptance.json", suite.summary())
    return suite
