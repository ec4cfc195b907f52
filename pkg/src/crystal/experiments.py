"""One runner per experiment kind; each writes plot-ready CSV/JSON artifacts.

Every runner takes a validated :class:`ExperimentConfig`, an output
directory and a job count, and returns a :class:`RunResult`. CSV contents
never depend on the job count or on wall time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crystal import io
from crystal.config import ExperimentConfig
from crystal.convergence import (
    convergence_scan,
    default_q_scan,
    energy_growth_check,
    mu_independence,
    n_star,
)
from crystal.dynamics import energy_drift, integrate_partial, write_trajectory
from crystal.gibbs import gibbs_chain, q_tail_estimate, superstability_scan
from crystal.lattice import Cube, as_site, q_functional
from crystal.parallel import pmap
from crystal.tangent import fit_front, light_cone_scan


@dataclass
class RunResult:
    kind: str
    summary: dict
    report: list[str] = field(default_factory=list)
    ok: bool = True


def _cube_param(p: dict, key: str, d: int, default: Cube | None = None) -> Cube | None:
    if key not in p:
        return default
    c = p[key]
    return Cube(as_site(c.get("center", [0] * d), d), c["radius"])


def _q_scan(cfg: ExperimentConfig, x0, p: dict):
    """Centers and radius cap for Q: explicit ``q_centers``/``q_k_max`` or a support-wide default."""
    centers, k_max = default_q_scan(x0)
    cube = _cube_param(p, "q_centers", cfg.spec.d)
    if cube is not None:
        centers = list(cube.sites())
    return centers, p.get("q_k_max", k_max)


def run_simulate(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> RunResult:
    x0 = cfg.build_initial()
    box = _cube_param(cfg.params, "box", cfg.spec.d, x0.support)
    traj = integrate_partial(x0, box, cfg.integrator)
    write_trajectory(traj, out / "trajectory")
    drift = energy_drift(traj)
    summary = {"box": box.to_dict(), "steps": cfg.integrator.n_steps, "drift": drift}
    return RunResult("simulate", summary, [f"box {box}", f"relative energy drift {drift:.3e}"])


def run_converge(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> RunResult:
    p = cfg.params
    x0 = cfg.build_initial()
    d = cfg.spec.d
    mu = as_site(p.get("mu", x0.support.center), d)
    gamma, beta, A = p["gamma"], p["beta"], p.get("A", 2.0)
    q_value = q_functional(x0, *_q_scan(cfg, x0, p))
    n_list = list(p["n_list"])
    ns = n_star(p["k"], p["t"], q_value, gamma, beta, A, mu, cfg.spec)
    if p.get("probe_n_star", False) and ns > n_list[-1]:
        n_list.append(ns)
    rep = convergence_scan(
        x0, mu, p["k"], n_list, p["t"], cfg.integrator,
        gamma=gamma, beta=beta, A=A, q_value=q_value, jobs=jobs,
    )
    io.write_csv(out / "converge.csv", ["n", "u_value", "bound_2_pow", "passes"], rep.rows())
    times = np.arange(len(next(iter(rep.u_series.values())))) * cfg.integrator.dt
    io.write_csv(
        out / "u_series.csv",
        ["n", "t", "u_running_max"],
        [(n, t, u) for n in rep.n_list for t, u in zip(times, rep.u_series[n])],
    )
    summary = rep.summary()
    io.write_json(out / "converge.json", summary)
    lines = [f"Q={q_value:.6g} n_star={rep.n_star} status={rep.status} fitted_rate={rep.fitted_rate:.4g}"]
    lines += [f"n={n:4d} u={u:.3e} bound={b:.3e} {'ok' if ok else 'FAIL'}" for n, u, b, ok in rep.rows()]
    return RunResult("converge", summary, lines, rep.bound_holds_beyond_n_star)


def run_mu_indep(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> RunResult:
    p = cfg.params
    x0 = cfg.build_initial()
    gaps = [
        mu_independence(x0, p["mu_a"], p["mu_b"], n, p["k"], p["t"], cfg.integrator,
                        center=p.get("center"), jobs=jobs)
        for n in p["n_list"]
    ]
    monotone = all(b < a or a == b == 0 for a, b in zip(gaps, gaps[1:]))
    io.write_csv(out / "mu_indep.csv", ["n", "delta"], zip(p["n_list"], gaps))
    summary = {"mu_a": p["mu_a"], "mu_b": p["mu_b"], "k": p["k"], "t": p["t"],
               "deltas": gaps, "monotone_decreasing": monotone}
    io.write_json(out / "mu_indep.json", summary)
    lines = [f"n={n:4d} delta={g:.3e}" for n, g in zip(p["n_list"], gaps)]
    return RunResult("mu-indep", summary, lines + [f"monotone decreasing: {monotone}"], monotone)


GROWTH_HEADER = ["t", "n_star", "n_used", "q_t", "bound_factor", "c_t", "cap_gap"]


def run_energy_growth(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> RunResult:
    p = cfg.params
    x0 = cfg.build_initial()
    centers = list(_cube_param(p, "q_centers", cfg.spec.d).sites())
    tab = energy_growth_check(
        x0, centers, range(1, p["k_max"] + 1), p["t_list"], p["gamma"], p["beta"], cfg.integrator,
        A=p.get("A", 2.0), n_cap=p.get("n_cap"), cap_check=p.get("cap_check", 16), jobs=jobs,
    )
    factor = p.get("bound_factor", 10.0)
    bounded = tab.bounded(factor)
    io.write_csv(out / "energy_growth.csv", GROWTH_HEADER, tab.table())
    summary = {"Q0": tab.q0, "gamma": tab.gamma, "beta": tab.beta, "A": tab.A,
               "bound_factor": factor, "bounded": bounded}
    io.write_json(out / "energy_growth.json", summary)
    lines = [f"t={r.t:g} n_star={r.n_star} n_used={r.n_used} Q_t={r.q_t:.6g} C={r.c_t:.3e} gap={r.cap_gap:.1e}"
             for r in tab.rows]
    return RunResult("energy-growth", summary, lines + [f"bounded by {factor} x C(first t): {bounded}"], bounded)


def _initial_for_seed(job):
    cfg, seed = job
    return cfg.build_initial(seed)


def _lightcone_job(job):
    x0, source, box, p, integ = job
    box = box or x0.support
    return light_cone_scan(
        x0, source, box, p["t_list"], p["threshold"], integ, p["alpha"], p.get("b", 1.0)
    )


def _seeds(cfg: ExperimentConfig) -> list:
    seeds = cfg.params.get("seeds")
    if seeds is None:
        return [cfg.initial.get("seed", 0)]
    if cfg.initial["type"] != "gibbs":
        raise ValueError("params.seeds needs a 'gibbs' initial state")
    return list(seeds)


def run_lightcone(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> RunResult:
    p = cfg.params
    d = cfg.spec.d
    seeds = _seeds(cfg)
    states = pmap(_initial_for_seed, [(cfg, s) for s in seeds], jobs)
    source = as_site(p.get("source", [0] * d), d)
    box = _cube_param(p, "box", d)
    cones = pmap(_lightcone_job, [(x, source, box, p, cfg.integrator) for x in states], jobs)
    t_list = cones[0].t_list
    r = [max(c.r[k] for c in cones) for k in range(len(t_list))]
    off = [max(c.off_front[k] for c in cones) for k in range(len(t_list))]
    io.write_csv(
        out / "front.csv",
        ["t", "r_t", "t_log_alpha_t", "max_norm_at_front_plus_5"],
        zip(t_list, r, cones[0].curve, off),
    )
    io.write_csv(
        out / "front_by_seed.csv",
        ["seed", "t", "r_t", "t_log_alpha_t", "max_norm_at_front_plus_5"],
        [(s, *row) for s, c in zip(seeds, cones) for row in c.front_rows()],
    )
    io.write_csv(
        out / "profile.csv",
        ["seed", "t", "dist", "delta_norm"],
        [(s, *row) for s, c in zip(seeds, cones) for row in c.profile_rows()],
    )
    fit = fit_front(t_list, r, p["alpha"])
    off_ok = all(c.off_front_ok() for c in cones)
    summary = {
        "alpha": p["alpha"], "threshold": p["threshold"], "seeds": seeds, "t": t_list, "r": r,
        "slope": fit.slope, "intercept": fit.intercept, "c_fit": fit.c_fit,
        "below_curve": fit.below, "violations": list(fit.violations), "off_front_ok": off_ok,
        "weighted_beyond_curve": [max(c.weighted_beyond_curve[k] for c in cones) for k in range(len(t_list))],
    }
    io.write_json(out / "lightcone.json", summary)
    lines = [f"t={t:g} r={rr} curve={cv:.4g} off_front={o:.2e}" for t, rr, cv, o in zip(t_list, r, cones[0].curve, off)]
    lines.append(f"linear fit r = {fit.slope:.4g} t + {fit.intercept:.4g}; c_fit={fit.c_fit:.4g}")
    if fit.violations:
        lines.append(f"front is positive where t log^alpha t vanishes, at t={list(fit.violations)}")
    return RunResult("lightcone", summary, lines, fit.below and off_ok)


def _chain_job(job):
    cfg, seed = job
    return gibbs_chain(cfg.spec, cfg.gibbs_config(seed))


def run_gibbs(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> RunResult:
    seeds = _seeds(cfg)
    chains = pmap(_chain_job, [(cfg, s) for s in seeds], jobs)
    keep = cfg.params.get("write_samples", 1)
    box = chains[0].config.box
    stats_rows, summaries = [], []
    for seed, ch in zip(seeds, chains):
        for k in range(max(0, len(ch) - keep), len(ch)):
            io.write_state_csv(out / "samples" / f"seed_{seed}" / f"sample_{k:06d}.csv", ch.state(k))
        q = ch.q.reshape(len(ch), box.n_sites, -1)
        pm = ch.p.reshape(len(ch), box.n_sites, -1)
        for s, site in enumerate(box.sites()):
            stats_rows.append((seed, *site, *q[:, s].mean(0), *q[:, s].var(0), *pm[:, s].var(0)))
        summaries.append(ch.summary())
    nu = cfg.spec.nu
    header = (["seed"] + [f"site_{a}" for a in range(cfg.spec.d)] + [f"mean_q_{a}" for a in range(nu)]
              + [f"var_q_{a}" for a in range(nu)] + [f"var_p_{a}" for a in range(nu)])
    io.write_csv(out / "site_stats.csv", header, stats_rows)
    io.write_json(out / "gibbs.json", {"chains": summaries, "n_samples": len(chains[0])})
    lines = [f"seed={s['seed']} acceptance={s['acceptance_rate']:.3f} scale={s['proposal_scale']:.3g}"
             for s in summaries]
    return RunResult("gibbs", {"chains": summaries}, lines)


def run_superstability(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> RunResult:
    p = cfg.params
    d = cfg.spec.d
    samples = gibbs_chain(cfg.spec, cfg.gibbs_config())
    mu = as_site(p.get("mu", [0] * d), d)
    scan = superstability_scan(samples, p["lam"], mu, p["ks"], p.get("tolerance", 0.2))
    centers = list(_cube_param(p, "q_centers", d, Cube(mu, 0)).sites())
    tail = q_tail_estimate(samples, centers, p.get("q_k_max", 4), p["n_list"])
    io.write_csv(out / "superstability.csv", ["k", "estimate", "c_omega"], scan.rows())
    io.write_csv(out / "q_tail.csv", ["N", "count", "frequency", "ci_low", "ci_high"], tail.rows())
    summary = {
        "lam": scan.lam, "c_omega": list(scan.c_omega), "spread": scan.spread,
        "tolerance": scan.tolerance, "stable": scan.stable, "n_samples": tail.n_samples,
        "q_tail_strictly_decreasing": tail.strictly_decreasing, "q_tail_log_slope": tail.log_slope,
        "acceptance_rate": samples.acceptance_rate,
    }
    io.write_json(out / "superstability.json", summary)
    lines = [f"k={k} E[exp(lam W)]={e:.6g} C_omega={c:.4g}" for k, e, c in scan.rows()]
    lines.append(f"spread {scan.spread:.3%} (tolerance {scan.tolerance:.0%})")
    lines += [f"P(Q>{n:g}) = {f:.4f} [{lo:.4f}, {hi:.4f}]" for n, _, f, lo, hi in tail.rows()]
    return RunResult("superstability", summary, lines, scan.stable and tail.strictly_decreasing)


def run_accept(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> RunResult:
    from crystal.acceptance import run_suite

    p = cfg.params
    suite = run_suite(out, jobs=jobs, criteria=p.get("criteria"), determinism=p.get("determinism", True))
    return RunResult("accept", suite.summary(), suite.report_lines(), suite.passed)


RUNNERS = {
    "simulate": run_simulate,
    "converge": run_converge,
    "mu-indep": run_mu_indep,
    "energy-growth": run_energy_growth,
    "lightcone": run_lightcone,
    "gibbs": run_gibbs,
    "superstability": run_superstability,
    "accept": run_accept,
}


def run_experiment(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> RunResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return RUNNERS[cfg.kind](cfg, out, jobs)
