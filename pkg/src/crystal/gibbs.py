"""Finite-volume Gibbs sampling with free boundary conditions.

Positions come from random-scan single-site Metropolis on
``exp(-beta * H_box)``; momenta are drawn exactly. Also holds the empirical
estimators for the exponential moments of the local energy and the tail of Q.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numba
import numpy as np
from scipy.special import logsumexp
from scipy.stats import binomtest

from crystal.lattice import (
    Cube,
    LatticeSpec,
    LatticeState,
    bounding_cube,
    q_functional_fields,
)

TARGET_ACCEPTANCE = 0.4
_TUNE_INTERVAL = 25
_BLOCK_UPDATES = 1 << 16


@dataclass(frozen=True)
class GibbsConfig:
    beta: float
    box: Cube
    sweeps: int
    burn_in: int = 0
    proposal_scale: float = 1.0
    seed: int = 0
    thin: int = 1
    tune: bool = True

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (self.sweeps > self.burn_in >= 0):
            raise ValueError(f"need sweeps > burn_in >= 0, got {self.sweeps}, {self.burn_in}")
        if not self.proposal_scale > 0:
            raise ValueError(f"proposal_scale must be positive, got {self.proposal_scale}")
        if self.thin < 1:
            raise ValueError(f"thin must be >= 1, got {self.thin}")

    @property
    def n_samples(self) -> int:
        return (self.sweeps - self.burn_in) // self.thin


@numba.njit(cache=True)
def _poly(c, s):
    acc = 0.0
    for k in range(c.shape[0] - 1, -1, -1):
        acc = acc * s + c[k]
    return acc


@numba.njit(cache=True)
def _site_energy(q, nbr, uc, vc, i, x):
    nu = q.shape[1]
    s = 0.0
    for a in range(nu):
        s += x[a] * x[a]
    e = _poly(uc, s)
    if vc.shape[0] > 0:
        for m in range(nbr.shape[1]):
            j = nbr[i, m]
            if j < 0:
                continue
            s = 0.0
            for a in range(nu):
                diff = x[a] - q[j, a]
                s += diff * diff
            e += _poly(vc, s)
    return e


@numba.njit(cache=True)
def _metropolis_block(
    q, nbr, uc, vc, beta, scale, sites, z, u, first_sweep, n_sweeps, burn_in, thin, out, n_rec
):
    n, nu = q.shape
    trial = np.empty(nu)
    accepted = 0
    k = 0
    for sw in range(n_sweeps):
        for _ in range(n):
            i = sites[k]
            for a in range(nu):
                trial[a] = q[i, a] + scale * z[k, a]
            de = _site_energy(q, nbr, uc, vc, i, trial) - _site_energy(q, nbr, uc, vc, i, q[i])
            if de <= 0.0 or u[k] < math.exp(-beta * de):
                for a in range(nu):
                    q[i, a] = trial[a]
                accepted += 1
            k += 1
        done = first_sweep + sw + 1
        if done > burn_in and (done - burn_in) % thin == 0 and n_rec < out.shape[0]:
            out[n_rec] = q
            n_rec += 1
    return accepted, n_rec


def neighbor_table(box: Cube) -> np.ndarray:
    """Flat (C-order) neighbour indices inside ``box``; -1 marks a missing bond."""
    d = box.d
    idx = np.arange(box.n_sites).reshape(box.shape)
    table = -np.ones((box.n_sites, 2 * d), dtype=np.int64)
    for ax in range(d):
        for m, step in enumerate((-1, 1)):
            shifted = np.full(box.shape, -1, dtype=np.int64)
            src = [slice(None)] * d
            dst = [slice(None)] * d
            if step == -1:
                dst[ax], src[ax] = slice(1, None), slice(None, -1)
            else:
                dst[ax], src[ax] = slice(None, -1), slice(1, None)
            shifted[tuple(dst)] = idx[tuple(src)]
            table[:, 2 * ax + m] = shifted.ravel()
    return table


def _check_normalizable(spec: LatticeSpec):
    if spec.U is None:
        msg = "sampling without a one-body potential U is rejected: "
        if spec.V is not None and spec.V.sigma == 1:
            msg += "for the harmonic interaction there are no Gibbs measures in d=1,2"
        else:
            msg += "the free-boundary measure is translation invariant and not normalizable"
        raise ValueError(msg)


@dataclass(frozen=True, eq=False)
class GibbsSamples:
    """Recorded configurations of one chain; ``q, p`` have shape ``(n,) + box.shape + (nu,)``."""

    spec: LatticeSpec
    config: GibbsConfig
    q: np.ndarray
    p: np.ndarray
    acceptance_rate: float
    proposal_scale: float

    def __len__(self):
        return self.q.shape[0]

    def state(self, k: int) -> LatticeState:
        return LatticeState(self.spec, self.config.box, self.q[k], self.p[k])

    def fields_on(self, cube: Cube) -> tuple[np.ndarray, np.ndarray]:
        """Batched coordinates on ``cube``; sites outside the box are at rest."""
        shape = (len(self),) + cube.shape + (self.spec.nu,)
        q, p = np.zeros(shape), np.zeros(shape)
        ov = cube.overlap(self.config.box)
        if ov is not None:
            mine, theirs = ov
            q[(slice(None),) + mine] = self.q[(slice(None),) + theirs]
            p[(slice(None),) + mine] = self.p[(slice(None),) + theirs]
        return q, p

    def summary(self) -> dict:
        return {
            "beta": self.config.beta,
            "seed": self.config.seed,
            "sweeps": self.config.sweeps,
            "burn_in": self.config.burn_in,
            "thin": self.config.thin,
            "acceptance_rate": self.acceptance_rate,
            "proposal_scale": self.proposal_scale,
        }


def gibbs_chain(spec: LatticeSpec, cfg: GibbsConfig) -> GibbsSamples:
    """Run one Metropolis chain and record every ``thin``-th sweep after burn-in."""
    _check_normalizable(spec)
    if cfg.box.d != spec.d:
        raise ValueError("box dimension does not match the lattice")
    box, nu = cfg.box, spec.nu
    n = box.n_sites
    ss_q, ss_p = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(ss_q)
    nbr = neighbor_table(box)
    uc = np.asarray(spec.U.coeffs, float)
    vc = np.zeros(0) if spec.V is None else np.asarray(spec.V.coeffs, float)
    q = np.zeros((n, nu))
    out = np.zeros((cfg.n_samples, n, nu))
    scale = float(cfg.proposal_scale)
    n_rec = 0
    acc_post = 0
    done = 0
    block = max(1, _BLOCK_UPDATES // n)
    while done < cfg.sweeps:
        if done < cfg.burn_in:
            m = min(_TUNE_INTERVAL if cfg.tune else block, cfg.burn_in - done)
        else:
            m = min(block, cfg.sweeps - done)
        sites = rng.integers(0, n, size=m * n)
        z = rng.standard_normal((m * n, nu))
        u = rng.random(m * n)
        acc, n_rec = _metropolis_block(
            q, nbr, uc, vc, float(cfg.beta), scale, sites, z, u,
            done, m, cfg.burn_in, cfg.thin, out, n_rec,
        )
        if done < cfg.burn_in:
            if cfg.tune:
                scale *= math.exp(2.0 * (acc / (m * n) - TARGET_ACCEPTANCE))
        else:
            acc_post += acc
        done += m
    rate = acc_post / ((cfg.sweeps - cfg.burn_in) * n)
    if not 0.2 <= rate <= 0.6:
        warnings.warn(f"Metropolis acceptance rate {rate:.3f} outside [0.2, 0.6]", stacklevel=2)
    prng = np.random.default_rng(ss_p)
    p = prng.standard_normal(out.shape) / math.sqrt(cfg.beta)
    shape = (cfg.n_samples,) + box.shape + (nu,)
    return GibbsSamples(spec, cfg, out.reshape(shape), p.reshape(shape), rate, scale)


def sample_gibbs(spec: LatticeSpec, cfg: GibbsConfig) -> LatticeState:
    """Final configuration of a chain, with exactly drawn momenta."""
    single = replace(cfg, thin=cfg.sweeps - cfg.burn_in)
    return gibbs_chain(spec, single).state(0)


def _batched_fields(samples, cube: Cube):
    if isinstance(samples, GibbsSamples):
        return samples.spec, *samples.fields_on(cube)
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    qs, ps = zip(*(s.values_on(cube) for s in samples))
    return samples[0].spec, np.stack(qs), np.stack(ps)


def local_energies(samples, cube: Cube) -> np.ndarray:
    spec, q, p = _batched_fields(samples, cube)
    return np.asarray(spec.field_energy(q, p), dtype=float)


def superstability_estimate(samples, lam: float, mu, k: int) -> tuple[float, float]:
    """Empirical ``E[exp(lam * W_{mu,k})]`` and ``C = log(estimate) / (2k+1)^d``.

    Raises:
        OverflowError: if ``lam`` is not small enough for a finite estimate.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    cube = Cube(mu, k)
    w = local_energies(samples, cube)
    log_est = float(logsumexp(lam * w) - math.log(w.size))
    if log_est > 700.0:
        raise OverflowError(f"lambda={lam} not small enough: log-moment {log_est:.1f}")
    return math.exp(log_est), log_est / cube.n_sites


@dataclass(frozen=True)
class SuperstabilityScan:
    lam: float
    ks: tuple[int, ...]
    estimates: tuple[float, ...]
    c_omega: tuple[float, ...]
    spread: float
    tolerance: float

    @property
    def stable(self) -> bool:
        return self.spread <= self.tolerance

    def rows(self):
        return [(k, e, c) for k, e, c in zip(self.ks, self.estimates, self.c_omega)]


def superstability_scan(samples, lam: float, mu, ks: Sequence[int], tolerance=0.2):
    """Fitted ``C_omega`` for each radius and its relative spread about the mean."""
    est, cs = zip(*(superstability_estimate(samples, lam, mu, k) for k in ks))
    mean = float(np.mean(cs))
    spread = float(np.max(np.abs(np.array(cs) - mean)) / mean)
    return SuperstabilityScan(lam, tuple(ks), tuple(est), tuple(cs), spread, tolerance)


@dataclass(frozen=True)
class QTail:
    n_values: tuple[float, ...]
    counts: tuple[int, ...]
    n_samples: int
    frequencies: tuple[float, ...]
    ci_low: tuple[float, ...]
    ci_high: tuple[float, ...]
    log_slope: float

    @property
    def decreasing(self) -> bool:
        """Frequencies non-increasing in N, with an overall strict decrease."""
        f = self.frequencies
        return all(b <= a for a, b in zip(f, f[1:])) and f[-1] < f[0]

    @property
    def strictly_decreasing(self) -> bool:
        f = self.frequencies
        return all(b < a for a, b in zip(f, f[1:]))

    @property
    def log_linear_decay(self) -> bool:
        return math.isfinite(self.log_slope) and self.log_slope < 0

    def rows(self):
        return list(
            zip(self.n_values, self.counts, self.frequencies, self.ci_low, self.ci_high)
        )


def q_values(samples, mu_range, k_max: int) -> np.ndarray:
    """Q of every sample, scanned over ``mu_range`` and radii up to ``k_max``."""
    mu_range = list(mu_range)
    spec = samples.spec if isinstance(samples, GibbsSamples) else list(samples)[0].spec
    region = bounding_cube(mu_range[0], [Cube(mu, k_max) for mu in mu_range])
    _, q, p = _batched_fields(samples, region)
    return np.atleast_1d(q_functional_fields(spec, region, q, p, mu_range, k_max))


def q_tail_estimate(samples, mu_range, k_max: int, n_list: Sequence[float]) -> QTail:
    """Empirical ``P(Q > N)`` with 95% Wilson intervals for each ``N``."""
    qv = q_values(samples, mu_range, k_max)
    if qv.size < 1000:
        raise ValueError(f"need at least 1000 samples, got {qv.size}")
    counts, freq, lo, hi = [], [], [], []
    for big_n in n_list:
        c = int(np.count_nonzero(qv > big_n))
        ci = binomtest(c, qv.size).proportion_ci(confidence_level=0.95, method="wilson")
        counts.append(c)
        freq.append(c / qv.size)
        lo.append(float(ci.low))
        hi.append(float(ci.high))
    mask = np.array(freq) > 0
    if mask.sum() >= 2:
        slope = float(np.polyfit(np.asarray(n_list, float)[mask], np.log(np.array(freq)[mask]), 1)[0])
    else:
        slope = float("-inf") if mask.sum() < len(freq) else float("nan")
    return QTail(tuple(float(v) for v in n_list), tuple(counts), int(qv.size), tuple(freq), tuple(lo), tuple(hi), slope)
