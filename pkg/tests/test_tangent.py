import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_state
from crystal.dynamics import IntegratorConfig, integrate_partial
from crystal.lattice import Cube, LatticeSpec, LatticeState, force
from crystal.tangent import (
    FrontReachedBoundary,
    Observable,
    check_alpha,
    cone_curve,
    cone_exponent_threshold,
    coupling_matrix,
    fit_front,
    full_jacobian,
    integrate_tangent,
    light_cone_scan,
    poisson_bracket,
    series_bound,
    symplecticity_defect,
)

CFG = IntegratorConfig(1e-3, 1.0)
OSC = LatticeSpec.from_coeffs(1, 1, U=[0, 1])


def test_coupling_matrix_examples(harmonic):
    x = random_state(harmonic, 3, seed=0)
    assert coupling_matrix(x, (0,), (0,))[0, 0] == -6.0
    assert coupling_matrix(x, (0,), (1,))[0, 0] == 2.0
    assert coupling_matrix(x, (0,), (-1,))[0, 0] == 2.0
    assert coupling_matrix(x, (0,), (2,))[0, 0] == 0.0
    flat = LatticeSpec.from_coeffs(1, 1, U=[0, 0, 1], V=[0, 0, 1])
    rest = LatticeState.rest(flat, Cube((0,), 2))
    assert np.all(coupling_matrix(rest, (0,), (0,)) == 0)
    assert np.all(coupling_matrix(rest, (0,), (1,)) == 0)


def test_coupling_matrix_box_edge(harmonic):
    x = random_state(harmonic, 3, seed=0)
    box = Cube((0,), 1)
    assert coupling_matrix(x, (1,), (1,), box)[0, 0] == -4.0
    with pytest.raises(ValueError):
        coupling_matrix(x, (2,), (1,), box)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_coupling_matrix_is_force_jacobian(seed):
    spec = LatticeSpec.from_coeffs(2, 2, U=[0, 1, 0.5], V=[0, 1, 0.3])
    x = random_state(spec, 2, seed=seed)
    j = (0, 0)
    for h in [(0, 0), (1, 0), (0, -1)]:
        b = coupling_matrix(x, j, h)
        np.testing.assert_array_equal(b, b.T)
        fd = np.zeros((2, 2))
        for a in range(2):
            ends = []
            for sign in (1, -1):
                q = x.q.copy()
                q[x.support.index(h)][a] += sign * 1e-6
                ends.append(force(LatticeState(spec, x.support, q, x.p), j))
            fd[:, a] = (ends[0] - ends[1]) / 2e-6
        np.testing.assert_allclose(b, fd, atol=1e-6 * max(1, np.abs(b).max()))


def test_tangent_starts_at_identity(quartic):
    x0 = random_state(quartic, 4, seed=1)
    ser = integrate_tangent(x0, (1,), x0.support, CFG, record_steps=[0])
    f0 = ser.at(0.0)
    np.testing.assert_array_equal(f0.block((1,)), np.eye(2))
    for j in x0.support.sites():
        if j != (1,):
            assert np.all(f0.block(j) == 0)
    with pytest.raises(ValueError, match="outside"):
        integrate_tangent(x0, (9,), x0.support, CFG)


def test_uncoupled_fundamental_matrix():
    t_end = math.pi / math.sqrt(2)
    dt = t_end / round(t_end / 1e-3)
    x0 = LatticeState(OSC, Cube((0,), 0), np.array([[0.3]]), np.array([[0.2]]))
    cfg = IntegratorConfig(dt, t_end, record_stride=100)
    ser = integrate_tangent(x0, (0,), x0.support, cfg)
    np.testing.assert_allclose(ser.blocks[-1][0], -np.eye(2), atol=1e-4)
    w = math.sqrt(2)
    for k in range(len(ser)):
        t = ser.times[k]
        exact = [[math.cos(w * t), math.sin(w * t) / w], [-w * math.sin(w * t), math.cos(w * t)]]
        np.testing.assert_allclose(ser.blocks[k][0], exact, atol=1e-5)


def test_tangent_matches_finite_differences():
    spec = LatticeSpec.from_coeffs(1, 2, U=[0, 1, 1], V=[0, 1, 0.5])
    x0 = random_state(spec, 5, seed=3, scale=0.8)
    box, src = x0.support, (1,)
    block = integrate_tangent(x0, src, box, CFG).blocks[-1]
    eps = 1e-6
    for col in range(4):
        ends = []
        for sign in (1, -1):
            q, p = x0.q.copy(), x0.p.copy()
            (q if col < 2 else p)[box.index(src)][col % 2] += sign * eps
            end = integrate_partial(LatticeState(spec, box, q, p), box, CFG)
            ends.append(np.concatenate([end.q[-1], end.p[-1]], axis=-1))
        fd = (ends[0] - ends[1]) / (2 * eps)
        assert np.abs(fd - block[..., col]).max() <= 1e-4


def test_full_jacobian_is_symplectic():
    spec = LatticeSpec.from_coeffs(2, 2, U=[0, 1, 1], V=[0, 1, 0.5])
    x0 = random_state(spec, 1, seed=5)
    m = full_jacobian(x0, x0.support, IntegratorConfig(1e-2, 1.0))
    assert m.shape == (36, 36)
    assert symplecticity_defect(m) <= 1e-8
    assert abs(np.linalg.det(m) - 1) <= 1e-6


def test_full_jacobian_columns_match_tangent(quartic):
    x0 = random_state(quartic, 3, seed=2)
    box = x0.support
    m = full_jacobian(x0, box, CFG)
    ser = integrate_tangent(x0, (1,), box, CFG)
    n, c = box.n_sites, box.index((1,))[0]
    blocks = ser.blocks[-1]
    np.testing.assert_allclose(m[:n, c], blocks[:, 0, 0], atol=1e-13)
    np.testing.assert_allclose(m[n:, n + c], blocks[:, 1, 1], atol=1e-13)


def test_poisson_bracket_examples(quartic):
    x0 = random_state(quartic, 3, seed=4)
    ser = integrate_tangent(x0, (0,), x0.support, CFG, record_steps=[0])
    q, p = Observable.position(1), Observable.momentum(1)
    assert poisson_bracket(q, p, (0,), (0,), 0.0, ser) == 1.0
    assert poisson_bracket(p, q, (0,), (0,), 0.0, ser) == -1.0
    assert poisson_bracket(q, q, (0,), (0,), 0.0, ser) == 0.0
    assert poisson_bracket(q, p, (0,), (1,), 0.0, ser) == 0.0
    with pytest.raises(ValueError, match="outside"):
        poisson_bracket(q, p, (0,), (7,), 0.0, ser)
    with pytest.raises(ValueError, match="source"):
        poisson_bracket(q, p, (1,), (1,), 0.0, ser)


def test_poisson_bracket_matches_flow_differences(quartic):
    x0 = random_state(quartic, 4, seed=8)
    box, i, j = x0.support, (0,), (2,)
    traj = integrate_partial(x0, box, CFG)
    ser = integrate_tangent(x0, i, box, CFG)
    f = Observable(lambda x: x[0] ** 2 + math.sin(x[1]))
    g = Observable(lambda x: x[0] * x[1] + x[0] ** 3)
    got = poisson_bracket(f, g, i, j, 1.0, ser, traj)
    assert got == pytest.approx(poisson_bracket(f, g, i, j, 1.0, ser), rel=1e-12)
    # {f, G} = f_q dG/dp_i - f_p dG/dq_i with G = g(x_j(t))
    eps = 1e-6

    def G(dq, dp):
        q, p = x0.q.copy(), x0.p.copy()
        q[box.index(i)] += dq
        p[box.index(i)] += dp
        end = integrate_partial(LatticeState(quartic, box, q, p), box, CFG)
        return g(np.concatenate([end.q[-1][box.index(j)], end.p[-1][box.index(j)]]))

    dg_dq = (G(eps, 0) - G(-eps, 0)) / (2 * eps)
    dg_dp = (G(0, eps) - G(0, -eps)) / (2 * eps)
    df = f.gradient(np.concatenate([x0.q[box.index(i)], x0.p[box.index(i)]]))
    assert got == pytest.approx(df[0] * dg_dp - df[1] * dg_dq, rel=1e-5, abs=1e-8)


def test_alpha_validation(quartic):
    assert cone_exponent_threshold(quartic) == pytest.approx(7 / 3)
    with pytest.raises(ValueError, match="strict"):
        check_alpha(quartic, 7 / 3)
    check_alpha(quartic, 2.34)
    with pytest.raises(ValueError):
        cone_exponent_threshold(LatticeSpec.from_coeffs(4, 1, U=[0, 0, 1]))


def test_cone_curve():
    assert cone_curve(1.0, 4) == 0.0 and cone_curve(0.5, 4) == 0.0
    assert cone_curve(math.e, 4) == pytest.approx(math.e)


def test_light_cone_at_zero_and_uncoupled():
    spec_u = LatticeSpec.from_coeffs(1, 1, U=[0, 1, 1])
    x0 = random_state(spec_u, 10, seed=0)
    cone = light_cone_scan(x0, (0,), x0.support, [1.0, 2.0], 1e-8, CFG, alpha=4)
    assert cone.r == [0, 0]
    spec = LatticeSpec.from_coeffs(1, 1, U=[0, 1, 1], V=[0, 1])
    y0 = random_state(spec, 20, seed=0)
    cone = light_cone_scan(y0, (0,), y0.support, [0.0, 1.0], 1e-8, CFG, alpha=4)
    assert cone.r[0] == 0 and cone.r[1] > 0
    assert {row[1] for row in cone.profile_rows() if row[0] == 0.0} <= set(range(21))


def test_light_cone_guard(quartic):
    x0 = random_state(quartic, 8, seed=0)
    with pytest.raises(FrontReachedBoundary, match="larger box"):
        light_cone_scan(x0, (0,), x0.support, [1.0, 4.0], 1e-8, CFG, alpha=4)


def test_harmonic_front_slope_is_seed_independent(harmonic):
    slopes = []
    for seed in range(3):
        x0 = random_state(harmonic, 40, seed=seed)
        cone = light_cone_scan(x0, (0,), x0.support, [1.0, 2.0, 4.0], 1e-8, CFG, alpha=4)
        assert all(b >= a for a, b in zip(cone.r, cone.r[1:]))
        assert cone.off_front_ok()
        slopes.append(fit_front(cone.t_list, cone.r, 4).slope)
    assert np.isfinite(slopes[0]) and slopes[0] > 0
    assert max(slopes) - min(slopes) <= 1e-12


def test_fit_front_reports_vanishing_curve():
    fit = fit_front([1.0, 2.0, 4.0], [7, 9, 13], 4.0)
    assert fit.slope == pytest.approx(2.0) and fit.intercept == pytest.approx(5.0)
    assert not fit.below and fit.violations == (1.0,)
    assert fit.c_fit == pytest.approx(max(9 / cone_curve(2, 4), 13 / cone_curve(4, 4)))
    assert fit_front([2.0, 4.0], [1, 2], 4.0).below


def _mp_series(i_norm, n0, t, q, eta, C=1):
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for n in range(max(n0, 1), n0 + 400):
        total += (C * mpmath.mpf(t) ** 2 * mpmath.log(mpmath.e + i_norm + n) ** eta
                  * mpmath.mpf(q) ** eta / mpmath.mpf(n) ** 2) ** n
    return (1 + mpmath.mpf(t)) * total


def test_series_bound_matches_high_precision(quartic):
    got = series_bound((0,), (10,), 1.0, 1.0, quartic, C=1.0)
    oracle = _mp_series(0, 10, 1, 1, mpmath.mpf(1) / 2)
    assert got == pytest.approx(float(oracle), rel=1e-12)
    got = series_bound((3,), (-2,), 2.0, 1.7, quartic, C=0.5)
    assert got == pytest.approx(float(_mp_series(3, 5, 2, 1.7, mpmath.mpf(1) / 2, C=mpmath.mpf(1) / 2)), rel=1e-12)


def test_series_bound_harmonic_and_edge_cases(harmonic, quartic):
    assert harmonic.eta == 0
    direct = 2 * sum((1.0 / n**2) ** n for n in range(4, 60))
    assert series_bound((0,), (4,), 1.0, 5.0, harmonic) == pytest.approx(direct, rel=1e-13)
    assert series_bound((0,), (3,), 0.0, 1.0, quartic) == 0.0
    assert series_bound((0,), (0,), 0.0, 1.0, quartic) == 1.0
    assert series_bound((0,), (1,), 3.0, 1.0, quartic) == math.inf
    with pytest.raises(ValueError):
        series_bound((0,), (1,), 1.0, 0.5, quartic)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 30), st.floats(0.05, 2.0), st.floats(1.0, 5.0))
def test_series_bound_monotonicity(dist, t, q):
    spec = LatticeSpec.from_coeffs(1, 1, U=[0, 1, 1], V=[0, 1])
    b = series_bound((0,), (dist,), t, q, spec)
    if not math.isfinite(b):
        return
    assert series_bound((0,), (dist + 1,), t, q, spec) <= b
    assert series_bound((0,), (dist,), t * 1.1, q, spec) >= b
    assert series_bound((0,), (dist,), t, q * 1.1, spec) >= b
