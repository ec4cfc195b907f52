import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_state
from crystal import io
from crystal.lattice import (
    Cube,
    LatticeSpec,
    LatticeState,
    admissible_radii,
    bounding_cube,
    force,
    hamiltonian_on,
    local_energy,
    log_radius,
    neighbors,
    q_functional,
    truncated_force,
)


def test_neighbors():
    assert neighbors((0,)) == [(-1,), (1,)]
    assert neighbors((0, 0)) == [(-1, 0), (1, 0), (0, -1), (0, 1)]
    nb = neighbors((3, -1, 2))
    assert len(nb) == 6
    assert all(sum(abs(a - b) for a, b in zip(j, (3, -1, 2))) == 1 for j in nb)


def test_cube_geometry():
    c = Cube((1, -2), 2)
    assert c.n_sites == 25 and c.side == 5 and c.shape == (5, 5)
    assert c.contains((3, 0)) and not c.contains((4, 0))
    sites = list(c.sites())
    assert len(sites) == 25 and sites[0] == (-1, -4) and sites[1] == (-1, -3)
    assert all(c.site_at(c.index(s)) == s for s in sites)
    assert c.contains_cube(Cube((1, -2), 1)) and not c.contains_cube(Cube((3, -2), 1))
    assert c.distances_from((1, -2))[c.index((3, 0))] == 4
    assert c.to_dict() == {"mu": [1, -2], "n": 2}
    with pytest.raises(IndexError):
        c.index((9, 9))


def test_overlap_and_bounding_cube():
    a, b = Cube((0,), 2), Cube((3,), 2)
    mine, theirs = a.overlap(b)
    assert mine == (slice(3, 5),) and theirs == (slice(0, 2),)
    assert a.overlap(Cube((10,), 1)) is None
    box = bounding_cube((0,), [a, b])
    assert box.contains_cube(a) and box.contains_cube(b) and box.center == (0,)


def test_log_radius_is_one_at_origin():
    assert log_radius((0, 0), 2) == 1.0
    assert list(admissible_radii((0,), 1, 4)) == [2, 3, 4]


def test_spec_derived_quantities():
    s = LatticeSpec.from_coeffs(1, 1, U=[0, 1, 1], V=[0, 1])
    assert (s.sigma1, s.sigma2, s.sigma, s.eta) == (2, 1, 2, 0.5)
    assert s.growth_bound_applies
    assert not LatticeSpec.from_coeffs(3, 1, U=[0, 0, 0, 1]).growth_bound_applies
    with pytest.raises(ValueError):
        LatticeSpec.from_coeffs(1, 1)
    with pytest.raises(ValueError):
        LatticeSpec(0, 1, None, None)


def _three_site(spec, values):
    q = np.array(values, float).reshape(-1, 1)
    return LatticeState(spec, Cube((0,), len(values) // 2), q, np.zeros_like(q))


def test_force_examples(harmonic):
    x = _three_site(harmonic, [0, 1, 0])
    assert force(x, (0,))[0] == -6.0
    assert truncated_force(x, (0,), Cube((-1,), 1))[0] == -4.0
    assert np.all(force(LatticeState.rest(harmonic, Cube((0,), 2)), (1,)) == 0)
    v0 = LatticeSpec.from_coeffs(1, 2, U=[0, 1])
    y = LatticeState(v0, Cube((0,), 0), np.array([[1.0, 0.0]]), np.zeros((1, 2)))
    np.testing.assert_array_equal(force(y, (0,)), [-2.0, 0.0])


def test_truncated_force_rules(quartic):
    x = random_state(quartic, 4, seed=3)
    with pytest.raises(ValueError, match="outside"):
        truncated_force(x, (5,), Cube((0,), 4))
    np.testing.assert_array_equal(truncated_force(x, (0,), Cube((0,), 1)), force(x, (0,)))
    # at the edge only the inward bond survives
    edge = truncated_force(x, (4,), Cube((0,), 4))
    qi, q_in = x.site((4,))[0], x.site((3,))[0]
    np.testing.assert_allclose(edge, -quartic.U.grad(qi) - quartic.V.grad(qi - q_in))


def test_local_energy_examples(harmonic):
    x = _three_site(harmonic, [0, 1, 0])
    assert local_energy(x, Cube((0,), 1)) == 6.0
    assert local_energy(LatticeState.rest(harmonic, Cube((0,), 3)), Cube((1,), 2)) == 5.0
    assert hamiltonian_on(x, Cube((0,), 1)) == 3.0


def test_local_energy_counts_each_bond_once():
    spec = LatticeSpec.from_coeffs(2, 1, V=[0, 1])
    q = np.zeros((3, 3, 1))
    q[1, 1] = 1.0
    x = LatticeState(spec, Cube((0, 0), 1), q, np.zeros_like(q))
    # 9 sites + 4 bonds of energy 1 touching the centre
    assert local_energy(x, Cube((0, 0), 1)) == 13.0


def _embedded_excitation(spec, radius=10):
    q = np.zeros((2 * radius + 1, 1))
    q[radius] = 1.0
    return LatticeState(spec, Cube((0,), radius), q, np.zeros_like(q))


def test_q_functional_examples(harmonic):
    assert q_functional(LatticeState.rest(harmonic, Cube((0,), 8)), [(0,), (3,)], 4) == 1.0
    assert q_functional(LatticeState.rest(harmonic, Cube((0,), 8)), [(0,)], 8) == 1.0
    x = _embedded_excitation(harmonic)
    # k must exceed log(e + 0) = 1, so the 6/3 ratio at k = 1 is excluded
    assert q_functional(x, [(0,)], 3) == pytest.approx(8 / 5)
    with pytest.raises(ValueError, match="admissible"):
        q_functional(x, [(0,)], 1)


def test_q_functional_matches_brute_force(quartic):
    x = random_state(quartic, 12, seed=5)
    mus = [(m,) for m in range(-4, 5)]
    brute = max(
        local_energy(x, Cube(mu, k)) / (2 * k + 1)
        for mu in mus
        for k in admissible_radii(mu, 1, 5)
    )
    assert q_functional(x, mus, 5) == pytest.approx(brute, rel=1e-12)


def test_q_functional_matches_brute_force_2d():
    spec = LatticeSpec.from_coeffs(2, 2, U=[0, 1, 0.5], V=[0, 1])
    x = random_state(spec, 6, seed=2)
    mus = list(itertools.product(range(-1, 2), repeat=2))
    brute = max(
        local_energy(x, Cube(mu, k)) / (2 * k + 1) ** 2
        for mu in mus
        for k in admissible_radii(mu, 2, 4)
    )
    assert q_functional(x, mus, 4) == pytest.approx(brute, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4), st.floats(0.1, 3.0))
def test_energy_floor_and_monotone_in_k(seed, k, scale):
    spec = LatticeSpec.from_coeffs(1, 2, U=[0, 1, 1], V=[0, 1])
    x = random_state(spec, 6, seed=seed, scale=scale)
    w_k = local_energy(x, Cube((1,), k))
    assert w_k >= (2 * k + 1)
    assert local_energy(x, Cube((1,), k + 1)) >= w_k


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_force_is_minus_energy_gradient(seed):
    spec = LatticeSpec.from_coeffs(1, 2, U=[0.2, 1, 0.3], V=[0, 1, 0.5])
    x = random_state(spec, 5, seed=seed)
    big = Cube((0,), 5)
    i = (2,)
    h = 1e-6
    fd = []
    for a in range(2):
        vals = []
        for sign in (1, -1):
            q = x.q.copy()
            q[big.index(i)][a] += sign * h
            vals.append(local_energy(LatticeState(spec, big, q, x.p), big))
        fd.append(-(vals[0] - vals[1]) / (2 * h))
    f = force(x, i)
    assert np.linalg.norm(f - fd) <= 1e-6 * max(np.linalg.norm(f), 1.0)


def test_truncated_force_equals_force_once_neighbours_inside(quartic):
    x = random_state(quartic, 6, seed=9)
    for n in range(1, 5):
        np.testing.assert_array_equal(truncated_force(x, (2,), Cube((2,), n)), force(x, (2,)))


def test_state_validation_and_background(harmonic):
    with pytest.raises(ValueError, match="finite"):
        LatticeState(harmonic, Cube((0,), 0), np.array([[np.inf]]), np.zeros((1, 1)))
    x = LatticeState(harmonic, Cube((0,), 1), np.ones((3, 1)), np.zeros((3, 1)), q_background=[0.5])
    q, _ = x.values_on(Cube((0,), 2))
    np.testing.assert_array_equal(q.ravel(), [0.5, 1, 1, 1, 0.5])
    assert x.site((7,))[0][0] == 0.5
    y = x.replace_on(Cube((3,), 0), np.array([[2.0]]), np.array([[0.0]]))
    assert y.support.contains((3,)) and y.site((3,))[0][0] == 2.0 and y.site((2,))[0][0] == 0.5
    with pytest.raises(ValueError):
        x.q[0, 0] = 3.0


def test_state_csv_roundtrip(tmp_path):
    spec = LatticeSpec.from_coeffs(2, 2, U=[0, 1], V=[0, 1])
    x = random_state(spec, 2, seed=1, center=(1, -1))
    path = io.write_state_csv(tmp_path / "x.csv", x)
    header = path.read_text().splitlines()[0]
    assert header == "site_0,site_1,q_0,q_1,p_0,p_1"
    assert io.read_state_csv(path, spec) == x
    bg = LatticeState(spec, x.support, x.q, x.p, q_background=[1.0, -2.0])
    p2 = io.write_state_csv(tmp_path / "bg.csv", bg)
    assert p2.read_text().splitlines()[-1].startswith("background,background,1,-2")
    assert io.read_state_csv(p2, spec) == bg


def test_state_csv_rejects_non_cube(tmp_path):
    spec = LatticeSpec.from_coeffs(1, 1, U=[0, 1])
    (tmp_path / "bad.csv").write_text("site_0,q_0,p_0\n0,1,0\n1,1,0\n")
    with pytest.raises(ValueError, match="cube"):
        io.read_state_csv(tmp_path / "bad.csv", spec)


def test_fmt_is_diff_stable():
    assert io.fmt(0.1) == "0.10000000000000001"
    assert io.fmt(True) == "true" and io.fmt(np.int64(3)) == "3"
    assert io.fmt(float("nan")) == "nan" and io.fmt(-float("inf")) == "-inf"
