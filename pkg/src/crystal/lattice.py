"""Lattice geometry, system states, forces and local energy functionals.

Sites are integer tuples in ``Z^d`` with the l1 distance. Every array-level
routine works on fields laid out on a :class:`Cube` with shape
``(2k+1,)*d + (nu,)``; neighbour sums inside such a field are truncated at its
faces, which is exactly the force of a partial dynamics with empty boundary
conditions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from crystal.potentials import PolynomialPotential

Site = tuple[int, ...]


def as_site(i, d: int | None = None) -> Site:
    site = tuple(int(v) for v in np.atleast_1d(i))
    if d is not None and len(site) != d:
        raise ValueError(f"site {site} does not have dimension {d}")
    return site


def l1_norm(i) -> int:
    return int(sum(abs(v) for v in as_site(i)))


def log_radius(mu, d: int) -> float:
    """``log(e + |mu|)**(1/d)`` with the l1 norm; exactly 1 at the origin."""
    return math.log(math.e + l1_norm(mu)) ** (1.0 / d)


def neighbors(i) -> list[Site]:
    """The ``2d`` sites at l1 distance 1, ordered axis by axis (minus first)."""
    site = as_site(i)
    out = []
    for axis in range(len(site)):
        for step in (-1, 1):
            j = list(site)
            j[axis] += step
            out.append(tuple(j))
    return out


@dataclass(frozen=True)
class Cube:
    """The cube of the given center and side ``2 * radius + 1``."""

    center: Site
    radius: int

    def __post_init__(self):
        object.__setattr__(self, "center", as_site(self.center))
        if int(self.radius) < 0:
            raise ValueError(f"cube radius must be >= 0, got {self.radius}")
        object.__setattr__(self, "radius", int(self.radius))

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.d

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.center) - self.radius

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.center) + self.radius

    @property
    def n_sites(self) -> int:
        return self.side**self.d

    def contains(self, i) -> bool:
        site = as_site(i, self.d)
        return all(abs(a - c) <= self.radius for a, c in zip(site, self.center))

    def contains_cube(self, other: Cube) -> bool:
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def index(self, i) -> tuple[int, ...]:
        """Array index of site ``i`` in a field laid out on this cube."""
        if not self.contains(i):
            raise IndexError(f"site {as_site(i)} is outside {self}")
        return tuple(int(a - lo) for a, lo in zip(as_site(i), self.lo))

    def site_at(self, index) -> Site:
        return tuple(int(a + lo) for a, lo in zip(index, self.lo))

    def sites(self) -> Iterator[Site]:
        ranges = [range(lo, hi + 1) for lo, hi in zip(self.lo, self.hi)]
        return (tuple(s) for s in itertools.product(*ranges))

    def distances_from(self, i) -> np.ndarray:
        """Integer array of l1 distances from ``i`` to every site of the cube."""
        site = as_site(i, self.d)
        grids = np.meshgrid(
            *[np.arange(lo, hi + 1) - s for lo, hi, s in zip(self.lo, self.hi, site)],
            indexing="ij",
        )
        return sum(np.abs(g) for g in grids)

    def overlap(self, other: Cube) -> tuple[tuple[slice, ...], tuple[slice, ...]] | None:
        """Slices ``(in_self, in_other)`` selecting the common sites, or None."""
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(lo > hi):
            return None
        mine = tuple(slice(int(a - s), int(b - s + 1)) for a, b, s in zip(lo, hi, self.lo))
        theirs = tuple(slice(int(a - s), int(b - s + 1)) for a, b, s in zip(lo, hi, other.lo))
        return mine, theirs

    def to_dict(self) -> dict:
        return {"mu": list(self.center), "n": self.radius}


def bounding_cube(center, cubes: Iterable[Cube]) -> Cube:
    """Smallest cube of the given center containing every cube in ``cubes``."""
    c = np.array(as_site(center))
    r = 0
    for cube in cubes:
        r = max(r, int(np.max(np.abs(cube.lo - c))), int(np.max(np.abs(cube.hi - c))))
    return Cube(tuple(c), r)


@dataclass(frozen=True)
class LatticeSpec:
    """Lattice dimension, oscillator dimension and the two potentials.

    ``U`` or ``V`` may be None, meaning the term is absent.
    """

    d: int
    nu: int
    U: PolynomialPotential | None
    V: PolynomialPotential | None

    def __post_init__(self):
        if self.d < 1 or self.nu < 1:
            raise ValueError(f"need d >= 1 and nu >= 1, got d={self.d}, nu={self.nu}")
        if self.U is None and self.V is None:
            raise ValueError("at least one of U, V must be present")
        for name, pot in (("U", self.U), ("V", self.V)):
            if pot is not None and pot.nu != self.nu:
                raise ValueError(f"{name} has nu={pot.nu}, lattice has nu={self.nu}")

    @property
    def sigma1(self) -> int | None:
        return None if self.U is None else self.U.sigma

    @property
    def sigma2(self) -> int | None:
        return None if self.V is None else self.V.sigma

    @property
    def sigma(self) -> int:
        return max(s for s in (self.sigma1, self.sigma2) if s is not None)

    @property
    def eta(self) -> float:
        return (self.sigma - 1) / self.sigma

    @property
    def growth_bound_applies(self) -> bool:
        """Whether ``eta * d < 2`` (reported, never enforced)."""
        return self.eta * self.d < 2

    def to_config(self) -> dict:
        return {
            "d": self.d,
            "nu": self.nu,
            "U": None if self.U is None else self.U.to_config(),
            "V": None if self.V is None else self.V.to_config(),
        }

    @classmethod
    def from_coeffs(cls, d: int, nu: int, U=None, V=None) -> LatticeSpec:
        return cls(
            d,
            nu,
            None if U is None else PolynomialPotential(tuple(U), nu),
            None if V is None else PolynomialPotential(tuple(V), nu),
        )

    # -- array-level machinery on a cube-shaped field -------------------------

    def _lattice_axes(self, q: np.ndarray) -> range:
        # Lattice axes are the d axes immediately before the trailing nu axis.
        return range(q.ndim - 1 - self.d, q.ndim - 1)

    def force_field(self, q: np.ndarray) -> np.ndarray:
        """Force on every site of a field, neighbour sum truncated at the faces."""
        f = -self.U.grad(q) if self.U is not None else np.zeros_like(q)
        if self.V is not None:
            for ax in self._lattice_axes(q):
                n = q.shape[ax]
                lower = _take(q, ax, 0, n - 1)
                upper = _take(q, ax, 1, n)
                g = self.V.grad(upper - lower)
                _take(f, ax, 0, n - 1)[...] += g
                _take(f, ax, 1, n)[...] -= g
        return f

    def coupling_hessians(self, q: np.ndarray):
        """Hessians of ``U`` per site and of ``V`` per bond, for :meth:`apply_coupling`."""
        hu = None if self.U is None else self.U.hessian(q)
        hv = []
        if self.V is not None:
            for ax in self._lattice_axes(q):
                n = q.shape[ax]
                hv.append((ax, self.V.hessian(_take(q, ax, 0, n - 1) - _take(q, ax, 1, n))))
        return hu, hv

    def apply_coupling(self, q: np.ndarray, dq: np.ndarray, hessians=None) -> np.ndarray:
        """Apply the Hessian-built coupling ``sum_h B_{j,h} dq_h`` on a field.

        ``dq`` has shape ``q.shape + (m,)``: ``m`` tangent columns per site.
        """
        hu, hv = self.coupling_hessians(q) if hessians is None else hessians
        out = np.zeros_like(dq)
        if hu is not None:
            out -= hu @ dq
        for ax, h in hv:
            n = q.shape[ax]
            t = h @ (_take(dq, ax, 0, n - 1) - _take(dq, ax, 1, n))
            _take(out, ax, 0, n - 1)[...] -= t
            _take(out, ax, 1, n)[...] += t
        return out

    def energy_parts(self, q: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Per-site energy ``|p|^2/2 + U(q) + 1`` and per-axis bond energies."""
        site = 0.5 * np.einsum("...i,...i->...", p, p) + 1.0
        if self.U is not None:
            site = site + self.U.eval(q)
        bonds = []
        for ax in self._lattice_axes(q):
            n = q.shape[ax]
            if self.V is None:
                shape = list(q.shape[:-1])
                shape[ax] = n - 1
                bonds.append(np.zeros(shape))
            else:
                bonds.append(self.V.eval(_take(q, ax, 1, n) - _take(q, ax, 0, n - 1)))
        return site, bonds

    def field_energy(self, q: np.ndarray, p: np.ndarray) -> np.ndarray | float:
        """Local energy of a whole field, each bond inside it counted once."""
        site, bonds = self.energy_parts(q, p)
        lat = tuple(range(-self.d, 0))
        total = site.sum(axis=lat)
        for b in bonds:
            total = total + b.sum(axis=lat)
        return total


def _take(a: np.ndarray, axis: int, start: int, stop: int) -> np.ndarray:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return a[tuple(index)]


@dataclass(frozen=True, eq=False)
class LatticeState:
    """A state with explicit values on ``support`` and a frozen uniform background.

    Args:
        spec: The lattice the state lives on.
        support: Cube carrying explicitly stored coordinates.
        q, p: Arrays of shape ``support.shape + (nu,)``.
        q_background, p_background: Values of every site outside the support.
    """

    spec: LatticeSpec
    support: Cube
    q: np.ndarray
    p: np.ndarray
    q_background: np.ndarray = field(default=None)
    p_background: np.ndarray = field(default=None)

    def __post_init__(self):
        nu = self.spec.nu
        shape = self.support.shape + (nu,)
        if self.support.d != self.spec.d:
            raise ValueError(f"support dimension {self.support.d} != lattice d={self.spec.d}")
        q = np.array(self.q, dtype=float).reshape(shape)
        p = np.array(self.p, dtype=float).reshape(shape)
        qb = np.zeros(nu) if self.q_background is None else np.array(self.q_background, float)
        pb = np.zeros(nu) if self.p_background is None else np.array(self.p_background, float)
        if qb.shape != (nu,) or pb.shape != (nu,):
            raise ValueError("background values must be nu-vectors")
        for a in (q, p, qb, pb):
            if not np.all(np.isfinite(a)):
                raise ValueError("state coordinates must be finite")
            a.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q_background", qb)
        object.__setattr__(self, "p_background", pb)

    @classmethod
    def rest(cls, spec: LatticeSpec, support: Cube) -> LatticeState:
        z = np.zeros(support.shape + (spec.nu,))
        return cls(spec, support, z, z)

    def __eq__(self, other):
        if not isinstance(other, LatticeState):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.support == other.support
            and np.array_equal(self.q, other.q)
            and np.array_equal(self.p, other.p)
            and np.array_equal(self.q_background, other.q_background)
            and np.array_equal(self.p_background, other.p_background)
        )

    __hash__ = None

    def values_on(self, cube: Cube) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates on ``cube``, filled from the support or the background."""
        shape = cube.shape + (self.spec.nu,)
        q = np.broadcast_to(self.q_background, shape).copy()
        p = np.broadcast_to(self.p_background, shape).copy()
        ov = cube.overlap(self.support)
        if ov is not None:
            mine, theirs = ov
            q[mine] = self.q[theirs]
            p[mine] = self.p[theirs]
        return q, p

    def site(self, i) -> tuple[np.ndarray, np.ndarray]:
        if self.support.contains(i):
            idx = self.support.index(i)
            return self.q[idx], self.p[idx]
        return self.q_background, self.p_background

    def replace_on(self, cube: Cube, q: np.ndarray, p: np.ndarray) -> LatticeState:
        """Copy of the state with coordinates on ``cube`` replaced."""
        support = self.support
        if not support.contains_cube(cube):
            support = bounding_cube(self.support.center, [self.support, cube])
        q_new, p_new = self.values_on(support)
        mine, _ = support.overlap(cube)
        q_new[mine] = q
        p_new[mine] = p
        return LatticeState(self.spec, support, q_new, p_new, self.q_background, self.p_background)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite coordinates")


def _pair_grad(spec: LatticeSpec, x: LatticeState, i: Site, sites: Sequence[Site]) -> np.ndarray:
    qi, _ = x.site(i)
    f = -spec.U.grad(qi) if spec.U is not None else np.zeros(spec.nu)
    if spec.V is not None:
        for j in sites:
            f = f - spec.V.grad(qi - x.site(j)[0])
    _check_finite(f)
    return f


def force(x: LatticeState, i) -> np.ndarray:
    """Force on site ``i`` from its one-body term and all ``2d`` bonds."""
    i = as_site(i, x.spec.d)
    return _pair_grad(x.spec, x, i, neighbors(i))


def truncated_force(x: LatticeState, i, box: Cube) -> np.ndarray:
    """Force on ``i`` keeping only the bonds to neighbours inside ``box``."""
    i = as_site(i, x.spec.d)
    if not box.contains(i):
        raise ValueError(f"site {i} is outside the box {box}")
    return _pair_grad(x.spec, x, i, [j for j in neighbors(i) if box.contains(j)])


def local_energy(x: LatticeState, cube: Cube) -> float:
    """Kinetic, one-body and intra-cube bond energy of ``cube`` plus one per site."""
    q, p = x.values_on(cube)
    return float(x.spec.field_energy(q, p))


def hamiltonian_on(x: LatticeState, cube: Cube) -> float:
    """Conserved energy of the partial dynamics on ``cube``, without the floor."""
    return local_energy(x, cube) - cube.n_sites


def _prefix(a: np.ndarray, d: int) -> np.ndarray:
    pad = [(0, 0)] * (a.ndim - d) + [(1, 0)] * d
    s = np.pad(a, pad)
    for ax in range(a.ndim - d, a.ndim):
        s = np.cumsum(s, axis=ax)
    return s


def _box_sum(s: np.ndarray, lo: Sequence[int], hi: Sequence[int]) -> np.ndarray:
    """Sum of the original array over the inclusive index box ``[lo, hi]``."""
    d = len(lo)
    total = 0.0
    for corner in itertools.product((0, 1), repeat=d):
        idx = tuple(hi[a] + 1 if c else lo[a] for a, c in enumerate(corner))
        sign = (-1) ** (d - sum(corner))
        total = total + sign * s[(Ellipsis,) + idx]
    return total


class CubeEnergyTable:
    """O(2^d) evaluation of ``W`` on any sub-cube of a (batched) field region."""

    def __init__(self, spec: LatticeSpec, region: Cube, q: np.ndarray, p: np.ndarray):
        self.spec, self.region = spec, region
        site, bonds = spec.energy_parts(q, p)
        self._site = _prefix(site, spec.d)
        self._bonds = [_prefix(b, spec.d) for b in bonds]

    def energy(self, cube: Cube) -> np.ndarray | float:
        if not self.region.contains_cube(cube):
            raise ValueError(f"{cube} not inside table region {self.region}")
        lo = [int(v) for v in cube.lo - self.region.lo]
        hi = [int(v) for v in cube.hi - self.region.lo]
        w = _box_sum(self._site, lo, hi)
        for ax, s in enumerate(self._bonds):
            if cube.radius == 0:
                continue
            bhi = list(hi)
            bhi[ax] -= 1
            w = w + _box_sum(s, lo, bhi)
        return w


def admissible_radii(mu, d: int, k_max: int) -> range:
    """Integers ``k`` with ``log^{1/d}(e + |mu|) < k <= k_max``."""
    return range(math.floor(log_radius(mu, d)) + 1, k_max + 1)


def q_functional(x: LatticeState, mu_range: Iterable, k_max: int) -> float:
    """Finite scan of ``sup W_{mu,k} / (2k+1)^d`` over centers and admissible radii."""
    return float(q_functional_fields(x.spec, *_scan_region(x, mu_range, k_max), mu_range, k_max))


def _scan_region(x: LatticeState, mu_range, k_max):
    cubes = [Cube(mu, k_max) for mu in mu_range]
    if not cubes:
        raise ValueError("empty mu_range")
    region = bounding_cube(x.support.center, cubes)
    q, p = x.values_on(region)
    return region, q, p


def q_functional_fields(
    spec: LatticeSpec, region: Cube, q: np.ndarray, p: np.ndarray, mu_range, k_max: int
) -> np.ndarray:
    """Vectorised Q over a batch of fields laid out on ``region``."""
    table = CubeEnergyTable(spec, region, q, p)
    best = None
    for mu in mu_range:
        for k in admissible_radii(mu, spec.d, k_max):
            r = table.energy(Cube(mu, k)) / (2 * k + 1) ** spec.d
            best = r if best is None else np.maximum(best, r)
    if best is None:
        raise ValueError(f"no admissible (mu, k) with k <= k_max={k_max}")
    return best
