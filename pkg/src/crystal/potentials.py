"""Even polynomial potentials stored as polynomials in ``s = |xi|^2``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly

_NONNEG_GRID = 10_000


@dataclass(frozen=True)
class PolynomialPotential:
    """Potential ``xi -> P(|xi|^2)`` with ``P(s) = sum_k coeffs[k] s^k``.

    The potential has degree ``2 * sigma`` in ``|xi|``. Evenness holds by
    construction; nonnegativity and a positive leading coefficient are checked
    when the object is built.

    Args:
        coeffs: Coefficients ``c_0, ..., c_sigma`` of ``P``.
        nu: Dimension of the argument ``xi``.
    """

    coeffs: tuple[float, ...]
    nu: int = 1
    _c: np.ndarray = field(init=False, repr=False, compare=False)
    _dc: np.ndarray = field(init=False, repr=False, compare=False)
    _ddc: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 1 or c.size < 2:
            raise ValueError("need at least coefficients c_0 and c_1 (degree sigma >= 1)")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        if c[-1] <= 0:
            raise ValueError(f"leading coefficient must be positive, got {c[-1]!r}")
        if int(self.nu) < 1:
            raise ValueError(f"nu must be >= 1, got {self.nu}")
        object.__setattr__(self, "coeffs", tuple(float(x) for x in c))
        object.__setattr__(self, "nu", int(self.nu))
        object.__setattr__(self, "_c", c)
        object.__setattr__(self, "_dc", npoly.polyder(c))
        object.__setattr__(self, "_ddc", npoly.polyder(c, 2) if c.size > 2 else np.zeros(1))
        self._check_nonnegative()

    @property
    def sigma(self) -> int:
        return len(self.coeffs) - 1

    @property
    def degree(self) -> int:
        """Degree of the potential in ``|xi|``."""
        return 2 * self.sigma

    def nonnegativity_cutoff(self) -> float:
        """Return ``s_max`` beyond which the leading term dominates."""
        c, sig = self._c, self.sigma
        lower = [
            (sig * abs(c[k]) / c[sig]) ** (1.0 / (sig - k)) for k in range(sig) if c[k] != 0
        ]
        return 1.0 + max(lower, default=0.0)

    def _check_nonnegative(self):
        s_max = self.nonnegativity_cutoff()
        s = np.concatenate([[0.0], np.geomspace(s_max * 1e-9, s_max, _NONNEG_GRID - 1)])
        vals = npoly.polyval(s, self._c)
        scale = np.abs(self._c).max()
        if vals.min() < -1e-12 * scale:
            s_bad = s[np.argmin(vals)]
            raise ValueError(f"potential is negative at |xi|^2={s_bad:.6g} (P={vals.min():.6g})")

    def _check(self, xi):
        xi = np.asarray(xi, dtype=float)
        if xi.ndim == 0 or xi.shape[-1] != self.nu:
            raise ValueError(f"expected trailing dimension nu={self.nu}, got shape {xi.shape}")
        return xi

    def eval(self, xi) -> np.ndarray | float:
        """Evaluate ``P(|xi|^2)``; ``xi`` has shape ``(..., nu)``."""
        xi = self._check(xi)
        return npoly.polyval(np.einsum("...i,...i->...", xi, xi), self._c)

    def grad(self, xi) -> np.ndarray:
        """Exact gradient ``2 P'(|xi|^2) xi``."""
        xi = self._check(xi)
        s = np.einsum("...i,...i->...", xi, xi)
        return 2.0 * npoly.polyval(s, self._dc)[..., None] * xi

    def hessian(self, xi) -> np.ndarray:
        """Exact Hessian ``2 P'(s) I + 4 P''(s) xi xi^T``, shape ``(..., nu, nu)``."""
        xi = self._check(xi)
        s = np.einsum("...i,...i->...", xi, xi)
        d1 = npoly.polyval(s, self._dc)
        d2 = npoly.polyval(s, self._ddc)
        outer = xi[..., :, None] * xi[..., None, :]
        eye = np.eye(self.nu)
        return 2.0 * d1[..., None, None] * eye + 4.0 * d2[..., None, None] * outer

    def to_config(self) -> dict:
        return {"coeffs": list(self.coeffs), "variable": "xi_sq"}

    @classmethod
    def from_config(cls, cfg: dict, nu: int = 1) -> PolynomialPotential:
        variable = cfg.get("variable", "xi_sq")
        if variable != "xi_sq":
            raise ValueError(f"unsupported potential variable {variable!r}; only 'xi_sq'")
        return cls(tuple(cfg["coeffs"]), nu=nu)
