"""Velocity-Verlet integration of the partial dynamics in a cube.

Only the oscillators inside the box move; everything outside keeps its
initial value, and the bonds leaving the box are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crystal import io
from crystal.lattice import Cube, LatticeState

BLOWUP = 1e12


class IntegrationError(RuntimeError):
    """Raised when the integrated state becomes non-finite or explodes."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    t_final: float
    scheme: str = "velocity-verlet"
    record_stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.t_final >= 0:
            raise ValueError(f"t_final must be >= 0, got {self.t_final}")
        if int(self.record_stride) < 1:
            raise ValueError(f"record_stride must be >= 1, got {self.record_stride}")
        if self.scheme != "velocity-verlet":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        n = round(self.t_final / self.dt)
        if abs(n * self.dt - self.t_final) > 1e-9 * max(1.0, self.t_final):
            raise ValueError(f"t_final={self.t_final} is not a multiple of dt={self.dt}")

    @property
    def n_steps(self) -> int:
        return round(self.t_final / self.dt)

    def step_of(self, t: float) -> int:
        n = round(t / self.dt)
        if abs(n * self.dt - t) > 1e-9 * max(1.0, t) or not 0 <= n <= self.n_steps:
            raise ValueError(f"time {t} is not on the integration grid")
        return n

    def to_dict(self) -> dict:
        return {
            "dt": self.dt,
            "t_final": self.t_final,
            "scheme": self.scheme,
            "record_stride": self.record_stride,
        }


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Snapshots of the box coordinates on a fixed time grid.

    ``q`` and ``p`` have shape ``(n_snapshots,) + box.shape + (nu,)``; sites
    outside the box are recovered from ``initial``.
    """

    times: np.ndarray
    q: np.ndarray
    p: np.ndarray
    box: Cube
    initial: LatticeState
    config: IntegratorConfig
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    @property
    def steps(self) -> np.ndarray:
        return np.rint(self.times / self.config.dt).astype(int)

    def state_at(self, index: int) -> LatticeState:
        return self.initial.replace_on(self.box, self.q[index], self.p[index])

    def site_series(self, i) -> tuple[np.ndarray, np.ndarray]:
        """Position and momentum series of one site, shape ``(n_snapshots, nu)``."""
        if self.box.contains(i):
            idx = self.box.index(i)
            return self.q[(slice(None),) + idx], self.p[(slice(None),) + idx]
        qi, pi = self.initial.site(i)
        n = len(self.times)
        return np.broadcast_to(qi, (n, qi.size)), np.broadcast_to(pi, (n, pi.size))

    def index_of(self, t: float) -> int:
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-9 * max(1.0, t)))
        if hits.size == 0:
            raise ValueError(f"time {t} is not a recorded snapshot")
        return int(hits[0])


def _record_set(cfg: IntegratorConfig, extra=()) -> set[int]:
    steps = set(range(0, cfg.n_steps + 1, cfg.record_stride))
    steps.add(cfg.n_steps)
    steps.update(int(s) for s in extra)
    return steps


def verlet_run(spec, q, p, dt, n_steps, record, tangent=None):
    """Advance a box field ``n_steps`` velocity-Verlet steps.

    ``tangent`` is an optional pair ``(dq, dp)`` of shape ``q.shape + (m,)``
    propagated with the exact differential of each step. Returns lists of
    recorded ``(step, q, p, dq, dp)`` tuples; ``dq, dp`` are None without a
    tangent.
    """
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    half = 0.5 * dt
    f = spec.force_field(q)
    dq = dp = hess = None
    if tangent is not None:
        dq, dp = (np.array(a, dtype=float) for a in tangent)
        hess = spec.coupling_hessians(q)
    out = []

    def snap(step):
        out.append(
            (step, q.copy(), p.copy(), None if dq is None else dq.copy(), None if dp is None else dp.copy())
        )

    if 0 in record:
        snap(0)
    for step in range(1, n_steps + 1):
        p += half * f
        if dq is not None:
            dp += half * spec.apply_coupling(q, dq, hess)
        q += dt * p
        if dq is not None:
            dq += dt * dp
        f = spec.force_field(q)
        p += half * f
        if dq is not None:
            hess = spec.coupling_hessians(q)
            dp += half * spec.apply_coupling(q, dq, hess)
        if not (np.abs(q).max() <= BLOWUP and np.abs(p).max() <= BLOWUP):
            raise IntegrationError("state blew up (|coordinate| > 1e12 or non-finite)", step)
        if step in record:
            snap(step)
    return out


def integrate_partial(
    x0: LatticeState, box: Cube, cfg: IntegratorConfig, record_steps=(), meta=None
) -> Trajectory:
    """Integrate the partial dynamics on ``box`` starting from ``x0``.

    Args:
        x0: Initial state; it supplies the frozen exterior.
        box: The cube whose oscillators move.
        cfg: Time step, horizon and snapshot stride.
        record_steps: Extra step indices to record besides the stride grid.
        meta: Free-form run metadata stored on the trajectory.
    """
    if box.d != x0.spec.d:
        raise ValueError("box dimension does not match the lattice")
    q0, p0 = x0.values_on(box)
    snaps = verlet_run(x0.spec, q0, p0, cfg.dt, cfg.n_steps, _record_set(cfg, record_steps))
    steps = np.array([s[0] for s in snaps])
    info = {"spec": x0.spec.to_config(), "config": cfg.to_dict()}
    info.update(meta or {})
    return Trajectory(
        times=steps * cfg.dt,
        q=np.stack([s[1] for s in snaps]),
        p=np.stack([s[2] for s in snaps]),
        box=box,
        initial=x0,
        config=cfg,
        meta=info,
    )


def conserved_energy(traj: Trajectory, at: int) -> float:
    """Local energy of the run's own box at snapshot ``at`` (floor included)."""
    return float(traj.initial.spec.field_energy(traj.q[at], traj.p[at]))


def energy_series(traj: Trajectory) -> np.ndarray:
    return np.asarray(traj.initial.spec.field_energy(traj.q, traj.p), dtype=float)


def energy_drift(traj: Trajectory) -> float:
    """Maximum relative deviation of the box energy from its initial value."""
    w = energy_series(traj)
    return float(np.max(np.abs(w - w[0])) / w[0])


def write_trajectory(traj: Trajectory, out_dir: Path) -> Path:
    """Write one state CSV per snapshot, an energy table and a JSON manifest."""
    out_dir = Path(out_dir)
    snap_dir = out_dir / "snapshots"
    w = energy_series(traj)
    for k in range(len(traj)):
        q, p = traj.q[k], traj.p[k]
        state = LatticeState(traj.initial.spec, traj.box, q, p)
        io.write_state_csv(snap_dir / f"snap_{k:06d}.csv", state)
    io.write_csv(
        out_dir / "energy.csv",
        ["index", "t", "energy"],
        [(k, t, e) for k, (t, e) in enumerate(zip(traj.times, w))],
    )
    io.write_json(
        out_dir / "trajectory.json",
        {
            "spec": traj.initial.spec.to_config(),
            "box": traj.box.to_dict(),
            "dt": traj.config.dt,
            "t_final": traj.config.t_final,
            "drift": float(np.max(np.abs(w - w[0])) / w[0]),
            "times": [io.fmt(t) for t in traj.times],
        },
    )
    return out_dir
