"""Coordinate-wise Lie splitting of a tanh field.

Each macro step applies one explicit Euler update per (neuron, coordinate)
pair, sweeping neurons outermost.  Indices are 0-based.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DivergenceError, InvalidParameter, ScheduleError
from .ode import TanhField

__all__ = [
    "SubStep",
    "SplitSchedule",
    "make_schedule",
    "apply_substep",
    "run_splitting",
    "required_steps",
    "splitting_constant",
    "trajectory_csv",
    "DIVERGENCE_LIMIT",
]

DIVERGENCE_LIMIT = 1e12
KNOT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SubStep:
    k: int
    i: int
    j: int
    dt: float
    a: float
    w: np.ndarray
    beta: float

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidParameter(f"dt must be positive, got {self.dt!r}")
        w = np.array(self.w, dtype=float).reshape(-1)
        if not 0 <= self.j < len(w):
            raise InvalidParameter(f"coordinate {self.j} out of range for dimension {len(w)}")
        if self.k < 0 or self.i < 0:
            raise InvalidParameter("step and neuron indices must be non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def dim(self) -> int:
        return len(self.w)

    @property
    def stiffness(self) -> float:
        """``dt * |a| * max|w|``; the synthesiser needs it below 1."""
        return self.dt * abs(self.a) * float(np.max(np.abs(self.w)))

    def __call__(self, x):
        return apply_substep(x, self)


@dataclass(frozen=True)
class SplitSchedule:
    substeps: tuple
    n: int
    dt: float
    tau: float
    dim: int
    N: int

    def __len__(self) -> int:
        return len(self.substeps)

    def macro_step(self, k: int) -> tuple:
        per = self.N * self.dim
        return self.substeps[k * per : (k + 1) * per]


def make_schedule(field: TanhField, n: int, tau: Optional[float] = None) -> SplitSchedule:
    """``n * N * d`` substeps over ``[0, tau]`` (default: the field's last knot)."""
    if int(n) != n or n < 1:
        raise InvalidParameter(f"n must be a positive integer, got {n!r}")
    n = int(n)
    tau = field.time_grid[-1] if tau is None else float(tau)
    if not tau > 0:
        raise InvalidParameter("tau must be positive")
    dt = tau / n
    for knot in field.time_grid[1:-1]:
        if knot >= tau:
            continue
        steps = knot / dt
        if abs(steps - round(steps)) > KNOT_TOL * max(1.0, steps):
            raise ScheduleError(f"time knot {knot} is not a multiple of dt = {dt}")
    subs = []
    for k in range(n):
        A, W, b = field.params[field.interval_index((k + 0.5) * dt)]
        for i in range(field.N):
            for j in range(field.dim):
                subs.append(SubStep(k, i, j, dt, A[j, i], W[i], b[i]))
    return SplitSchedule(tuple(subs), n, dt, tau, field.dim, field.N)


def apply_substep(x, s: SubStep) -> np.ndarray:
    """Add ``dt * a * tanh(w . x + beta)`` to coordinate ``j``; works on ``(d,)`` or ``(m, d)``."""
    x = np.asarray(x, dtype=float)
    y = x.copy()
    y[..., s.j] = x[..., s.j] + s.dt * s.a * np.tanh(x @ s.w + s.beta)
    return y


def run_splitting(x0, schedule: SplitSchedule) -> np.ndarray:
    """Macro-step states ``x_0 .. x_n``; shape ``(n+1, d)`` or ``(n+1, m, d)`` for batches."""
    x = np.asarray(x0, dtype=float).copy()
    if x.shape[-1] != schedule.dim:
        raise InvalidParameter(f"expected dimension {schedule.dim}, got {x.shape[-1]}")
    traj = np.empty((schedule.n + 1,) + x.shape)
    traj[0] = x
    per = schedule.N * schedule.dim
    for k in range(schedule.n):
        for s in schedule.substeps[k * per : (k + 1) * per]:
            # in-place coordinate update keeps the other coordinates bitwise intact
            x[..., s.j] = x[..., s.j] + s.dt * s.a * np.tanh(x @ s.w + s.beta)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"splitting diverged at macro step {k + 1} (dt = {schedule.dt})")
        traj[k + 1] = x
    return traj


def required_steps(c: float, L: float, tau: float, eps: float) -> int:
    """Sufficient step count ``ceil(2 c^2 tau e^{L tau} / (L eps))``."""
    if not (c > 0 and L > 0 and tau > 0 and eps > 0):
        raise InvalidParameter("c, L, tau and eps must be positive")
    return math.ceil(2.0 * c * c * tau * math.exp(L * tau) / (L * eps))


def splitting_constant(field: TanhField) -> float:
    """Bound on field pieces and their gradients, at least 1.

    Per neuron term ``|a_ij| tanh`` is at most ``|a_ij|`` with gradient at most
    ``|a_ij| |w_i|``; the full field is at most ``|A|_2 sqrt(N)`` with
    gradient at most ``|A|_2 |W|_2``.
    """
    c = 1.0
    for A, W, _ in field.params:
        wn = np.linalg.norm(W, axis=1)
        c = max(
            c,
            float(np.max(np.abs(A))),
            float(np.max(np.abs(A) * wn[None, :])),
            float(np.linalg.norm(A, 2) * math.sqrt(field.N)),
            float(np.linalg.norm(A, 2) * np.linalg.norm(W, 2)),
        )
    return c


def trajectory_csv(traj: np.ndarray, dt: float) -> str:
    """CSV text with columns ``t, x_1 .. x_d``, one row per macro step."""
    traj = np.asarray(traj, dtype=float)
    if traj.ndim != 2:
        raise InvalidParameter("trajectory_csv expects a single trajectory of shape (n+1, d)")
    out = io.StringIO()
    d = traj.shape[1]
    out.write(",".join(["t"] + [f"x_{j + 1}" for j in range(d)]) + "\n")
    for k, row in enumerate(traj):
        out.write(",".join(repr(float(v)) for v in [k * dt, *row]) + "\n")
    return out.getvalue()
