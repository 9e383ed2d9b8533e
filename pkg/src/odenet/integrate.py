"""Fixed-step RK4 and adaptive Dormand-Prince 5(4) integration on arbitrary grids.

Every solve works on a *batch* of independent initial value problems.  Each
member has its own output grid; interval ``k`` of member ``b`` is mapped onto
the unit interval ``s in [k, k + 1]`` by ``t = t_k + s * dt[b, k]``, so
``dx/ds = dt[b, k] * f(x)``.  All members then share one step sequence in
``s`` and land on every output time exactly, with no dense output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    DivergenceError,
    GridError,
    IntegrationError,
    NonFiniteStateError,
    StepBudgetError,
    StiffnessError,
)

RHS = Callable[[np.ndarray], np.ndarray]

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


class TimeGrid:
    """Strictly increasing, finite output times (spacing may vary)."""

    def __init__(self, times):
        t = np.array(times, dtype=float).ravel()
        if t.size < 2:
            raise GridError("a time grid needs at least two points")
        if not np.all(np.isfinite(t)):
            raise GridError("time grid contains non-finite values")
        if not np.all(np.diff(t) > 0):
            raise GridError("time grid must be strictly increasing")
        t.setflags(write=False)
        self.times = t

    @property
    def intervals(self) -> np.ndarray:
        return np.diff(self.times)

    def __len__(self):
        return self.times.size

    @classmethod
    def uniform(cls, t0: float, t1: float, dt: float) -> "TimeGrid":
        n = int(round((t1 - t0) / dt))
        return cls(t0 + dt * np.arange(n + 1))


@dataclass
class IntegratorConfig:
    method: str = "dopri5"
    rk4_substeps: int = 10
    atol: float = 1e-6
    rtol: float = 1e-6
    max_steps: int = 10_000
    min_step: float = 1e-12

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown integration method {self.method!r}")
        if self.rk4_substeps < 1:
            raise ValueError("rk4_substeps must be >= 1")
        if not (self.atol > 0 and self.rtol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1 or not self.min_step > 0:
            raise ValueError("max_steps and min_step must be positive")

    @classmethod
    def from_dict(cls, d) -> "IntegratorConfig":
        return cls(**d)


@dataclass
class BatchSolution:
    states: np.ndarray  # (B, n, D): solution at s = 1..n
    failed: np.ndarray  # (B,) bool
    errors: list = field(default_factory=list)  # per member: None or IntegrationError
    n_rhs: int = 0

    def raise_first(self):
        for e in self.errors:
            if e is not None:
                raise e


def rk4_step(model, x, t: float, h: float) -> np.ndarray:
    """One classical Runge-Kutta step; ``t`` is carried for interface symmetry only."""
    x = np.asarray(x, float)
    if not h > 0:
        raise ValueError("step must be positive")
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError("non-finite state")
    f = model.rhs
    with np.errstate(all="ignore"):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        out = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite RK4 stage at t={t}", time=t)
    return out


def _dopri_stages(fun: RHS, y: np.ndarray, h, k1: np.ndarray):
    """Return (5th-order state, error vector, k7). ``h`` broadcasts against ``y``."""
    ks = [k1]
    for i in range(1, 7):
        incr = sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
        ks.append(fun(y + h * incr))
    y5 = y + h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
    err = h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
    return y5, err, ks[6]


def _error_norm(err, y_old, y_new, atol, rtol, axis=None):
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return np.max(np.abs(err) / scale, axis=axis)


def step_factor(err_norm: float) -> float:
    """Step-size multiplier ``min(5, max(0.2, 0.9 * err^(-1/5)))``."""
    if err_norm == 0.0:
        return MAX_FACTOR
    return float(min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err_norm ** -0.2)))


def dopri5_step(model, x, t: float, h: float, atol: float, rtol: float):
    """Single Dormand-Prince trial step.

    Returns ``(proposed_state, error_estimate, accepted, next_h)``; the
    proposal is the 5th-order solution and the error is its difference to the
    embedded 4th-order one.
    """
    x = np.asarray(x, float)
    if not h > 0:
        raise ValueError("step must be positive")
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError("non-finite state")
    with np.errstate(all="ignore"):
        y5, err, _ = _dopri_stages(model.rhs, x, h, model.rhs(x))
    if not (np.all(np.isfinite(y5)) and np.all(np.isfinite(err))):
        raise DivergenceError(f"non-finite Dormand-Prince stage at t={t}", time=t)
    norm = float(_error_norm(err, x, y5, atol, rtol))
    return y5, err, norm <= 1.0, h * step_factor(norm)


def _fail_time(t0, dts, k, s):
    return float(t0 + dts[:k].sum() + s * dts[k])


def solve_batch(fun: RHS, y0, dts, cfg: IntegratorConfig, t0=None) -> BatchSolution:
    """Integrate ``dy/dt = fun(y)`` for every batch member over its own intervals.

    ``fun`` maps a ``(B, D)`` stack of states to time derivatives.  ``dts`` is
    ``(B, n)``.  Members that blow up, stall or run out of steps are marked
    failed (and frozen at zero) while the others continue.
    """
    y = np.array(y0, dtype=float)
    if y.ndim != 2:
        raise ValueError("y0 must be (batch, dim)")
    dts = np.atleast_2d(np.asarray(dts, float))
    B, n = dts.shape
    if dts.shape[0] != y.shape[0]:
        raise ValueError("dts and y0 batch sizes differ")
    if np.any(~(dts > 0)):
        raise GridError("all intervals must be positive")
    t0 = np.zeros(B) if t0 is None else np.broadcast_to(np.asarray(t0, float), (B,))
    out = np.zeros((B, n, y.shape[1]))
    alive = np.all(np.isfinite(y), axis=1)
    errors: list = [None] * B
    for b in np.flatnonzero(~alive):
        errors[b] = DivergenceError("non-finite initial state", time=float(t0[b]))
    y[~alive] = 0.0
    counter = [0]

    def scaled(yy, col):
        counter[0] += 1
        with np.errstate(all="ignore"):
            d = fun(yy) * col
        d[~alive] = 0.0
        return d

    def kill(mask, k, s, exc_type, msg):
        for b in np.flatnonzero(mask & alive):
            tf = _fail_time(t0[b], dts[b], k, s)
            errors[b] = exc_type(f"{msg} at t={tf:.6g}", time=tf)
        alive[mask] = False
        y[mask] = 0.0

    if cfg.method == "rk4":
        _rk4_batch(scaled, y, dts, cfg, out, alive, kill)
    else:
        _dopri_batch(scaled, y, dts, cfg, out, alive, kill)
    out[~alive] = 0.0
    return BatchSolution(out, ~alive, errors, counter[0])


def _rk4_batch(scaled, y, dts, cfg, out, alive, kill):
    n = dts.shape[1]
    h = 1.0 / cfg.rk4_substeps
    for k in range(n):
        col = dts[:, k : k + 1]
        for i in range(cfg.rk4_substeps):
            k1 = scaled(y, col)
            k2 = scaled(y + 0.5 * h * k1, col)
            k3 = scaled(y + 0.5 * h * k2, col)
            k4 = scaled(y + h * k3, col)
            with np.errstate(all="ignore"):
                y += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = ~np.all(np.isfinite(y), axis=1) & alive
            if bad.any():
                kill(bad, k, (i + 1) * h, DivergenceError, "non-finite state")
        out[:, k] = y


def _initial_step(scaled, y, col, atol, rtol):
    # Hairer, Norsett & Wanner, Solving ODEs I, II.4
    f0 = scaled(y, col)
    sc = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, 1.0)
    with np.errstate(all="ignore"):
        f1 = scaled(y + h0 * f0, col)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    if not np.isfinite(d2):
        return h0, f0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, 1.0), f0


def _dopri_batch(scaled, y, dts, cfg, out, alive, kill):
    n = dts.shape[1]
    atol, rtol = cfg.atol, cfg.rtol
    h = None
    for k in range(n):
        col = dts[:, k : k + 1]
        if h is None:
            h, k1 = _initial_step(scaled, y, col, atol, rtol)
        else:
            k1 = scaled(y, col)
        s = 0.0
        steps = 0
        while s < 1.0 and alive.any():
            if steps >= cfg.max_steps:
                kill(alive.copy(), k, s, StepBudgetError, "step budget exhausted")
                break
            steps += 1
            last = h >= 1.0 - s
            hs = 1.0 - s if last else h
            with np.errstate(all="ignore"):
                y5, err, k7 = _dopri_stages(lambda v: scaled(v, col), y, hs, k1)
                norms = _error_norm(err, y, y5, atol, rtol, axis=1)
            norms[~alive] = 0.0
            bad = ~np.isfinite(norms) & alive
            if bad.any():
                kill(bad, k, s, DivergenceError, "non-finite state")
                norms[bad] = 0.0
                k1 = scaled(y, col)
                continue
            norm = float(norms.max())
            if norm <= 1.0:
                y[...] = y5
                y[~alive] = 0.0
                k1 = k7
                s = 1.0 if last else s + hs
                # a clipped landing step must not shrink the running step size
                h = max(h, hs * step_factor(norm)) if last else hs * step_factor(norm)
            else:
                h = hs * step_factor(norm)
                if h * float(dts[alive, k].max()) < cfg.min_step:
                    kill(norms > 1.0, k, s, StiffnessError, "step size underflow")
                    h = max(h, 1e-3)
                    k1 = scaled(y, col)
        out[:, k] = y


def model_rhs(model) -> RHS:
    """Vectorised ``(B, d) -> (B, d)`` right-hand side of an ODEModel."""
    from .basis import evaluate_unchecked

    theta_t = model.theta.values.T.copy()
    b = model.basis
    return lambda x: evaluate_unchecked(b, x) @ theta_t


def integrate_batch(model, x0s, dts, cfg: IntegratorConfig | None = None, t0=None) -> BatchSolution:
    cfg = cfg or IntegratorConfig()
    return solve_batch(model_rhs(model), x0s, dts, cfg, t0)


def integrate(model, x0, grid, cfg: IntegratorConfig | None = None) -> np.ndarray:
    """States at ``grid[1:]`` (the initial point is excluded).

    Raises a subclass of :class:`IntegrationError` when the solve fails.
    """
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(grid)
    x0 = np.asarray(x0, float)
    if x0.shape != (model.dimension,):
        raise ValueError(f"x0 must have length {model.dimension}")
    if not np.all(np.isfinite(x0)):
        raise NonFiniteStateError("non-finite initial state")
    sol = integrate_batch(model, x0[None], grid.intervals[None], cfg, t0=grid.times[0])
    sol.raise_first()
    return sol.states[0]


__all__ = [
    "TimeGrid",
    "IntegratorConfig",
    "BatchSolution",
    "IntegrationError",
    "rk4_step",
    "dopri5_step",
    "step_factor",
    "solve_batch",
    "integrate_batch",
    "integrate",
    "model_rhs",
]
