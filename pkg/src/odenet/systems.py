"""Reference systems (Lotka-Volterra, Lorenz, actin aggregation) and synthetic data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import PolynomialBasis, build_basis
from .data import Dataset, Trajectory
from .errors import ConfigError
from .integrate import IntegratorConfig, TimeGrid, integrate_batch
from .model import CoefficientMatrix, ODEModel, Tie
from .noise import inject_noise

LV_REGIMES = {
    # C11, C12, C13, C21, C22, C23
    "over_damped": (1.5, -1.0, -1.0, -1.0, 1.0, 0.0),
    "spiral": (2.0, -1.1, -0.1, -1.0, -0.1, 0.9),
    "limit_cycle": (1.0, -0.05, 0.0, -1.0, 0.03, 0.0),
}

LORENZ = {"C11": -10.0, "C12": 10.0, "C21": 28.0, "C22": -1.0, "C23": -1.0, "C31": -8.0 / 3.0, "C32": 1.0}

ACTIN_TOTALS = {
    "KCl": (7.4, 9.6, 12.4, 14.2, 16.2, 18.4, 20.5),
    "MgCl2": (6.7, 8.5, 11.5, 14.9, 17.3, 20.3, 22.9),
}

# alpha_0 .. alpha_5 of the two-state (M, m) model
ACTIN_DATA_DRIVEN = {
    "KCl": (4.62e-1, -2.16e-1, -5.49e-1, 5.70e-3, 1.10e-1, 7.87e1),
    "MgCl2": (0.0, -1.41e-2, 9.20e-3, -3.75e-2, 2.28e-1, 3.10e1),
}

# alpha_0 .. alpha_10 of the three-state (P, M, m) model; unlisted rates are zero
ACTIN_PHYSICAL = {
    "KCl": {1: -5.12e-2, 2: 7.98e-3, 3: 1.16e-2, 4: -5.33e-1, 9: 7.39e-1, 10: -8.82e-1},
    "MgCl2": {1: 2.15e-2, 2: 0.0, 3: 2.3e-2, 4: 0.0, 9: 1.19e1, 10: -2.97e1},
}


@dataclass
class ReferenceSystem:
    name: str
    model: ODEModel
    initial_conditions: list
    horizon: float
    dt: float
    observed: np.ndarray
    template: CoefficientMatrix
    conserved_totals: list | None = None
    parameters: dict = field(default_factory=dict)

    @property
    def basis(self) -> PolynomialBasis:
        return self.model.basis

    @property
    def dimension(self) -> int:
        return self.model.dimension

    def fit_template(self) -> CoefficientMatrix:
        """Candidate structure (active mask and ties) to start a fit from."""
        return self.template.copy()


def _truth(basis, entries: dict, constraints=()) -> CoefficientMatrix:
    values = np.zeros((basis.dimension, basis.size))
    for (i, term), v in entries.items():
        values[i, basis.index(term)] = v
    return CoefficientMatrix(values, values != 0, constraints)


def make_lv(regime: str) -> ReferenceSystem:
    if regime not in LV_REGIMES:
        raise ConfigError(f"unknown LV regime {regime!r}; choose from {sorted(LV_REGIMES)}")
    c11, c12, c13, c21, c22, c23 = LV_REGIMES[regime]
    b = build_basis(2, 2)
    th = _truth(b, {
        (0, (1, 0)): c11, (0, (1, 1)): c12, (0, (2, 0)): c13,
        (1, (0, 1)): c21, (1, (1, 1)): c22, (1, (0, 2)): c23,
    })
    x0 = [10.0, 10.0] if regime == "limit_cycle" else [1.0, 1.0]
    params = dict(zip(("C11", "C12", "C13", "C21", "C22", "C23"), LV_REGIMES[regime]))
    return ReferenceSystem(f"lv_{regime}", ODEModel(b, th), [x0], 30.0, 0.01, np.ones(2, bool),
                           CoefficientMatrix(np.zeros((2, b.size))), parameters=params)


def lv_coefficients(model: ODEModel | CoefficientMatrix) -> dict:
    th = model.theta if isinstance(model, ODEModel) else model
    b = build_basis(2, 2)
    v = np.where(th.active, th.values, 0.0)
    return {
        "C11": v[0, b.index((1, 0))], "C12": v[0, b.index((1, 1))], "C13": v[0, b.index((2, 0))],
        "C21": v[1, b.index((0, 1))], "C22": v[1, b.index((1, 1))], "C23": v[1, b.index((0, 2))],
    }


def _classify(eig: np.ndarray, tol: float = 1e-9) -> str:
    re, im = eig.real, eig.imag
    scale = max(1.0, float(np.abs(eig).max()))
    if np.any(np.abs(im) > tol * scale):
        if np.all(np.abs(re) <= tol * scale):
            return "center"
        return "stable spiral" if np.all(re < 0) else "unstable spiral"
    if np.any(np.abs(re) <= tol * scale):
        return "marginal"
    if np.all(re < 0):
        return "stable node"
    if np.all(re > 0):
        return "unstable node"
    return "saddle"


def lv_fixed_points(system: ReferenceSystem | ODEModel) -> list[dict]:
    """Closed-form LV fixed points that exist for these coefficients, with Jacobian eigenvalues."""
    model = system.model if isinstance(system, ReferenceSystem) else system
    c = lv_coefficients(model)
    c11, c12, c13, c21, c22, c23 = (c[k] for k in ("C11", "C12", "C13", "C21", "C22", "C23"))
    pts = [(0.0, 0.0)]
    if c13 != 0:
        pts.append((-c11 / c13, 0.0))
    if c23 != 0:
        pts.append((0.0, -c21 / c23))
    den = c12 * c22 - c13 * c23
    if den != 0:
        pts.append((-(c12 * c21 - c11 * c23) / den, -(c11 * c22 - c13 * c21) / den))
    out = []
    for p in pts:
        jac = model.rhs_jacobian_state(np.array(p))
        eig = np.linalg.eigvals(jac)
        out.append({"point": p, "jacobian": jac, "eigenvalues": eig, "type": _classify(eig)})
    return out


def make_lorenz() -> ReferenceSystem:
    b = build_basis(3, 2)
    c = LORENZ
    th = _truth(b, {
        (0, (1, 0, 0)): c["C11"], (0, (0, 1, 0)): c["C12"],
        (1, (1, 0, 0)): c["C21"], (1, (0, 1, 0)): c["C22"], (1, (1, 0, 1)): c["C23"],
        (2, (0, 0, 1)): c["C31"], (2, (1, 1, 0)): c["C32"],
    })
    return ReferenceSystem("lorenz", ODEModel(b, th), [[-8.0, 7.0, 27.0]], 25.0, 0.01, np.ones(3, bool),
                           CoefficientMatrix(np.zeros((3, b.size))), parameters=dict(c))


def _data_driven_structure(b):
    ties = [Tie((1, j), (0, j), -1.0) for j in range(b.size)]
    return ties


def _physical_layout(b):
    """Where each alpha sits in the (P, M, m) model, as (row, term, scale) lists."""
    P, M, m = (1, 0, 0), (0, 1, 0), (0, 0, 1)

    def t(*factors):
        return tuple(map(sum, zip((0, 0, 0), *factors)))

    return {
        0: [(0, t(), 1.0), (1, t(), 1.0)],
        1: [(0, t(m), 1.0), (1, t(m), 1.0)],
        2: [(0, t(m, m), 1.0), (1, t(m, m), 2.0)],
        3: [(0, t(m, M), 1.0), (1, t(m, M), 1.0)],
        4: [(0, t(P), 1.0)],
        5: [(0, t(M), 1.0)],
        6: [(0, t(P, P), 1.0)],
        7: [(0, t(P, M), 1.0)],
        8: [(1, t(M), 1.0)],
        9: [(1, t(m, P), 1.0)],
        10: [(1, t(P), 1.0)],
    }


def _physical_matrix(b, alphas: dict, active_alphas) -> CoefficientMatrix:
    layout = _physical_layout(b)
    values = np.zeros((3, b.size))
    active = np.zeros((3, b.size), bool)
    ties = []
    for a, places in layout.items():
        row0, term0, s0 = places[0]
        src = (row0, b.index(term0))
        values[src] = alphas.get(a, 0.0) * s0
        active[src] = a in active_alphas
        for row, term, s in places[1:]:
            ties.append(Tie((row, b.index(term)), src, s / s0))
    # dm/dt = -dM/dt, entry by entry
    for a, places in layout.items():
        for row, term, _ in places:
            if row == 1:
                j = b.index(term)
                ties.append(Tie((2, j), (1, j), -1.0))
    return CoefficientMatrix(values, active, ties)


def physical_alphas(theta: CoefficientMatrix) -> dict:
    """Read alpha_0..alpha_10 back out of a (P, M, m) coefficient matrix."""
    b = build_basis(3, 2, ("P", "M", "m"))
    v = np.where(theta.active, theta.values, 0.0)
    out = {}
    for a, places in _physical_layout(b).items():
        row, term, s = places[0]
        out[a] = float(v[row, b.index(term)] / s)
    return out


def make_actin(model_kind: str, salt: str) -> ReferenceSystem:
    if salt not in ACTIN_TOTALS:
        raise ConfigError(f"unknown salt {salt!r}; choose KCl or MgCl2")
    totals = list(ACTIN_TOTALS[salt])
    if model_kind == "data_driven":
        b = build_basis(2, 2, ("M", "m"))
        alphas = ACTIN_DATA_DRIVEN[salt]
        values = np.zeros((2, b.size))
        values[0] = alphas
        ties = _data_driven_structure(b)
        th = CoefficientMatrix(values, values != 0, ties)
        template = CoefficientMatrix(np.zeros((2, b.size)), np.ones((2, b.size), bool), ties)
        x0 = [[1e-3 * mt, mt - 1e-3 * mt] for mt in totals]
        return ReferenceSystem(f"actin_data_driven_{salt}", ODEModel(b, th), x0, 0.05, 0.001,
                               np.ones(2, bool), template, totals,
                               {f"alpha{i}": v for i, v in enumerate(alphas)})
    if model_kind == "physical":
        b = build_basis(3, 2, ("P", "M", "m"))
        alphas = ACTIN_PHYSICAL[salt]
        th = _physical_matrix(b, alphas, [a for a, v in alphas.items() if v != 0])
        template = _physical_matrix(b, {}, range(11))
        x0 = [[ACTIN_P0, 1e-3 * mt, mt - 1e-3 * mt] for mt in totals]
        params = {f"alpha{i}": alphas.get(i, 0.0) for i in range(11)}
        return ReferenceSystem(f"actin_physical_{salt}", ODEModel(b, th), x0, ACTIN_HORIZON[salt], 0.05,
                               np.array([False, True, True]), template, totals, params)
    raise ConfigError(f"unknown actin model kind {model_kind!r}")


ACTIN_P0 = 1e-2
ACTIN_HORIZON = {"KCl": 4.0, "MgCl2": 2.0}


def fine_grid_solve(model: ODEModel, x0s, grids: list[np.ndarray], refine: int = 10,
                    max_step: float | None = None) -> list[np.ndarray]:
    """RK4 solutions sampled on each grid, with at least ``refine`` steps per interval."""
    out = []
    for x0, t in zip(x0s, grids):
        t = np.asarray(t, float)
        dt = np.diff(t)
        k = np.full(dt.shape, refine)
        if max_step:
            k = np.maximum(k, np.ceil(dt / max_step).astype(int))
        fine = np.concatenate([t[i] + dt[i] * np.arange(k[i]) / k[i] for i in range(dt.size)] + [t[-1:]])
        idx = np.concatenate([[0], np.cumsum(k)])
        sol = integrate_batch(model, np.asarray(x0, float)[None], np.diff(fine)[None],
                              IntegratorConfig("rk4", rk4_substeps=1), t0=t[0])
        sol.raise_first()
        traj = np.concatenate([np.asarray(x0, float)[None], sol.states[0]])
        out.append(traj[idx])
    return out


def generate_dataset(system: ReferenceSystem, initial_conditions=None, horizon: float | None = None,
                     dt=None, eps: float = 0.0, rng: np.random.Generator | None = None,
                     max_step: float | None = None) -> tuple[Dataset, Dataset]:
    """Simulate ``system`` and add noise.

    ``dt`` is a step (uniform grid on ``[0, horizon]``) or an explicit grid.
    Returns ``(noisy, clean)`` datasets; the clean copy is the exact
    simulation on the same grid.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    ics = initial_conditions if initial_conditions is not None else system.initial_conditions
    horizon = system.horizon if horizon is None else horizon
    dt = system.dt if dt is None else dt
    if eps < 0:
        raise ConfigError("noise strength must be non-negative")
    if np.ndim(dt) == 0:
        grid = TimeGrid.uniform(0.0, horizon, float(dt)).times
    else:
        grid = TimeGrid(dt).times
    sols = fine_grid_solve(system.model, ics, [grid] * len(ics), 10, max_step)
    children = rng.spawn(len(ics))
    totals = system.conserved_totals or [None] * len(ics)
    noisy, clean = [], []
    for i, y in enumerate(sols):
        tr = Trajectory(grid, y, system.observed.copy(), totals[i] if i < len(totals) else None)
        clean.append(tr)
        obs = inject_noise(tr, eps, children[i])
        # hidden components are not measurements; keep them out of the noisy copy
        obs.values[:, ~system.observed] = np.nan
        noisy.append(obs)
    return Dataset(noisy), Dataset(clean)
