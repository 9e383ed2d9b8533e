"""Exact trajectory and loss gradients via the forward sensitivity equations.

Along a solution of ``dx/dt = f(x; p)`` the sensitivities ``S = dx/dq`` obey

    dS/dt = J(x) S + df/dq,      J = d f / d x,

with ``df/dq`` zero for initial-value parameters.  They are integrated with
the state in one augmented system, so gradients are exact up to solver error
(and exact derivatives of the discrete map when RK4 is used).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import evaluate_unchecked, jacobian_unchecked
from .data import Batch
from .errors import ConfigError
from .integrate import IntegratorConfig, TimeGrid, solve_batch
from .model import ODEModel
from .noise import NoiseField

FAILED_PIECE_LOSS = 1e6


@dataclass
class SensitivitySolution:
    states: np.ndarray  # (B, n, d)
    s_theta: np.ndarray  # (B, n, d, K)
    s_init: np.ndarray  # (B, n, d, H)
    failed: np.ndarray  # (B,)
    errors: list


def _augmented_rhs(model: ODEModel, n_init: int):
    b = model.basis
    d = b.dimension
    theta = model.theta.values
    theta_t = theta.T.copy()
    g = model.theta.tie_tensor()
    k = g.shape[2]
    p = k + n_init

    def fun(y):
        x = y[:, :d]
        lam = evaluate_unchecked(b, x)
        f = lam @ theta_t
        if p == 0:
            return f
        s = y[:, d:].reshape(-1, d, p)
        jac = np.einsum("im,bmj->bij", theta, jacobian_unchecked(b, x))
        ds = jac @ s
        if k:
            ds[:, :, :k] += np.einsum("bm,imk->bik", lam, g)
        return np.concatenate([f, ds.reshape(len(y), d * p)], axis=1)

    return fun, k


def integrate_with_sensitivity_batch(model: ODEModel, x0s, init_cols, dts, cfg: IntegratorConfig, t0=None):
    """Batched forward sensitivities.

    ``init_cols`` lists the initial-state components treated as parameters;
    their sensitivity columns start as unit vectors.  Free coefficients follow
    ``model.theta.free_entries`` order.
    """
    x0s = np.asarray(x0s, float)
    bsz, d = x0s.shape
    init_cols = list(init_cols)
    fun, k = _augmented_rhs(model, len(init_cols))
    p = k + len(init_cols)
    s0 = np.zeros((bsz, d, p))
    for h, c in enumerate(init_cols):
        s0[:, c, k + h] = 1.0
    y0 = np.concatenate([x0s, s0.reshape(bsz, d * p)], axis=1)
    sol = solve_batch(fun, y0, dts, cfg, t0)
    n = sol.states.shape[1]
    states = sol.states[:, :, :d]
    sens = sol.states[:, :, d:].reshape(bsz, n, d, p)
    return SensitivitySolution(states, sens[..., :k], sens[..., k:], sol.failed, sol.errors)


def integrate_with_sensitivity(model: ODEModel, x0, hidden_mask, grid, cfg: IntegratorConfig | None = None):
    """States, dx/dtheta_free and dx/dx0[hidden] at ``grid[1:]``.

    ``hidden_mask`` marks the initial-state components that are learnable.
    Raises the integration error of the solve if it fails.
    """
    cfg = cfg or IntegratorConfig()
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(grid)
    x0 = np.asarray(x0, float)
    cols = np.flatnonzero(np.asarray(hidden_mask, bool)) if hidden_mask is not None else []
    sol = integrate_with_sensitivity_batch(model, x0[None], cols, grid.intervals[None], cfg, grid.times[0])
    for e in sol.errors:
        if e is not None:
            raise e
    return sol.states[0], sol.s_theta[0], sol.s_init[0]


@dataclass
class LossResult:
    loss: float
    data_loss: float
    grad_theta: np.ndarray  # (K,) over model.theta.free_entries
    grad_noise: np.ndarray | None  # (m, n + 1, n_obs), aligned with NoiseField.rows(batch)
    grad_hidden: np.ndarray | None  # (m, n_hidden) per piece
    failed: np.ndarray  # (m,)
    failures: list = field(default_factory=list)  # (piece index, message)
    piece_loss: np.ndarray | None = None

    @property
    def all_failed(self) -> bool:
        return bool(self.failed.all())


def loss_and_gradient(batch: Batch, model: ODEModel, mu: float, cfg: IntegratorConfig | None = None,
                      noise: NoiseField | None = None, hidden_init: np.ndarray | None = None,
                      weights: np.ndarray | None = None) -> LossResult:
    """Trajectory-mismatch loss with an L1 penalty, and its gradients.

    ``loss = sum_pieces sum_{k>=1} ||x_hat(t_k) + e_k - y(t_k)||^2 (observed dims)
    + mu * sum |theta_free|``.  With a noise field the integration starts from
    ``y(t_0) - e_0``.  Hidden components start from ``hidden_init[traj]``
    (shape ``(n_traj, n_hidden)``), which requires pieces starting at sample 0.
    Pieces whose integration fails add ``FAILED_PIECE_LOSS`` and no gradient.
    ``weights`` (one per observed dimension) scales each squared residual.
    """
    if mu < 0:
        raise ValueError("mu must be non-negative")
    cfg = cfg or IntegratorConfig()
    obs = np.asarray(batch.observed, bool)
    hid = np.flatnonzero(~obs)
    obs_idx = np.flatnonzero(obs)
    m, n = batch.size, batch.n
    y = batch.values
    x0 = y[:, 0].copy()
    if hid.size:
        if hidden_init is None:
            raise ConfigError("hidden components require hidden initial values")
        if np.any(batch.start != 0):
            raise ConfigError("pieces with hidden components must start at sample 0")
        x0[:, hid] = np.asarray(hidden_init, float)[batch.traj]
    e = None
    if noise is not None:
        e = noise.gather(batch)  # (m, n + 1, n_obs)
        x0[:, obs_idx] -= e[:, 0]
    init_cols = list(hid) + (list(obs_idx) if noise is not None else [])
    sol = integrate_with_sensitivity_batch(
        model, x0, init_cols, np.diff(batch.times, axis=1), cfg, batch.times[:, 0]
    )
    r = sol.states[:, :, obs_idx] - y[:, 1:, obs_idx]
    if e is not None:
        r = r + e[:, 1:]
    ok = ~sol.failed
    r[~ok] = 0.0
    w = np.ones(obs_idx.size) if weights is None else np.asarray(weights, float)
    if w.shape != (obs_idx.size,):
        raise ConfigError(f"need one loss weight per observed dimension ({obs_idx.size})")
    piece = np.sum(w * r * r, axis=(1, 2))
    piece[~ok] = FAILED_PIECE_LOSS
    data_loss = float(piece.sum())
    p = model.theta.get_free()
    loss = data_loss + mu * float(np.abs(p).sum())

    two_r = 2.0 * w * r
    grad_theta = np.einsum("bko,bkoq->q", two_r, sol.s_theta[:, :, obs_idx, :]) + mu * np.sign(p)
    s_init_obs = sol.s_init[:, :, obs_idx, :]
    grad_hidden = None
    if hid.size:
        grad_hidden = np.einsum("bko,bkoh->bh", two_r, s_init_obs[..., : hid.size])
    grad_noise = None
    if noise is not None:
        grad_noise = np.zeros((m, n + 1, obs_idx.size))
        grad_noise[:, 1:] = two_r
        grad_noise[:, 0] = -np.einsum("bko,bkoj->bj", two_r, s_init_obs[..., hid.size :])
    failures = [(int(b), str(sol.errors[b])) for b in np.flatnonzero(sol.failed)]
    return LossResult(loss, data_loss, grad_theta, grad_noise, grad_hidden, sol.failed, failures, piece)
