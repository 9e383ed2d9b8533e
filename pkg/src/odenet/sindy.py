"""Derivative-based sparse regression baseline (sequentially thresholded least squares)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .basis import PolynomialBasis, evaluate
from .data import Dataset, Trajectory
from .errors import ConfigError, GridError
from .integrate import IntegratorConfig, integrate_batch
from .model import CoefficientMatrix, ODEModel

log = logging.getLogger(__name__)

FAIL_REL_ERROR = 0.5
DEFAULT_LAMBDAS = tuple(np.logspace(-5, 0, 26))


def _deriv_weights(ts: np.ndarray, at: float) -> np.ndarray:
    """Weights of the derivative at ``at`` of the quadratic through ``(ts, .)``."""
    t0, t1, t2 = ts
    return np.array([
        ((at - t1) + (at - t2)) / ((t0 - t1) * (t0 - t2)),
        ((at - t0) + (at - t2)) / ((t1 - t0) * (t1 - t2)),
        ((at - t0) + (at - t1)) / ((t2 - t0) * (t2 - t1)),
    ])


def estimate_derivatives(traj: Trajectory | tuple) -> np.ndarray:
    """Three-point derivative estimates on a possibly unequal grid.

    Interior samples use the centred stencil, endpoints the one-sided
    three-point stencil; both are exact for quadratics.
    """
    if isinstance(traj, Trajectory):
        t, y = traj.times, traj.values
    else:
        t, y = (np.asarray(a, float) for a in traj)
    t = np.asarray(t, float)
    if y.ndim == 1:
        y = y[:, None]
    if t.size < 3:
        raise GridError("need at least three samples to estimate derivatives")
    if np.any(np.diff(t) <= 0):
        raise GridError("time values must be strictly increasing (no repeats)")
    out = np.empty_like(y, dtype=float)
    h1 = t[1:-1] - t[:-2]
    h2 = t[2:] - t[1:-1]
    # written on differences so constant data gives exactly zero
    out[1:-1] = (
        (h2 / (h1 * (h1 + h2)))[:, None] * (y[1:-1] - y[:-2])
        + (h1 / (h2 * (h1 + h2)))[:, None] * (y[2:] - y[1:-1])
    )
    w = _deriv_weights(t[:3], t[0])
    out[0] = w[1] * (y[1] - y[0]) + w[2] * (y[2] - y[0])
    w = _deriv_weights(t[-3:], t[-1])
    out[-1] = w[0] * (y[-3] - y[-1]) + w[1] * (y[-2] - y[-1])
    return out


@dataclass
class RegressionProblem:
    features: np.ndarray  # (N, M)
    targets: np.ndarray  # (N, d)

    def __post_init__(self):
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("feature and target row counts differ")


def build_problem(dataset: Dataset, basis: PolynomialBasis) -> RegressionProblem:
    if dataset.hidden.size:
        raise ConfigError("derivative regression needs every state component observed")
    feats, targs = [], []
    for tr in dataset:
        dy = estimate_derivatives(tr)
        ok = np.all(np.isfinite(dy), axis=1)
        feats.append(evaluate(basis, tr.values[ok]))
        targs.append(dy[ok])
    return RegressionProblem(np.concatenate(feats), np.concatenate(targs))


def _lstsq(a, b):
    coef, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < a.shape[1]:
        log.warning("rank-deficient feature matrix (rank %d < %d); using least-norm solution", rank, a.shape[1])
    return coef


def stlsq(problem: RegressionProblem, lambda_cut: float, max_rounds: int = 20) -> CoefficientMatrix:
    """Alternate least squares and hard thresholding, one output dimension at a time."""
    if lambda_cut < 0:
        raise ValueError("lambda_cut must be non-negative")
    a, y = problem.features, problem.targets
    d, mm = y.shape[1], a.shape[1]
    values = np.zeros((d, mm))
    active = np.ones((d, mm), bool)
    for i in range(d):
        act = np.ones(mm, bool)
        coef = np.zeros(mm)
        for _ in range(max(1, max_rounds)):
            coef = np.zeros(mm)
            if act.any():
                coef[act] = _lstsq(a[:, act], y[:, i])
            if lambda_cut == 0:
                break
            keep = act & (np.abs(coef) >= lambda_cut)
            if np.array_equal(keep, act):
                break
            act = keep
        else:
            coef = np.zeros(mm)
            if act.any():
                coef[act] = _lstsq(a[:, act], y[:, i])
        values[i] = np.where(act, coef, 0.0)
        active[i] = act
    return CoefficientMatrix(values, active)


@dataclass
class SindyFit:
    model: ODEModel
    lambda_cut: float
    validation: dict


def _window_split(dataset: Dataset, val_fraction: float, rng: np.random.Generator):
    """One random contiguous block per trajectory is held out for validation."""
    blocks = []
    for tr in dataset:
        k = max(3, int(round(val_fraction * len(tr))))
        if k >= len(tr) - 2:
            raise ConfigError(f"trajectory of length {len(tr)} too short for a validation window of {k}")
        start = int(rng.integers(0, len(tr) - k + 1))
        blocks.append((start, start + k))
    return blocks


def _fit_rows(dataset: Dataset, basis: PolynomialBasis, blocks) -> RegressionProblem:
    feats, targs = [], []
    for tr, (a, b) in zip(dataset, blocks):
        dy = estimate_derivatives(tr)
        keep = np.ones(len(tr), bool)
        keep[a:b] = False
        keep &= np.all(np.isfinite(dy), axis=1)
        feats.append(evaluate(basis, tr.values[keep]))
        targs.append(dy[keep])
    return RegressionProblem(np.concatenate(feats), np.concatenate(targs))


def _simulation_score(model: ODEModel, dataset: Dataset, blocks) -> float:
    """Mean squared state error when each held-out window is simulated from its first sample."""
    total, count = 0.0, 0
    for tr, (a, b) in zip(dataset, blocks):
        sol = integrate_batch(model, tr.values[a][None], np.diff(tr.times[a:b])[None],
                              IntegratorConfig(max_steps=2000), t0=tr.times[a])
        if sol.failed[0]:
            return float("inf")
        r = sol.states[0] - tr.values[a + 1 : b]
        total += float(np.sum(r * r))
        count += r.size
    return total / count


def sindy_fit(dataset: Dataset, basis: PolynomialBasis, lambdas=DEFAULT_LAMBDAS, seed: int = 0,
              val_fraction: float = 0.2, max_rounds: int = 20, selection: str = "simulation") -> SindyFit:
    """Sweep ``lambdas`` and keep the threshold with the lowest validation score.

    With ``selection="simulation"`` (default) one random contiguous window
    per trajectory is held out; candidates are fitted on the remaining rows
    and scored by simulating each window from its first sample.
    ``selection="derivative"`` instead holds out random rows and scores the
    derivative residual, which is only informative when finite-difference
    noise is small next to the derivatives themselves.  Either way the
    winning threshold is refitted on all rows; ties go to the larger
    threshold.
    """
    if selection not in ("simulation", "derivative"):
        raise ConfigError(f"unknown selection {selection!r}")
    prob = build_problem(dataset, basis)
    rng = np.random.default_rng(seed)
    scores = {}
    if selection == "simulation":
        blocks = _window_split(dataset, val_fraction, rng)
        train = _fit_rows(dataset, basis, blocks)
        for lam in lambdas:
            th = stlsq(train, float(lam), max_rounds)
            scores[float(lam)] = _simulation_score(ODEModel(basis, th), dataset, blocks)
    else:
        n = prob.features.shape[0]
        perm = rng.permutation(n)
        n_val = max(1, int(round(val_fraction * n)))
        val, fit = perm[:n_val], perm[n_val:]
        train = RegressionProblem(prob.features[fit], prob.targets[fit])
        for lam in lambdas:
            th = stlsq(train, float(lam), max_rounds)
            res = prob.targets[val] - prob.features[val] @ th.values.T
            scores[float(lam)] = float(np.mean(res**2))
    best = min(scores, key=lambda k: (scores[k], -k))
    theta = stlsq(prob, best, max_rounds)
    return SindyFit(ODEModel(basis, theta), best, scores)


def _as_values(th) -> np.ndarray:
    if isinstance(th, ODEModel):
        th = th.theta
    if isinstance(th, CoefficientMatrix):
        return np.where(th.active, th.values, 0.0)
    return np.asarray(th, float)


def compare_models(truth, fitted) -> dict:
    """Active-set precision/recall and relative coefficient errors.

    Relative errors are taken over the entries that are nonzero in ``truth``.
    A fit counts as *failed* when it misses a true term or is off by more than
    50% on one.
    """
    t = _as_values(truth)
    f = _as_values(fitted)
    if t.shape != f.shape:
        raise ConfigError(f"shape mismatch: truth {t.shape} vs fitted {f.shape}")
    ta, fa = t != 0, f != 0
    tp = int((ta & fa).sum())
    precision = tp / int(fa.sum()) if fa.any() else (1.0 if not ta.any() else 0.0)
    recall = tp / int(ta.sum()) if ta.any() else 1.0
    rel = np.abs(f[ta] - t[ta]) / np.abs(t[ta])
    max_rel = float(rel.max()) if rel.size else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "exact_active_set": bool(np.array_equal(ta, fa)),
        "spurious": int((fa & ~ta).sum()),
        "missed": int((ta & ~fa).sum()),
        "max_relative_error": max_rel,
        "relative_errors": rel.tolist(),
        "failed": bool(recall < 1.0 or max_rel > FAIL_REL_ERROR),
    }
