"""The training loop: batches, Adam, L1 schedules and threshold pruning."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .basis import PolynomialBasis, evaluate, term_label
from .data import Dataset, Trajectory, sample_batch
from .errors import ConfigError, DegenerateDataError, TrainingDivergedError
from .integrate import IntegratorConfig
from .model import CoefficientMatrix, ODEModel
from .noise import NoiseField, initialize_noise_field
from .sensitivity import loss_and_gradient
from .sindy import build_problem, stlsq

log = logging.getLogger(__name__)

EMA_HALF_LIFE = 50
MAX_FAILED_BATCHES = 50
HIDDEN_FLOOR = 1e-6


@dataclass
class TrainConfig:
    m: int = 20
    n: int = 5
    iterations: int = 20_000
    loss_threshold: float = 0.0
    lr: float = 1e-2
    lr_end: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    mu_start: float = 1e-3
    mu_end: float = 1e-5
    gamma_start: float = 1e-4
    gamma_end: float = 1e-3
    threshold_period: int = 100
    seed: int = 0
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    init: str = "random_small"
    learn_noise: bool = False
    noise_eps: float = 0.0
    noise_lr: float = 0.1
    noise_warmup: int = 0
    noise_penalty_start: float = 0.0
    noise_penalty_end: float = 0.0
    hidden_lr: float = 0.05
    scale_loss: bool = False
    precondition: bool = False
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.integrator, dict):
            self.integrator = IntegratorConfig(**self.integrator)
        if self.m < 1 or self.n < 1:
            raise ConfigError("m and n must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        for name in ("lr", "mu_start", "mu_end", "gamma_start", "gamma_end"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr_end is not None and not self.lr_end > 0:
            raise ConfigError("lr_end must be positive")
        if self.threshold_period < 1:
            raise ConfigError("threshold_period must be >= 1")
        if self.init not in ("random_small", "regression_warm_start"):
            raise ConfigError(f"unknown init strategy {self.init!r}")
        if self.noise_penalty_start < 0 or self.noise_penalty_end < 0:
            raise ConfigError("noise penalties must be non-negative")
        if (self.noise_penalty_start == 0) != (self.noise_penalty_end == 0):
            raise ConfigError("noise penalty start and end must both be zero or both positive")
        if self.noise_eps < 0 or self.noise_lr <= 0 or self.hidden_lr <= 0:
            raise ConfigError("noise_eps must be >= 0; noise_lr and hidden_lr > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def log_linear(start: float, end: float, frac: float) -> float:
    """Geometric interpolation; exact at both ends."""
    if frac <= 0:
        return start
    if frac >= 1:
        return end
    return start * (end / start) ** frac


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moments and a per-entry step count (entries may update sparsely)."""

    m: np.ndarray
    v: np.ndarray
    t: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=np.int64))


def adam_update(params: np.ndarray, grads: np.ndarray, state: AdamState, lr, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8, mask: np.ndarray | None = None) -> np.ndarray:
    """In-place bias-corrected Adam step on the entries selected by ``mask``.

    ``lr`` may be a scalar or broadcast against ``params``.  Unselected entries
    (and their moments) are untouched.
    """
    if mask is None:
        mask = np.ones(params.shape, bool)
    mask = np.broadcast_to(mask, params.shape)
    g = grads[mask]
    state.t[mask] += 1
    t = state.t[mask]
    state.m[mask] = beta1 * state.m[mask] + (1 - beta1) * g
    state.v[mask] = beta2 * state.v[mask] + (1 - beta2) * g * g
    m_hat = state.m[mask] / (1 - beta1**t)
    v_hat = state.v[mask] / (1 - beta2**t)
    step = np.broadcast_to(lr, params.shape)[mask] * m_hat / (np.sqrt(v_hat) + eps)
    params[mask] -= step
    return params


# -- initialisation -----------------------------------------------------------


def initialize_theta(dataset: Dataset, basis: PolynomialBasis, strategy: str, rng: np.random.Generator,
                     template: CoefficientMatrix | None = None) -> CoefficientMatrix:
    """Starting coefficients on the free entries of ``template`` (default: all entries free)."""
    theta = template.copy() if template is not None else CoefficientMatrix(np.zeros((basis.dimension, basis.size)))
    k = int(theta.free_mask.sum())
    if strategy == "regression_warm_start":
        if dataset.hidden.size:
            warnings.warn("regression warm start needs fully observed data; using random_small", stacklevel=2)
            strategy = "random_small"
        else:
            ls = stlsq(build_problem(dataset, basis), 0.0)
            theta.set_free(ls.values[theta.free_mask])
            return theta
    if strategy != "random_small":
        raise ConfigError(f"unknown init strategy {strategy!r}")
    theta.set_free(rng.uniform(-0.1, 0.1, size=k))
    return theta


def estimate_hidden_initial(traj: Trajectory, elongation_guess: float, observed_index: int = 1,
                            floor: float = HIDDEN_FLOOR) -> float:
    """Filament number at t0 from ``dM/dt ~ elongation * m * P``.

    ``observed_index`` is the column of M; m is ``conserved_total - M``.
    """
    if traj.conserved_total is None:
        raise ConfigError("trajectory needs a conserved total to derive m(t)")
    M = traj.values[:, observed_index]
    m0 = traj.conserved_total - M[0]
    if m0 <= 0:
        raise DegenerateDataError(f"monomer concentration at t0 is {m0}; cannot estimate P0")
    dmdt = (M[1] - M[0]) / (traj.times[1] - traj.times[0])
    return max(float(dmdt / (elongation_guess * m0)), floor)


# -- training -------------------------------------------------------------------


@dataclass
class FittedModel:
    model: ODEModel
    noise: NoiseField | None
    hidden_init: np.ndarray | None
    loss_history: list
    smoothed_history: list
    prune_events: list
    iterations: int
    failed_batches: int = 0

    def sidecar(self) -> dict:
        return {
            "noise": self.noise.to_dict() if self.noise is not None else None,
            "hidden_init": self.hidden_init.tolist() if self.hidden_init is not None else None,
            "loss_history": self.loss_history,
            "smoothed_history": self.smoothed_history,
            "prune_events": [list(e) for e in self.prune_events],
            "iterations": self.iterations,
        }

    def save(self, model_path, sidecar_path):
        with open(model_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.model.to_json() + "\n")
        with open(sidecar_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.sidecar(), fh)
            fh.write("\n")


def loss_weights(dataset: Dataset) -> np.ndarray:
    """``1 / max|y_i|^2`` per observed dimension, so every component counts alike."""
    obs = dataset.observed
    ref = np.max([np.max(np.abs(tr.values[:, obs]), axis=0) for tr in dataset], axis=0)
    return 1.0 / np.maximum(ref, 1e-12) ** 2


def coefficient_scales(dataset: Dataset, basis: PolynomialBasis) -> np.ndarray:
    """Per-entry step multipliers ``max|y_i| / max|Lambda_j(y)|``.

    Adam moves every entry by roughly ``lr`` per step; multiplying by these
    scales makes that step a fixed fraction of each term's contribution to
    ``dx_i/dt`` instead.  Needs every component observed.
    """
    if dataset.hidden.size:
        raise ConfigError("preconditioning needs every state component observed")
    y = np.concatenate([tr.values for tr in dataset])
    ref = np.maximum(np.max(np.abs(y), axis=0), 1e-12)
    feat = np.maximum(np.max(np.abs(evaluate(basis, y)), axis=0), 1e-12)
    return ref[:, None] / feat[None, :]


def _log_line(it, smooth, active, mu, gamma):
    return f"{it} {smooth:.6e} {active} {mu:.3e} {gamma:.3e}"


def train(dataset: Dataset, basis: PolynomialBasis, config: TrainConfig,
          theta0: CoefficientMatrix | None = None, hidden_init=None,
          template: CoefficientMatrix | None = None,
          log_sink: Callable[[str], None] | None = None) -> FittedModel:
    """Fit a sparse ODE model to ``dataset``.

    Each iteration samples a batch, evaluates loss and gradients by forward
    sensitivities, takes an Adam step on the free coefficients (plus any
    noise offsets in the batch and the hidden initial values), and every
    ``threshold_period`` iterations prunes coefficients below the current
    threshold.  The L1 weight, threshold and learning rate follow log-linear
    schedules.  ``log_sink`` receives lines ``iteration smoothed_loss
    active mu gamma``.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    if theta0 is not None:
        theta = theta0.copy()
    else:
        theta = initialize_theta(dataset, basis, cfg.init, rng, template)
    model = ODEModel(basis, theta)
    hid = dataset.hidden
    hidden = None
    if hid.size:
        if hidden_init is None:
            raise ConfigError("dataset has hidden components; hidden_init is required")
        hidden = np.array(hidden_init, float).reshape(len(dataset), hid.size)
        if np.any(hidden <= 0):
            raise ConfigError("hidden initial values must be positive (they are learned in log space)")
        log_hidden = np.log(hidden)
        hid_state = AdamState.zeros(log_hidden.shape)
    weights = loss_weights(dataset) if cfg.scale_loss else None
    noise = initialize_noise_field(dataset, cfg.noise_eps) if cfg.learn_noise else None
    if noise is not None:
        eps_ref = cfg.noise_eps if cfg.noise_eps > 0 else 0.01
        noise_lr0 = cfg.noise_lr * eps_ref * np.maximum(noise.scale_reference, 1e-12)
        noise_state = AdamState.zeros(noise.offsets.shape)
    th_state = AdamState.zeros(theta.shape)
    lr_scale = coefficient_scales(dataset, basis) if cfg.precondition else 1.0
    alpha = 1.0 - 0.5 ** (1.0 / EMA_HALF_LIFE)
    smooth = None
    history, smoothed, events = [], [], []
    failed_streak = failed_total = 0
    lr_end = cfg.lr if cfg.lr_end is None else cfg.lr_end
    it = 0
    for it in range(cfg.iterations):
        frac = it / max(cfg.iterations - 1, 1)
        mu = log_linear(cfg.mu_start, cfg.mu_end, frac)
        gamma = log_linear(cfg.gamma_start, cfg.gamma_end, frac)
        lr = log_linear(cfg.lr, lr_end, frac)
        batch = sample_batch(dataset, cfg.m, cfg.n, rng)
        use_noise = noise is not None and it >= cfg.noise_warmup
        res = loss_and_gradient(batch, model, mu, cfg.integrator, noise if use_noise else None, hidden,
                                weights)
        loss = float(res.loss)
        if use_noise and cfg.noise_penalty_start > 0:
            # shrinkage toward zero noise, relaxed along the schedule
            lam = log_linear(cfg.noise_penalty_start, cfg.noise_penalty_end, frac)
            w = np.ones(noise.offsets.shape[1]) if weights is None else weights
            e = noise.gather(batch)
            loss += lam * float(np.sum(w * e * e))
            res.grad_noise = res.grad_noise + 2.0 * lam * w * e

        if res.all_failed:
            failed_streak += 1
            failed_total += 1
            if failed_streak >= MAX_FAILED_BATCHES:
                raise TrainingDivergedError(
                    f"{MAX_FAILED_BATCHES} consecutive batches failed to integrate (iteration {it})",
                    history + [loss],
                )
        else:
            failed_streak = 0
            free = theta.free_mask
            g = np.zeros(theta.shape)
            g[free] = res.grad_theta
            adam_update(theta.values, g, th_state, lr * lr_scale, cfg.beta1, cfg.beta2, cfg.eps_adam, free)
            theta.set_free(theta.values[free])
            if use_noise:
                rows = noise.rows(batch)
                gn = np.zeros_like(noise.offsets)
                np.add.at(gn, rows, res.grad_noise)
                touched = np.zeros(noise.offsets.shape[0], bool)
                touched[rows.ravel()] = True
                adam_update(noise.offsets, gn, noise_state, noise_lr0 * (lr / cfg.lr),
                            cfg.beta1, cfg.beta2, cfg.eps_adam, touched[:, None])
            if hidden is not None:
                gh = np.zeros_like(hidden)
                np.add.at(gh, batch.traj, res.grad_hidden)
                touched = np.zeros(hidden.shape[0], bool)
                touched[batch.traj] = True
                # chain rule into log space
                adam_update(log_hidden, gh * hidden, hid_state, cfg.hidden_lr * (lr / cfg.lr),
                            cfg.beta1, cfg.beta2, cfg.eps_adam, touched[:, None])
                hidden = np.exp(log_hidden)

        if (it + 1) % cfg.threshold_period == 0:
            for i, j in theta.apply_threshold(gamma):
                events.append((it + 1, f"d{basis.names[i]}/dt: {term_label(basis, j)}"))

        history.append(loss)
        smooth = loss if smooth is None else (1 - alpha) * smooth + alpha * loss
        smoothed.append(smooth)
        if log_sink is not None and ((it + 1) % cfg.log_every == 0 or it == 0):
            log_sink(_log_line(it + 1, smooth, int(theta.active.sum()), mu, gamma))
        if smooth < cfg.loss_threshold:
            break
    return FittedModel(model, noise, hidden, history, smoothed, events, it + 1, failed_total)


def per_sample_loss(dataset: Dataset, fitted: FittedModel, cfg: IntegratorConfig | None = None) -> float:
    """Mean squared mismatch per observed value when each trajectory is simulated from its start."""
    from .integrate import integrate_batch

    cfg = cfg or IntegratorConfig()
    obs = dataset.observed
    total, count = 0.0, 0
    for i, tr in enumerate(dataset):
        x0 = tr.values[0].copy()
        if fitted.noise is not None:
            x0[obs] -= fitted.noise.trajectory(i)[0]
        if fitted.hidden_init is not None:
            x0[dataset.hidden] = fitted.hidden_init[i]
        sol = integrate_batch(fitted.model, x0[None], np.diff(tr.times)[None], cfg, t0=tr.times[0])
        if sol.failed[0]:
            return float("inf")
        r = sol.states[0][:, obs] - tr.values[1:, obs]
        if fitted.noise is not None:
            r = r + fitted.noise.trajectory(i)[1:]
        total += float(np.sum(r * r))
        count += r.size
    return total / count
