"""Additive observation noise: synthetic injection and the learnable noise field."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Batch, Dataset, Trajectory
from .errors import InsufficientDataError

HIST_BINS = 40
HIST_SPAN = 4.0  # bins cover +/- HIST_SPAN sample standard deviations


def scale_reference(values: np.ndarray) -> np.ndarray:
    """Per-column sup norm ``max_t |y(t)|``."""
    return np.max(np.abs(values), axis=0)


def draw_noise(values: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """The realisation ``eps * ||y||_inf * eta`` that :func:`inject_noise` adds."""
    if eps < 0:
        raise ValueError("noise strength must be non-negative")
    eta = rng.standard_normal(values.shape)
    return eps * scale_reference(values) * eta


def inject_noise(traj: Trajectory, eps: float, rng: np.random.Generator) -> Trajectory:
    """Return a copy with white noise of strength ``eps`` on the observed columns.

    Hidden columns are left untouched.  ``eps == 0`` returns the data unchanged
    (and consumes no random numbers).
    """
    if eps < 0:
        raise ValueError("noise strength must be non-negative")
    values = traj.values.copy()
    if eps > 0:
        obs = traj.observed
        values[:, obs] = values[:, obs] + draw_noise(traj.values[:, obs], eps, rng)
    return Trajectory(traj.times.copy(), values, traj.observed.copy(), traj.conserved_total)


class NoiseField:
    """One learnable offset per sample and observed dimension, for every trajectory.

    Offsets are stored in a single ``(total_samples, n_observed)`` array;
    ``starts[i]`` is the row of sample 0 of trajectory ``i``.
    """

    def __init__(self, lengths, observed, scale_ref, offsets=None):
        self.lengths = np.asarray(lengths, dtype=np.int64)
        self.observed = np.asarray(observed, bool)
        self.starts = np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.int64)
        n_obs = int(self.observed.sum())
        total = int(self.lengths.sum())
        self.offsets = np.zeros((total, n_obs)) if offsets is None else np.array(offsets, float)
        if self.offsets.shape != (total, n_obs):
            raise ValueError(f"offsets must have shape {(total, n_obs)}")
        self.scale_reference = np.asarray(scale_ref, float)

    def trajectory(self, i: int) -> np.ndarray:
        s = self.starts[i]
        return self.offsets[s : s + self.lengths[i]]

    def rows(self, batch: Batch) -> np.ndarray:
        """``(m, n + 1)`` row indices of every sample in ``batch``."""
        return self.starts[batch.traj][:, None] + batch.start[:, None] + np.arange(batch.n + 1)

    def gather(self, batch: Batch) -> np.ndarray:
        return self.offsets[self.rows(batch)]

    def to_dict(self):
        return {
            "lengths": self.lengths.tolist(),
            "observed": self.observed.tolist(),
            "scale_reference": self.scale_reference.tolist(),
            "offsets": self.offsets.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["lengths"], d["observed"], d["scale_reference"], d["offsets"])


def initialize_noise_field(dataset: Dataset, eps_guess: float = 0.0) -> NoiseField:
    """All-zero offsets sized to ``dataset``.

    ``eps_guess`` is validated here and used by the trainer to scale noise
    step sizes; the field itself always starts unbiased at zero.
    """
    if eps_guess < 0:
        raise ValueError("eps_guess must be non-negative")
    obs = dataset.observed
    stacked = np.concatenate([t.values[:, obs] for t in dataset])
    return NoiseField([len(t) for t in dataset], obs, scale_reference(stacked))


@dataclass
class GaussianityReport:
    dimension: int
    mean: float
    std: float
    excess_kurtosis: float
    bin_centers: np.ndarray
    counts: np.ndarray
    reference_density: np.ndarray
    degenerate: bool

    def summary(self) -> dict:
        return {
            "dimension": self.dimension,
            "mean": self.mean,
            "std": self.std,
            "excess_kurtosis": self.excess_kurtosis,
            "degenerate": self.degenerate,
        }


def _report(values: np.ndarray, dim: int) -> GaussianityReport:
    mean = float(values.mean())
    std = float(values.std())
    if std == 0.0:
        centers = np.full(HIST_BINS, mean)
        counts = np.zeros(HIST_BINS, dtype=np.int64)
        counts[HIST_BINS // 2] = values.size
        return GaussianityReport(dim, mean, 0.0, float("nan"), centers, counts, np.zeros(HIST_BINS), True)
    z = (values - mean) / std
    kurt = float(np.mean(z**4) - 3.0)
    edges = np.linspace(mean - HIST_SPAN * std, mean + HIST_SPAN * std, HIST_BINS + 1)
    counts, _ = np.histogram(values, bins=edges)
    centers = 0.5 * (edges[1:] + edges[:-1])
    # expected counts per bin under N(mean, std^2)
    width = edges[1] - edges[0]
    density = np.exp(-0.5 * ((centers - mean) / std) ** 2) / (std * np.sqrt(2 * np.pi))
    return GaussianityReport(dim, mean, std, kurt, centers, counts, density * width * values.size, False)


def noise_gaussianity_report(field: NoiseField | np.ndarray) -> list[GaussianityReport]:
    """Histogram and moments of the offsets, one report per observed dimension."""
    offsets = field.offsets if isinstance(field, NoiseField) else np.asarray(field, float)
    if offsets.ndim == 1:
        offsets = offsets[:, None]
    if offsets.shape[0] < 10:
        raise InsufficientDataError(f"need at least 10 samples per dimension, got {offsets.shape[0]}")
    return [_report(offsets[:, j], j) for j in range(offsets.shape[1])]


def write_report_csv(path, reports: list[GaussianityReport]):
    with Path(path).open("w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dimension", "bin_center", "count", "reference"])
        for r in reports:
            for c, n, ref in zip(r.bin_centers, r.counts, r.reference_density):
                w.writerow([r.dimension, f"{c:.17g}", int(n), f"{ref:.17g}"])


def pearson(a, b) -> float:
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0
