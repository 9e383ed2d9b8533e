"""Observed trajectories, datasets and training batches."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, GridError, InvalidDimensionError
from .integrate import TimeGrid


@dataclass
class Trajectory:
    """Samples ``values[k] ~ x(times[k])``.

    Columns with ``observed[i] == False`` are hidden state components; their
    entries in ``values`` are placeholders and are never read.
    """

    times: np.ndarray
    values: np.ndarray
    observed: np.ndarray | None = None
    conserved_total: float | None = None

    def __post_init__(self):
        self.times = TimeGrid(self.times).times
        self.values = np.array(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.times.size:
            raise InvalidDimensionError("values must be (len(times), d)")
        d = self.values.shape[1]
        self.observed = np.ones(d, bool) if self.observed is None else np.array(self.observed, bool)
        if self.observed.shape != (d,):
            raise InvalidDimensionError("observed mask must have one entry per dimension")
        if not np.all(np.isfinite(self.values[:, self.observed])):
            raise GridError("observed values must be finite")

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.times.size

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.times)


@dataclass
class Dataset:
    trajectories: list[Trajectory]

    def __post_init__(self):
        if not self.trajectories:
            raise ConfigError("dataset is empty")
        d = {t.dimension for t in self.trajectories}
        if len(d) != 1:
            raise InvalidDimensionError("all trajectories must share one dimension")
        masks = {tuple(t.observed) for t in self.trajectories}
        if len(masks) != 1:
            raise InvalidDimensionError("all trajectories must share one observed mask")

    @property
    def dimension(self) -> int:
        return self.trajectories[0].dimension

    @property
    def observed(self) -> np.ndarray:
        return self.trajectories[0].observed

    @property
    def hidden(self) -> np.ndarray:
        return np.flatnonzero(~self.observed)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]


@dataclass
class Batch:
    """``m`` pieces of ``n + 1`` consecutive samples, stored as stacked arrays."""

    traj: np.ndarray  # (m,) trajectory index per piece
    start: np.ndarray  # (m,) index of the first sample
    times: np.ndarray  # (m, n + 1)
    values: np.ndarray  # (m, n + 1, d)
    observed: np.ndarray  # (d,)

    @property
    def size(self) -> int:
        return self.traj.size

    @property
    def n(self) -> int:
        return self.times.shape[1] - 1

    @classmethod
    def from_pieces(cls, dataset: Dataset, pieces: Sequence[tuple[int, int]], n: int) -> "Batch":
        traj = np.array([p[0] for p in pieces], dtype=np.int64)
        start = np.array([p[1] for p in pieces], dtype=np.int64)
        times = np.empty((len(pieces), n + 1))
        values = np.empty((len(pieces), n + 1, dataset.dimension))
        for b, (i, s) in enumerate(pieces):
            tr = dataset[i]
            if s < 0 or s + n >= len(tr):
                raise ConfigError(f"piece ({i}, {s}) with n={n} runs past trajectory of length {len(tr)}")
            times[b] = tr.times[s : s + n + 1]
            values[b] = tr.values[s : s + n + 1]
        return cls(traj, start, times, values, dataset.observed.copy())

    def permuted(self, order) -> "Batch":
        order = np.asarray(order)
        return Batch(self.traj[order], self.start[order], self.times[order], self.values[order], self.observed)


def sample_batch(dataset: Dataset, m: int, n: int, rng: np.random.Generator) -> Batch:
    """Draw ``m`` pieces uniformly, with replacement, over valid (trajectory, start) pairs.

    When the dataset has hidden components every piece starts at sample 0,
    since a hidden initial value is only known at the start of a trajectory.
    """
    if m < 1 or n < 1:
        raise ConfigError("m and n must be >= 1")
    hidden = dataset.hidden.size > 0
    counts = np.array([(1 if len(t) >= n + 1 else 0) if hidden else max(len(t) - n, 0) for t in dataset])
    total = int(counts.sum())
    if total == 0:
        raise ConfigError(f"no trajectory has at least n+1={n + 1} samples")
    flat = rng.integers(0, total, size=m)
    edges = np.cumsum(counts)
    traj = np.searchsorted(edges, flat, side="right")
    start = flat - (edges[traj] - counts[traj])
    return Batch.from_pieces(dataset, list(zip(traj.tolist(), start.tolist())), n)


# -- CSV ------------------------------------------------------------------------


def write_csv(path, times, values, names: Sequence[str]):
    path = Path(path)
    with path.open("w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *names])
        for t, row in zip(times, values):
            w.writerow([f"{float(t):.17g}", *(f"{float(v):.17g}" for v in row)])


def read_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if not header or header[0] != "t":
        raise ConfigError(f"{path}: first column must be 't'")
    arr = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, len(header))
    return header[1:], arr[:, 0], arr[:, 1:]
