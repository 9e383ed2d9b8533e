"""Sparse polynomial ODE models ``dx/dt = theta @ Lambda(x)``."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import basis as _basis
from .basis import PolynomialBasis, build_basis
from .errors import ConstraintError, InvalidDimensionError

Entry = tuple[int, int]


@dataclass(frozen=True)
class Tie:
    """Linear constraint ``theta[target] = scale * theta[source]``."""

    target: Entry
    source: Entry
    scale: float = 1.0

    def to_dict(self):
        return {"target": list(self.target), "source": list(self.source), "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["target"]), tuple(d["source"]), float(d["scale"]))


class CoefficientMatrix:
    """Dense ``d x M`` coefficients with an active mask and linear ties.

    Tied targets are not optimisation variables: they are recomputed from
    their root source after every update, so only *free* entries (active and
    not tied) are ever exposed to an optimiser.
    """

    def __init__(self, values, active=None, constraints: Iterable[Tie] = ()):
        values = np.array(values, dtype=float)
        if values.ndim != 2:
            raise InvalidDimensionError("coefficient matrix must be two-dimensional")
        self.values = values
        self.active = np.ones(values.shape, bool) if active is None else np.array(active, bool)
        if self.active.shape != values.shape:
            raise InvalidDimensionError("active mask shape does not match values")
        self.constraints = tuple(constraints)
        self._roots = self._resolve(self.constraints, values.shape)
        self._sync()

    @property
    def shape(self):
        return self.values.shape

    @staticmethod
    def _resolve(constraints, shape) -> dict[Entry, tuple[Entry, float]]:
        direct = {}
        for c in constraints:
            for e in (c.target, c.source):
                if not (0 <= e[0] < shape[0] and 0 <= e[1] < shape[1]):
                    raise ConstraintError(f"tie entry {e} outside matrix of shape {shape}")
            if c.target in direct:
                raise ConstraintError(f"entry {c.target} is tied twice")
            direct[c.target] = (c.source, c.scale)
        roots = {}
        for target in direct:
            seen = {target}
            src, scale = direct[target]
            while src in direct:
                if src in seen:
                    raise ConstraintError(f"tie cycle through {src}")
                seen.add(src)
                nxt, s = direct[src]
                src, scale = nxt, scale * s
            roots[target] = (src, scale)
        return roots

    def _sync(self):
        for target, (root, scale) in self._roots.items():
            on = bool(self.active[root])
            self.active[target] = on
            self.values[target] = scale * self.values[root] if on else 0.0
        self.values[~self.active] = 0.0

    # -- free-parameter view --------------------------------------------------

    @property
    def free_mask(self) -> np.ndarray:
        mask = self.active.copy()
        for target in self._roots:
            mask[target] = False
        return mask

    @property
    def free_entries(self) -> list[Entry]:
        return [tuple(int(v) for v in e) for e in np.argwhere(self.free_mask)]

    def get_free(self) -> np.ndarray:
        return self.values[self.free_mask]

    def set_free(self, p):
        mask = self.free_mask
        p = np.asarray(p, float)
        if p.shape != (int(mask.sum()),):
            raise InvalidDimensionError(f"expected {int(mask.sum())} free parameters, got shape {p.shape}")
        self.values[mask] = p
        self._sync()

    def tie_tensor(self) -> np.ndarray:
        """``(d, M, K)`` array G with ``values = G @ free`` (the reparameterisation)."""
        entries = self.free_entries
        col = {e: k for k, e in enumerate(entries)}
        g = np.zeros(self.shape + (len(entries),))
        for e, k in col.items():
            g[e + (k,)] = 1.0
        for target, (root, scale) in self._roots.items():
            if root in col:
                g[target + (col[root],)] += scale
        return g

    def targets_of(self, source: Entry) -> list[Entry]:
        return [t for t, (root, _) in self._roots.items() if root == source]

    # -- pruning ----------------------------------------------------------------

    def deactivate(self, entry: Entry):
        entry = tuple(entry)
        if entry in self._roots:
            raise ConstraintError(f"{entry} is a tied target; prune its source instead")
        self.active[entry] = False
        self._sync()

    def apply_threshold(self, gamma: float) -> list[Entry]:
        """Freeze every free entry with ``|value| < gamma`` at zero (permanently).

        Returns the pruned free entries; their tied targets go with them.
        """
        if not gamma > 0:
            raise ValueError("threshold must be positive")
        mask = self.free_mask & (np.abs(self.values) < gamma)
        pruned = [tuple(int(v) for v in e) for e in np.argwhere(mask)]
        if pruned:
            self.active[mask] = False
            self._sync()
        return pruned

    def copy(self) -> "CoefficientMatrix":
        return CoefficientMatrix(self.values.copy(), self.active.copy(), self.constraints)

    def to_dict(self):
        return {
            "values": self.values.tolist(),
            "active": self.active.tolist(),
            "constraints": [c.to_dict() for c in self.constraints],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["values"], d["active"], [Tie.from_dict(c) for c in d.get("constraints", [])])


def apply_threshold(theta: CoefficientMatrix, gamma: float) -> int:
    return len(theta.apply_threshold(gamma))


class ODEModel:
    """Autonomous system ``dx/dt = theta @ Lambda(x)`` over a polynomial basis."""

    def __init__(self, basis: PolynomialBasis, theta: CoefficientMatrix | np.ndarray):
        if not isinstance(theta, CoefficientMatrix):
            theta = CoefficientMatrix(theta)
        if theta.shape != (basis.dimension, basis.size):
            raise InvalidDimensionError(
                f"theta has shape {theta.shape}, basis needs {(basis.dimension, basis.size)}"
            )
        self.basis = basis
        self.theta = theta

    @property
    def dimension(self) -> int:
        return self.basis.dimension

    def rhs(self, x) -> np.ndarray:
        lam = _basis.evaluate(self.basis, x)
        return lam @ self.theta.values.T

    def rhs_jacobian_state(self, x) -> np.ndarray:
        dlam = _basis.basis_jacobian(self.basis, x)
        return np.einsum("im,...mj->...ij", self.theta.values, dlam)

    def rhs_gradient_theta(self, x) -> np.ndarray:
        """``(d, K)`` derivative of f with respect to the free parameters.

        For an untied entry (i, j) the column is ``Lambda_j(x)`` in row ``i`` and
        zero elsewhere; ties add ``scale * Lambda_j'(x)`` in the target rows.
        """
        lam = _basis.evaluate(self.basis, x)
        return np.einsum("...m,imk->...ik", lam, self.theta.tie_tensor())

    def copy(self) -> "ODEModel":
        return ODEModel(self.basis, self.theta.copy())

    def render_equations(self, precision: int = 3) -> list[str]:
        return render_equations(self, precision)

    def to_dict(self):
        return {
            "dimension": self.basis.dimension,
            "order": self.basis.order,
            "names": list(self.basis.names),
            "terms": [list(t) for t in self.basis.terms],
            **self.theta.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        basis = build_basis(d["dimension"], d["order"], d.get("names"))
        if "terms" in d and [tuple(t) for t in d["terms"]] != list(basis.terms):
            raise InvalidDimensionError("stored term order does not match the basis ordering")
        return cls(basis, CoefficientMatrix.from_dict(d))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ODEModel":
        return cls.from_dict(json.loads(text))


def rhs_gradient_theta_structure(model: ODEModel, x) -> np.ndarray:
    return model.rhs_gradient_theta(x)


def _fmt(v: float, precision: int) -> str:
    return f"{v:.{precision}g}"


def render_equations(model: ODEModel, precision: int = 3) -> list[str]:
    lines = []
    vals, act = model.theta.values, model.theta.active
    for i, name in enumerate(model.basis.names):
        parts = []
        for j in range(model.basis.size):
            if not act[i, j]:
                continue
            v = vals[i, j]
            label = _basis.term_label(model.basis, j)
            mag = _fmt(abs(v), precision)
            term = mag if label == "1" else f"{mag}*{label}"
            if not parts:
                parts.append(("-" if v < 0 else "") + term)
            else:
                parts.append(("- " if v < 0 else "+ ") + term)
        lines.append(f"d{name}/dt = " + (" ".join(parts) if parts else "0"))
    return lines


def zero_model(basis: PolynomialBasis) -> ODEModel:
    return ODEModel(basis, CoefficientMatrix(np.zeros((basis.dimension, basis.size))))


def model_from_terms(basis: PolynomialBasis, coeffs: dict[tuple[int, Sequence[int]], float],
                     constraints: Sequence[Tie] = (), sparse: bool = True) -> ODEModel:
    """Build a model from ``{(row, exponents): value}``; other entries inactive if ``sparse``."""
    values = np.zeros((basis.dimension, basis.size))
    active = np.zeros(values.shape, bool) if sparse else np.ones(values.shape, bool)
    for (row, term), v in coeffs.items():
        j = basis.index(term)
        values[row, j] = v
        active[row, j] = True
    return ODEModel(basis, CoefficientMatrix(values, active, constraints))
