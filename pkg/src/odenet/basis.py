"""Complete polynomial dictionaries.

Terms are ordered degree-major; inside a degree they follow the order of
``itertools.combinations_with_replacement`` over the variable indices, which
gives ``1, x1, x2, x1^2, x1*x2, x2^2`` for two variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb
from typing import Sequence

import numpy as np

from .errors import InvalidDimensionError, NonFiniteStateError


@dataclass(frozen=True)
class PolynomialBasis:
    dimension: int
    order: int
    terms: tuple[tuple[int, ...], ...]
    names: tuple[str, ...] = ()
    _exponents: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{i + 1}" for i in range(self.dimension)))
        if len(self.names) != self.dimension:
            raise InvalidDimensionError("need one variable name per dimension")
        exps = np.array(self.terms, dtype=np.int64).reshape(len(self.terms), self.dimension)
        exps.setflags(write=False)
        object.__setattr__(self, "_exponents", exps)

    @property
    def size(self) -> int:
        return len(self.terms)

    @property
    def exponents(self) -> np.ndarray:
        """Read-only ``(M, d)`` integer array of exponents."""
        return self._exponents

    def index(self, term: Sequence[int]) -> int:
        return self.terms.index(tuple(term))

    def __len__(self):
        return len(self.terms)


def build_basis(d: int, p: int, names: Sequence[str] | None = None) -> PolynomialBasis:
    """All monomials in ``d`` variables of total degree at most ``p``."""
    if int(d) != d or d < 1:
        raise InvalidDimensionError(f"dimension must be a positive integer, got {d!r}")
    if int(p) != p or p < 0:
        raise InvalidDimensionError(f"order must be a non-negative integer, got {p!r}")
    d, p = int(d), int(p)
    terms = []
    for degree in range(p + 1):
        for combo in combinations_with_replacement(range(d), degree):
            e = [0] * d
            for i in combo:
                e[i] += 1
            terms.append(tuple(e))
    assert len(terms) == comb(p + d, p)
    return PolynomialBasis(d, p, tuple(terms), tuple(names) if names else ())


def _check_state(basis: PolynomialBasis, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != basis.dimension:
        raise InvalidDimensionError(f"state has {x.shape[-1]} components, basis expects {basis.dimension}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError("state contains non-finite values")
    return x


def evaluate_unchecked(basis: PolynomialBasis, x: np.ndarray) -> np.ndarray:
    # x: (..., d) -> (..., M); no validation, used on the integrator hot path
    return np.prod(x[..., None, :] ** basis.exponents, axis=-1)


def jacobian_unchecked(basis: PolynomialBasis, x: np.ndarray) -> np.ndarray:
    # x: (..., d) -> (..., M, d)
    e = basis.exponents
    pw = x[..., None, :] ** e
    dpw = e * x[..., None, :] ** np.maximum(e - 1, 0)
    out = np.empty(pw.shape)
    for i in range(basis.dimension):
        tmp = pw.copy()
        tmp[..., i] = dpw[..., i]
        out[..., i] = np.prod(tmp, axis=-1)
    return out


def evaluate(basis: PolynomialBasis, x) -> np.ndarray:
    """Evaluate every monomial at ``x``.

    ``x`` may be a single state of length ``d`` or a stack of states with the
    state index last; the result has ``M`` in place of ``d``.
    """
    return evaluate_unchecked(basis, _check_state(basis, x))


def basis_jacobian(basis: PolynomialBasis, x) -> np.ndarray:
    """Partial derivatives of each monomial; entry ``[j, i]`` is dLambda_j/dx_i."""
    return jacobian_unchecked(basis, _check_state(basis, x))


def term_label(basis: PolynomialBasis, j: int) -> str:
    if not 0 <= j < basis.size:
        raise IndexError(f"term index {j} out of range for basis of size {basis.size}")
    parts = []
    for name, k in zip(basis.names, basis.terms[j]):
        if k == 1:
            parts.append(name)
        elif k > 1:
            parts.append(f"{name}^{k}")
    return "*".join(parts) if parts else "1"
