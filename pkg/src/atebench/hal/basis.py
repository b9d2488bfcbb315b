"""Zero-order indicator basis used by the highly adaptive lasso.

A basis function is ``phi(x) = prod_{k in s} I(x_k >= knot_k)`` for a support
set ``s`` of column indices.  Knots sit at observed (binned) data values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class CapacityError(RuntimeError):
    """The basis expansion would exceed the configured column cap."""


@dataclass(frozen=True, order=False)
class BasisFunction:
    support: tuple[int, ...]
    knot: tuple[float, ...]

    def __post_init__(self):
        support = tuple(int(i) for i in self.support)
        knot = tuple(float(v) for v in self.knot)
        if not support:
            raise ValueError("basis function needs a nonempty support")
        if len(support) != len(knot):
            raise ValueError("support and knot lengths differ")
        if any(b <= a for a, b in zip(support, support[1:])):
            raise ValueError("support indices must be strictly increasing")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "knot", knot)

    @property
    def degree(self) -> int:
        return len(self.support)

    def sort_key(self):
        return (len(self.support), self.support, self.knot)

    def __call__(self, x) -> int:
        return evaluate_basis(self, x)


def evaluate_basis(f: BasisFunction, x) -> int:
    """1 iff ``x[k] >= knot_k`` for every ``k`` in the support."""
    return int(all(x[k] >= t for k, t in zip(f.support, f.knot)))


def max_degree_for(p: int) -> int:
    return 2 if p >= 20 else 3


def knot_cap(n: int, degree: int) -> int:
    return max(1, math.floor(math.sqrt(n) / 2 ** (degree - 1)))


def bin_column(x: np.ndarray, max_knots: int) -> np.ndarray:
    """Map each value to the largest equal-mass cut point not above it.

    Cut points are observed values, so binned values stay inside the data.
    Columns with at most ``max_knots`` distinct values are returned as is.
    """
    x = np.asarray(x, dtype=float)
    uniq = np.unique(x)
    if len(uniq) <= max_knots:
        return x.copy()
    probs = np.linspace(0.0, 1.0, max_knots)
    cuts = np.unique(np.quantile(x, probs, method="inverted_cdf"))
    idx = np.searchsorted(cuts, x, side="right") - 1
    return cuts[idx]


def design_matrix(functions: Sequence[BasisFunction], X: np.ndarray, dtype=np.uint8) -> np.ndarray:
    """Evaluate every basis function on every row of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    out = np.empty((X.shape[0], len(functions)), dtype=dtype)
    for j, f in enumerate(functions):
        col = X[:, f.support[0]] >= f.knot[0]
        for k, t in zip(f.support[1:], f.knot[1:]):
            col &= X[:, k] >= t
        out[:, j] = col
    return out


@dataclass(frozen=True)
class BasisExpansion:
    functions: tuple[BasisFunction, ...]
    design: np.ndarray

    @property
    def n_functions(self) -> int:
        return len(self.functions)


def enumerate_basis(
    X: np.ndarray,
    max_degree: int | None = None,
    max_columns: int = 20_000,
    knot_rule: bool = True,
) -> BasisExpansion:
    """Build the deduplicated indicator basis for design matrix ``X``.

    For every support of size up to ``max_degree`` the knots are the unique
    combinations of (binned) observed values on that support.  Candidates are
    ordered by ``(degree, support, knot)`` and a candidate whose training
    column repeats an earlier one, or is identically zero, is dropped.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least two rows to build a basis")
    if p == 0:
        return BasisExpansion((), np.zeros((n, 0), dtype=np.uint8))
    if max_degree is None:
        max_degree = max_degree_for(p)
    max_degree = min(max_degree, p)

    candidates: list[BasisFunction] = []
    for d in range(1, max_degree + 1):
        cap = knot_cap(n, d) if knot_rule else n
        binned = np.column_stack([bin_column(X[:, j], cap) for j in range(p)])
        for support in itertools.combinations(range(p), d):
            knots = np.unique(binned[:, support], axis=0)
            candidates.extend(BasisFunction(support, tuple(k)) for k in knots)
            if len(candidates) > max_columns * 4:
                raise CapacityError(
                    f"more than {max_columns * 4} candidate basis functions; "
                    "raise max_columns or lower the interaction degree"
                )
    candidates.sort(key=BasisFunction.sort_key)

    kept: list[BasisFunction] = []
    cols: list[np.ndarray] = []
    seen: set[bytes] = set()
    chunk = 2048
    for start in range(0, len(candidates), chunk):
        block = candidates[start:start + chunk]
        D = design_matrix(block, X)
        for j, f in enumerate(block):
            col = D[:, j]
            if not col.any():
                continue
            key = np.packbits(col).tobytes()
            if key in seen:
                continue
            seen.add(key)
            kept.append(f)
            cols.append(col)
            if len(kept) > max_columns:
                raise CapacityError(
                    f"basis exceeds the column cap of {max_columns}; "
                    "raise max_columns or lower the interaction degree"
                )
    design = np.column_stack(cols) if cols else np.zeros((n, 0), dtype=np.uint8)
    return BasisExpansion(tuple(kept), np.ascontiguousarray(design))
