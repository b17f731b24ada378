"""Partition dictionaries on a box and their evaluation on covariate samples.

Each basis function lives on one cell of a regular grid over ``[-B, B]^d``.
Within a cell the functions are tensor products of Legendre polynomials in
the cell-local coordinate; since ``|P_j| <= 1`` on ``[-1, 1]`` with
``P_j(1) = 1`` every function already has sup-norm one on its cell.
Column order is cell-major: all polynomial products of cell 0, then cell 1,
and so on, with cells and multi-indices both flattened in C order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.polynomial import legendre

from .errors import ArgumentError, DimensionTooLarge, DomainViolation, ShapeError

INDICATOR = "indicator-partition"
PIECEWISE_POLYNOMIAL = "piecewise-polynomial-partition"
KINDS = (INDICATOR, PIECEWISE_POLYNOMIAL)
_ALIASES = {"indicator": INDICATOR, "piecewise-polynomial": PIECEWISE_POLYNOMIAL}

DEFAULT_MAX_K = 10**6


@dataclass(frozen=True)
class Dictionary:
    kind: str
    d: int
    cells_per_axis: int
    degree: int
    B: float

    @property
    def k(self) -> int:
        return (self.cells_per_axis ** self.d) * (self.degree + 1) ** self.d

    @property
    def functions_per_cell(self) -> int:
        return (self.degree + 1) ** self.d

    @property
    def n_cells(self) -> int:
        return self.cells_per_axis ** self.d

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict, max_k: int = DEFAULT_MAX_K) -> "Dictionary":
        missing = [key for key in ("kind", "d", "cells_per_axis") if key not in obj]
        if missing:
            raise ArgumentError(f"dictionary is missing fields {missing}", field=missing[0])
        return build_dictionary(obj["kind"], obj["d"], obj["cells_per_axis"],
                                obj.get("degree", 0), obj.get("B", 1.0), max_k=max_k)


@dataclass(frozen=True)
class BasisMatrix:
    """Basis evaluated on a sample; row ``i`` is the dictionary vector at ``X_i``."""

    values: np.ndarray
    cells: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]


def build_dictionary(kind: str, d: int, cells_per_axis: int, degree: int = 0,
                     B: float = 1.0, *, max_k: int = DEFAULT_MAX_K) -> Dictionary:
    """Validate parameters and return a :class:`Dictionary`."""
    kind = _ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ArgumentError(f"unknown dictionary kind {kind!r}", field="kind")
    for name, value, low in (("d", d, 1), ("cells_per_axis", cells_per_axis, 1), ("degree", degree, 0)):
        if isinstance(value, bool) or int(value) != value or value < low:
            raise ArgumentError(f"{name} must be an integer >= {low}, got {value!r}", field=name)
    if kind == INDICATOR and degree != 0:
        raise ArgumentError("indicator dictionaries have degree 0", field="degree")
    if not (np.isfinite(B) and B > 0):
        raise ArgumentError(f"B must be positive and finite, got {B!r}", field="B")
    d, cells_per_axis, degree = int(d), int(cells_per_axis), int(degree)
    k = (cells_per_axis ** d) * (degree + 1) ** d
    if k > max_k:
        raise DimensionTooLarge(f"dictionary size k={k} exceeds the maximum {max_k}")
    return Dictionary(kind, d, cells_per_axis, degree, float(B))


def cell_coordinates(dictionary: Dictionary, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis cell indices and local coordinates in ``[-1, 1]``.

    Interior boundaries go to the right-hand cell; the rightmost cell is closed.
    """
    X = _as_design(dictionary, X)
    B, c = dictionary.B, dictionary.cells_per_axis
    bad = ~np.isfinite(X) | (np.abs(X) > B)
    if bad.any():
        row = int(np.flatnonzero(bad.any(axis=1))[0])
        raise DomainViolation(f"row {row} has a coordinate outside [-{B}, {B}]", row=row)
    scaled = (X + B) * c / (2.0 * B)
    idx = np.minimum(np.floor(scaled), c - 1).astype(np.int64)
    local = np.clip(2.0 * (scaled - idx) - 1.0, -1.0, 1.0)
    return idx, local


def evaluate_basis(dictionary: Dictionary, X: np.ndarray) -> BasisMatrix:
    """Evaluate every basis function at every row of ``X``."""
    idx, local = cell_coordinates(dictionary, X)
    n, d = idx.shape
    cell = np.ravel_multi_index(tuple(idx.T), (dictionary.cells_per_axis,) * d) if n else np.zeros(0, np.int64)
    # per-axis Legendre values, shape (n, d, p)
    per_axis = legendre.legvander(local, dictionary.degree)
    local_vals = np.ones((n, 1))
    for axis in range(d):
        local_vals = (local_vals[:, :, None] * per_axis[:, axis, None, :]).reshape(n, -1)
    values = np.zeros((n, dictionary.k))
    cols = cell[:, None] * dictionary.functions_per_cell + np.arange(dictionary.functions_per_cell)
    np.put_along_axis(values, cols, local_vals, axis=1)
    return BasisMatrix(values, cell)


def _as_design(dictionary: Dictionary, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and dictionary.d == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] != dictionary.d:
        raise ShapeError(f"expected an n x {dictionary.d} covariate matrix, got shape {X.shape}")
    return X
