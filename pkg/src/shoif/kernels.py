"""Weighted Gram matrices and the SVD-based projection kernel.

The stable kernel never inverts the sample Gram matrix.  Writing the weighted
basis matrix as ``diag(|S|^{1/2}) Z = U D V'`` and ``sign`` for the common sign
of the weights, the inverse Gram is ``sign * n * V D^{-2} V'``.  The kernel
``z_i' Omega_hat z_j`` therefore equals ``sign * n * r_i . r_j`` with
``r_i = D^{-1} V' z_i``, and for rows carrying weight ``r_i`` is simply the
``i``-th row of ``U`` divided by ``|S_i|^{1/2}``.  Only the column space of the
weighted basis enters, so the kernel is unchanged when the dictionary is
replaced by any invertible linear transformation of itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .dictionary import BasisMatrix
from .errors import DomainViolation, ShapeError, SingularGram

DEFAULT_RANK_TOLERANCE = 1e-10

BINARY_A = "binary-A"
UNIT_S = "unit-S"
GENERAL_S = "general-S"


@dataclass(frozen=True)
class GramPair:
    sigma_hat: np.ndarray
    n: int
    weight_kind: str


def _basis_values(basis) -> np.ndarray:
    values = basis.values if isinstance(basis, BasisMatrix) else np.asarray(basis, dtype=float)
    if values.ndim != 2:
        raise ShapeError(f"basis matrix must be two-dimensional, got shape {values.shape}")
    return values


def _weights(S, n: int) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.shape != (n,):
        raise ShapeError(f"weights must have length {n}, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        row = int(np.flatnonzero(~np.isfinite(S))[0])
        raise DomainViolation(f"weight in row {row} is not finite", row=row)
    return S


def weight_kind(S: np.ndarray) -> str:
    if np.all(S == 1.0):
        return UNIT_S
    if np.all((S == 0.0) | (S == 1.0)):
        return BINARY_A
    return GENERAL_S


def weighted_gram(basis, S) -> GramPair:
    """Sample Gram matrix ``n^{-1} Z' diag(S) Z``."""
    Z = _basis_values(basis)
    n = Z.shape[0]
    S = _weights(S, n)
    if not np.all(np.isfinite(Z)):
        raise DomainViolation("basis matrix has non-finite entries")
    sigma = (Z.T * S) @ Z / n
    sigma = 0.5 * (sigma + sigma.T)
    return GramPair(sigma, n, weight_kind(S))


@dataclass(frozen=True)
class StableKernel:
    """SVD factorization of the weighted basis matrix and the kernel it implies."""

    left_factor: np.ndarray
    basis: np.ndarray
    weights: np.ndarray
    singular_values: np.ndarray
    rank_tolerance: float
    right_factor: np.ndarray = field(repr=False)
    sign: float = 1.0
    scaled_rows: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def condition_number(self) -> float:
        """Condition number of the sample Gram matrix."""
        return float((self.singular_values[0] / self.singular_values[-1]) ** 2)

    def kernel_entry(self, i: int, j: int) -> float:
        """``z_i' Omega_hat z_j``."""
        return float(self.sign * self.n * self.scaled_rows[i] @ self.scaled_rows[j])

    def kernel_weighted(self, i: int, j: int) -> float:
        """``z_i' Omega_hat z_j S_j``."""
        return self.kernel_entry(i, j) * float(self.weights[j])

    def kernel_matrix(self) -> np.ndarray:
        R = self.scaled_rows
        return self.sign * self.n * (R @ R.T)

    def factors(self) -> tuple[np.ndarray, np.ndarray]:
        """``(L, R)`` with ``L @ R.T`` equal to the (unweighted) kernel matrix."""
        return self.sign * self.n * self.scaled_rows, self.scaled_rows


def stable_kernel(basis, S, rank_tolerance: float = DEFAULT_RANK_TOLERANCE) -> StableKernel:
    """Factor ``diag(|S|^{1/2}) Z`` by SVD and fail loudly below full rank."""
    Z = _basis_values(basis)
    n, k = Z.shape
    S = _weights(S, n)
    if not np.all(np.isfinite(Z)):
        raise DomainViolation("basis matrix has non-finite entries")
    if np.all(S >= 0):
        sign = 1.0
    elif np.all(S <= 0):
        sign = -1.0
    else:
        raise DomainViolation("weights must not change sign")
    kind = weight_kind(S)
    if kind != GENERAL_S:
        # A^2 = A, so Z' diag(A) Z and (diag(A) Z)' (diag(A) Z) coincide exactly.
        assert np.array_equal(S * S, S)
    root = np.sqrt(np.abs(S))
    U, D, Vt = np.linalg.svd(root[:, None] * Z, full_matrices=False)
    rank = int(np.sum(D > rank_tolerance * D[0])) if D.size and D[0] > 0 else 0
    if rank < k:
        smallest = float(D[-1]) if D.size == k else 0.0
        raise SingularGram(
            f"weighted basis matrix has numerical rank {rank} < k={k}; "
            f"smallest singular value {smallest:.3e} at relative tolerance {rank_tolerance:g}",
            rank=rank, smallest_singular_value=smallest)
    R = (Z @ Vt.T) / D
    weighted = root > 0
    R[weighted] = U[weighted] / root[weighted, None]
    for arr in (U, D, Vt, R):
        arr.setflags(write=False)
    return StableKernel(U, Z, S, D, rank_tolerance, Vt.T, sign, R)


def kernel_weighted_matrix(sk: StableKernel) -> np.ndarray:
    """Matrix with entries ``z_i' Omega_hat z_j S_j``."""
    return sk.kernel_matrix() * sk.weights[None, :]


def explicit_kernel_weighted_matrix(basis, S) -> np.ndarray:
    """Debug path: the same matrix through an explicit inverse of the Gram matrix."""
    Z = _basis_values(basis)
    gram = weighted_gram(Z, S)
    omega = np.linalg.inv(gram.sigma_hat)
    return (Z @ omega @ Z.T) * np.asarray(S, dtype=float)[None, :]


def support_groups(values: np.ndarray, coupling: np.ndarray | None = None) -> np.ndarray | None:
    """Label rows by connected components of the basis support pattern.

    Two columns are linked when some row is nonzero in both, or when
    ``coupling`` (a k x k matrix) is nonzero between them.  Rows in different
    components have kernel entry exactly zero whenever the inverse Gram shares
    that block structure.  Returns ``None`` when everything is one component;
    rows with an all-zero basis vector get label ``-1``.
    """
    n, k = values.shape
    rows, cols = np.nonzero(values)
    if rows.size == 0:
        return None
    # bipartite graph: nodes 0..n-1 rows, n..n+k-1 columns
    src = [rows, cols + n]
    dst = [cols + n, rows]
    if coupling is not None:
        a, b = np.nonzero(coupling)
        src.append(a + n)
        dst.append(b + n)
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    graph = coo_matrix((np.ones(src.size), (src, dst)), shape=(n + k, n + k))
    _, labels = connected_components(graph, directed=False)
    row_labels = labels[:n].copy()
    empty = ~np.any(values != 0, axis=1)
    row_labels[empty] = -1
    used = np.unique(row_labels[~empty])
    if used.size <= 1:
        return None
    remap = np.full(labels.max() + 1, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    out = np.where(empty, -1, remap[np.where(empty, 0, row_labels)])
    return out
