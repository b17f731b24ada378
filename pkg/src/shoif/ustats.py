"""Exact distinct-index U-statistics of sandwich kernels and related identities.

The order-``m`` statistic is

    (-1)^m U_{n,m}[ eps_a(1) z_1' Omega prod_{s=3}^m {(Q_s - Sigma) Omega} z_2 eps_b(2) ]

with ``Q_s = S_s z_s z_s'`` and ``Sigma Omega = I``.  Because
``(Q_s - Sigma) Omega = Q_s Omega - I``, expanding the product leaves path sums

    W_l = U_{n,l+2}[ eps_a(i) K(i,t_1) S(t_1) K(t_1,t_2) ... S(t_l) K(t_l,j) eps_b(j) ]

over distinct indices, with ``K(u,v) = z_u' Omega z_v``, and the order-``m``
term is ``sum_l (-1)^l C(m-2,l) W_l``.  Each distinct-index path sum is turned
into unrestricted sums by Moebius inversion over set partitions of the path
positions: a partition merges positions into one index, which produces a small
tensor network (node weights, kernel edges, self-loops) contracted with
``numpy.einsum``.

The kernel enters through factors ``K = left @ right.T``; the stable kernel,
an explicit inverse Gram or a known population inverse all fit this form.
Rows in the factor coordinates transform the middle factor into
``S_s right_s left_s' - I``, which is what the brute-force oracle multiplies.
"""

from __future__ import annotations

import itertools
import math
import re
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import ArgumentError, OrderTooHigh, ShapeError, TooLargeForBruteForce

MAX_ENGINE_ORDER = 8
BRUTE_FORCE_MAX_N = 14
BRUTE_FORCE_MAX_ORDER = 6

_LETTERS = "abcdefghijklmnopqrstuvwxy"
_BATCH = "z"


@dataclass(frozen=True)
class SandwichKernelSpec:
    """Inputs of one sandwich U-statistic.

    ``left`` and ``right`` are n x r factors of the kernel matrix.  ``groups``
    optionally labels rows so that the kernel vanishes between different
    labels; rows labelled ``-1`` have a zero kernel row.
    """

    eps_a: np.ndarray
    eps_b: np.ndarray
    weights: np.ndarray
    left: np.ndarray
    right: np.ndarray
    order: int
    groups: np.ndarray | None = None

    def __post_init__(self):
        n = self.left.shape[0]
        for name in ("eps_a", "eps_b", "weights"):
            if np.shape(getattr(self, name)) != (n,):
                raise ShapeError(f"{name} must have length {n}")
        if self.right.shape != self.left.shape:
            raise ShapeError("left and right kernel factors must have the same shape")
        if self.order < 2:
            raise ArgumentError("order must be at least 2")
        if self.order > n:
            raise ArgumentError(f"order {self.order} exceeds sample size {n}")

    @property
    def n(self) -> int:
        return self.left.shape[0]

    @classmethod
    def from_kernel(cls, kernel, eps_a, eps_b, order: int, groups=None) -> "SandwichKernelSpec":
        left, right = kernel.factors()
        return cls(np.asarray(eps_a, float), np.asarray(eps_b, float), kernel.weights,
                   left, right, order, groups)


# ---------------------------------------------------------------- partitions

@dataclass(frozen=True)
class PartitionTable:
    m: int
    partitions: tuple[tuple[int, ...], ...]
    weights: tuple[int, ...]


def moebius_weight(blocks: tuple[int, ...]) -> int:
    """``prod_B (-1)^{|B|-1} (|B|-1)!`` for a restricted growth string."""
    out = 1
    for size in Counter(blocks).values():
        out *= (-1) ** (size - 1) * math.factorial(size - 1)
    return out


@lru_cache(maxsize=None)
def partition_table(m: int) -> PartitionTable:
    """All set partitions of ``m`` positions as restricted growth strings."""
    found = []

    def grow(prefix, n_blocks):
        if len(prefix) == m:
            found.append(tuple(prefix))
            return
        for b in range(n_blocks + 1):
            prefix.append(b)
            grow(prefix, max(n_blocks, b + 1))
            prefix.pop()

    grow([], 0)
    parts = tuple(found)
    return PartitionTable(m, parts, tuple(moebius_weight(p) for p in parts))


def bell_number(m: int) -> int:
    row = [1]
    for _ in range(m):
        nxt = [row[-1]]
        for value in row:
            nxt.append(nxt[-1] + value)
        row = nxt
    return row[0]


# ------------------------------------------------------------- brute force

def brute_force_ustat(spec: SandwichKernelSpec) -> float:
    """Literal enumeration of all ordered tuples of distinct indices."""
    n, m = spec.n, spec.order
    if n > BRUTE_FORCE_MAX_N or not 2 <= m <= BRUTE_FORCE_MAX_ORDER:
        raise TooLargeForBruteForce(
            f"brute force needs n <= {BRUTE_FORCE_MAX_N} and 2 <= m <= {BRUTE_FORCE_MAX_ORDER}; "
            f"got n={n}, m={m}")
    L, R, S = spec.left, spec.right, spec.weights
    eye = np.eye(L.shape[1])
    middle = [S[s] * np.outer(R[s], L[s]) - eye for s in range(n)]
    terms = []
    for idx in itertools.permutations(range(n), m):
        row = L[idx[0]]
        for s in idx[2:]:
            row = row @ middle[s]
        terms.append(spec.eps_a[idx[0]] * float(row @ R[idx[1]]) * spec.eps_b[idx[1]])
    return (-1) ** m * math.fsum(terms) / math.perm(n, m)


# --------------------------------------------------------- Moebius engine

class _Operands:
    """Per-instance arrays shared by all partitions: batched node data and kernels."""

    def __init__(self, spec: SandwichKernelSpec):
        n = spec.n
        if spec.groups is None:
            index = np.arange(n)[None, :]
            mask = np.ones((1, n), bool)
        else:
            labels = np.asarray(spec.groups)
            live = labels >= 0
            counts = np.bincount(labels[live])
            width = int(counts.max()) if counts.size else 1
            index = np.zeros((counts.size, width), np.int64)
            mask = np.zeros((counts.size, width), bool)
            order = np.argsort(labels[live], kind="stable")
            rows = np.flatnonzero(live)[order]
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
            for g, (start, count) in enumerate(zip(starts, counts)):
                index[g, :count] = rows[start:start + count]
                mask[g, :count] = True
        self.batched = spec.groups is not None
        self.mask = mask

        def gather(v):
            return np.where(mask, v[index], 0.0)

        self.eps_a = gather(spec.eps_a)
        self.eps_b = gather(spec.eps_b)
        self.weights = gather(spec.weights)
        self.left = np.where(mask[..., None], spec.left[index], 0.0)
        self.right = np.where(mask[..., None], spec.right[index], 0.0)
        self.diag = np.einsum("gir,gir->gi", self.left, self.right)
        self._kernel = None
        self._powers = {}

    @property
    def kernel(self) -> np.ndarray:
        if self._kernel is None:
            self._kernel = np.einsum("gir,gjr->gij", self.left, self.right)
        return self._kernel

    def edge_matrix(self, forward: int, backward: int) -> np.ndarray:
        key = (forward, backward)
        if key not in self._powers:
            K = self.kernel
            M = K ** forward if forward else 1.0
            if backward:
                M = M * np.swapaxes(K, 1, 2) ** backward
            self._powers[key] = M
        return self._powers[key]


_PATH_CACHE: dict = {}


def _network(blocks: tuple[int, ...], mode: str, batched_factor_ok: bool):
    """Einsum layout for one partition of the path positions.

    Returns ``(expression, node_terms, edge_terms)`` where node terms list the
    positions and self-loop multiplicity for each block, and edge terms are
    ``("factor", u, v)`` or ``("explicit", u, v, forward, backward)``.
    """
    n_blocks = max(blocks) + 1
    edges = Counter((blocks[p], blocks[p + 1]) for p in range(len(blocks) - 1))
    loops = [edges.get((b, b), 0) for b in range(n_blocks)]
    node_letters = _LETTERS[:n_blocks]
    spare = iter(_LETTERS[n_blocks:])
    subs = [_BATCH + node_letters[b] for b in range(n_blocks)]
    edge_terms = []
    seen = set()
    for (u, v), forward in edges.items():
        if u == v or (u, v) in seen:
            continue
        backward = edges.get((v, u), 0)
        seen.add((u, v))
        seen.add((v, u))
        if mode == "factor" and forward == 1 and backward == 0 and batched_factor_ok:
            e = next(spare)
            subs += [_BATCH + node_letters[u] + e, _BATCH + node_letters[v] + e]
            edge_terms.append(("factor", u, v))
        else:
            subs.append(_BATCH + node_letters[u] + node_letters[v])
            edge_terms.append(("explicit", u, v, forward, backward))
    expr = ",".join(subs) + "->" + _BATCH
    return expr, loops, edge_terms


def _shapes(ops: _Operands, n_blocks: int, edge_terms) -> list[tuple[int, ...]]:
    g, width = ops.mask.shape
    rank = ops.left.shape[2]
    shapes = [(g, width)] * n_blocks
    for term in edge_terms:
        if term[0] == "factor":
            shapes += [(g, width, rank), (g, width, rank)]
        else:
            shapes.append((g, width, width))
    return shapes


def _flops(text: str) -> float:
    match = re.search(r"Optimized FLOP count:\s*([0-9.eE+-]+)", text)
    return float(match.group(1)) if match else math.inf


def _plan(blocks, ops: _Operands):
    """Pick factored or explicit-kernel contraction by estimated FLOPs; cached."""
    n_blocks = max(blocks) + 1
    best = None
    for mode in ("factor", "explicit"):
        expr, loops, edge_terms = _network(blocks, mode, True)
        shapes = _shapes(ops, n_blocks, edge_terms)
        key = (expr, tuple(shapes))
        if key not in _PATH_CACHE:
            dummies = [np.broadcast_to(0.0, s) for s in shapes]
            path, text = np.einsum_path(expr, *dummies, optimize="greedy")
            _PATH_CACHE[key] = (path, _flops(text))
        path, flops = _PATH_CACHE[key]
        if best is None or flops < best[0]:
            best = (flops, expr, loops, edge_terms, path)
    return best[1:]


def _partition_value(blocks, node_weights, ops: _Operands) -> np.ndarray:
    """Unrestricted sum of the path network with positions merged per ``blocks``."""
    expr, loops, edge_terms, path = _plan(blocks, ops)
    n_blocks = max(blocks) + 1
    arrays = []
    for b in range(n_blocks):
        w = None
        for p, blk in enumerate(blocks):
            if blk == b:
                w = node_weights[p] if w is None else w * node_weights[p]
        if loops[b]:
            w = w * ops.diag ** loops[b]
        arrays.append(w)
    for term in edge_terms:
        if term[0] == "factor":
            arrays += [ops.left, ops.right]
        else:
            arrays.append(ops.edge_matrix(term[3], term[4]))
    return np.einsum(expr, *arrays, optimize=path)


def path_sums(spec: SandwichKernelSpec, max_middle: int | None = None) -> list[float]:
    """Distinct-index path sums ``W_0 .. W_{max_middle}`` (U-statistic scaled)."""
    if max_middle is None:
        max_middle = spec.order - 2
    ops = _Operands(spec)
    n = spec.n
    out = []
    for ell in range(max_middle + 1):
        positions = ell + 2
        node_weights = [ops.eps_a] + [ops.weights] * ell + [ops.eps_b]
        table = partition_table(positions)
        terms = []
        for blocks, mu in zip(table.partitions, table.weights):
            values = _partition_value(blocks, node_weights, ops)
            terms.extend((mu * values).tolist())
        out.append(math.fsum(terms) / math.perm(n, positions))
    return out


def order_terms(spec: SandwichKernelSpec) -> dict[int, float]:
    """Every order-``j`` term, ``j = 2..order``, from one set of path sums."""
    m = spec.order
    if m > MAX_ENGINE_ORDER:
        raise OrderTooHigh(f"order {m} exceeds the engine limit {MAX_ENGINE_ORDER}")
    W = path_sums(spec, m - 2)
    return {j: math.fsum((-1) ** ell * math.comb(j - 2, ell) * W[ell] for ell in range(j - 1))
            for j in range(2, m + 1)}


def partition_moebius_ustat(spec: SandwichKernelSpec) -> float:
    """Order-``m`` sandwich statistic through the partition engine."""
    return order_terms(spec)[spec.order]


# ------------------------------------------------- nested chain (dual path)

def nested_chain_ustat(eps_a, eps_b, basis, weights, omega, inner_order: int,
                       subtract_identity: bool = False) -> float:
    """``U_{n,2}[eps_a z_1' {U_{n-2,j}(Omega prod_{s} Q_s Omega) (- I)} z_2 eps_b]``.

    The inner average runs over ``inner_order`` distinct indices different
    from the outer pair; with ``inner_order = 0`` the inner matrix is
    ``Omega``.  Evaluated literally with explicit k x k matrices.
    """
    Z = np.asarray(basis, float)
    n, k = Z.shape
    if n > BRUTE_FORCE_MAX_N:
        raise TooLargeForBruteForce(f"nested evaluation needs n <= {BRUTE_FORCE_MAX_N}, got {n}")
    S = np.asarray(weights, float)
    Q = [S[s] * np.outer(Z[s], Z[s]) for s in range(n)]
    terms = []
    for i, j in itertools.permutations(range(n), 2):
        rest = [s for s in range(n) if s != i and s != j]
        inner = []
        for idx in itertools.permutations(rest, inner_order):
            M = omega
            for s in idx:
                M = M @ Q[s] @ omega
            inner.append(M)
        avg = np.sum(inner, axis=0) / math.perm(n - 2, inner_order)
        if subtract_identity:
            avg = avg - np.eye(k)
        terms.append(eps_a[i] * float(Z[i] @ avg @ Z[j]) * eps_b[j])
    return math.fsum(terms) / math.perm(n, 2)


# ----------------------------------------------------------- combinatorics

def stirling_first_unsigned(m: int, j: int) -> int:
    """Unsigned Stirling number of the first kind by the standard recurrence."""
    for name, value in (("m", m), ("j", j)):
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ArgumentError(f"{name} must be an integer")
    if not 1 <= j <= m <= 20:
        raise ArgumentError(f"need 1 <= j <= m <= 20, got m={m}, j={j}")
    return _stirling_row(int(m))[int(j)]


@lru_cache(maxsize=None)
def _stirling_row(m: int) -> tuple[int, ...]:
    if m == 0:
        return (1,)
    prev = _stirling_row(m - 1) + (0,)
    return tuple((prev[j - 1] if j else 0) + (m - 1) * prev[j] for j in range(m + 1))


def u_to_v_coefficients(m: int) -> list[tuple[int, int]]:
    """Signed coefficients turning an order-``m`` distinct sum into powers of n."""
    if not 2 <= m <= 10:
        raise ArgumentError(f"need 2 <= m <= 10, got {m}")
    return [(j, (-1) ** (m - j) * stirling_first_unsigned(m, j)) for j in range(m, 0, -1)]


def falling_factorial(n: int, m: int) -> int:
    return math.perm(n, m)


def cancellation_coefficient(m: int, c: int, c_dag: int) -> Fraction:
    """Exact coefficient of a copy-number pattern ``(c, c_dag)`` at order ``m``."""
    if m < 2 or c < 1 or not 0 <= c_dag <= c:
        raise ArgumentError(f"need m >= 2, c >= 1, 0 <= c_dag <= c; got {(m, c, c_dag)}")
    total = 0
    for j in range(m):
        prod = 1
        for ell in range(-c_dag + 1, c):
            prod *= j + ell
        total += (-1) ** j * math.comb(m - 1, j) * j * prod
    return Fraction((-1) ** c_dag * total, math.factorial(c_dag) * math.factorial(c))
