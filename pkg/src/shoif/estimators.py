"""Doubly robust functionals, first-order estimates and higher-order corrections.

Two functionals are provided.  For the treated mean the Gram weight is the
treatment indicator, the left residual is ``A a_hat - 1`` and the right
residual ``A (b_hat - Y)``; for the expected conditional covariance the
weight is one, the left residual ``A - a_hat`` and the right residual
``b_hat - Y``.  With these signs the expected order-2 correction is minus the
projected first-order bias, so adding corrections removes bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dictionary import Dictionary, evaluate_basis
from .errors import (ArgumentError, EmptyData, NuisanceBoundViolation, OrderTooHigh,
                     ShapeError, SingularGram, Underdetermined)
from .kernels import DEFAULT_RANK_TOLERANCE, stable_kernel, support_groups, weighted_gram
from .ustats import (MAX_ENGINE_ORDER, SandwichKernelSpec, nested_chain_ustat, order_terms)

CANONICAL = "canonical"
FINITE_SAMPLE_PREFACTORS = "finite-sample-prefactors"
CONVENTIONS = (CANONICAL, FINITE_SAMPLE_PREFACTORS)
_CONVENTION_ALIASES = {"prefactors": FINITE_SAMPLE_PREFACTORS}

DEFAULT_NUISANCE_BOUND = 100.0


# ------------------------------------------------------------------ data

@dataclass(frozen=True)
class ObservationSet:
    """``n`` rows of covariates ``X`` (n x d), weight variable ``A`` and outcome ``Y``."""

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "Y", np.asarray(self.Y, dtype=float))
        n = X.shape[0]
        if self.A.shape != (n,) or self.Y.shape != (n,):
            raise ShapeError("X, A and Y must have the same number of rows")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def take(self, idx) -> "ObservationSet":
        return ObservationSet(self.X[idx], self.A[idx], self.Y[idx])


@dataclass(frozen=True)
class NuisanceFit:
    """Fitted ``a_hat`` and ``b_hat``: callables of ``X`` or per-row value columns."""

    a_hat: Callable[[np.ndarray], np.ndarray] | np.ndarray
    b_hat: Callable[[np.ndarray], np.ndarray] | np.ndarray
    provenance: str = "external-file"
    bound: float = DEFAULT_NUISANCE_BOUND

    def take(self, idx) -> "NuisanceFit":
        pick = (lambda f: f if callable(f) else np.asarray(f)[idx])
        return NuisanceFit(pick(self.a_hat), pick(self.b_hat), self.provenance, self.bound)


def _column(f, X: np.ndarray, n: int, name: str) -> np.ndarray:
    values = np.asarray(f(X) if callable(f) else f, dtype=float)
    if values.shape != (n,):
        raise ShapeError(f"{name} has shape {values.shape}, expected ({n},)", field=name)
    return values


@dataclass(frozen=True)
class FittedSample:
    """Observations with their nuisance fit, resampled together."""

    data: ObservationSet
    fit: NuisanceFit

    @property
    def n(self) -> int:
        return self.data.n

    def take(self, idx) -> "FittedSample":
        return FittedSample(self.data.take(idx), self.fit.take(idx))


@dataclass(frozen=True)
class FunctionalSpec:
    name: str
    weight_map: Callable[[ObservationSet], np.ndarray]
    residual_a: Callable[[np.ndarray, ObservationSet], np.ndarray]
    residual_b: Callable[[np.ndarray, ObservationSet], np.ndarray]
    first_order_map: Callable[[np.ndarray, np.ndarray, ObservationSet], np.ndarray]
    binary_weight: bool

    def nuisance_values(self, fit: NuisanceFit, data: ObservationSet) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate and validate the fit on the sample; bound violations are errors."""
        a = _column(fit.a_hat, data.X, data.n, "a_hat")
        b = _column(fit.b_hat, data.X, data.n, "b_hat")
        for name, v in (("a_hat", a), ("b_hat", b)):
            bad = ~np.isfinite(v) | (np.abs(v) > fit.bound)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise NuisanceBoundViolation(
                    f"{name} in row {row} is {v[row]!r}, outside [-{fit.bound}, {fit.bound}]",
                    row=row, field=name)
        if self.binary_weight:
            low = a < 1.0
            if low.any():
                row = int(np.flatnonzero(low)[0])
                raise NuisanceBoundViolation(
                    f"a_hat in row {row} is {a[row]!r}; inverse propensities must be >= 1",
                    row=row, field="a_hat")
        return a, b

    def validate(self, data: ObservationSet) -> None:
        if data.n == 0:
            raise EmptyData("no observations")
        for name in ("X", "A", "Y"):
            v = getattr(data, name)
            if not np.all(np.isfinite(v)):
                row = int(np.flatnonzero(~np.isfinite(v).reshape(data.n, -1).all(axis=1))[0])
                raise ArgumentError(f"non-finite {name} in row {row}", row=row, field=name)
        if self.binary_weight and not np.all((data.A == 0) | (data.A == 1)):
            row = int(np.flatnonzero((data.A != 0) & (data.A != 1))[0])
            raise ArgumentError(f"treatment in row {row} must be 0 or 1", row=row, field="a")

    def residuals(self, fit: NuisanceFit, data: ObservationSet):
        a, b = self.nuisance_values(fit, data)
        return self.residual_a(a, data), self.residual_b(b, data)


TREATED_MEAN = FunctionalSpec(
    name="treated-mean",
    weight_map=lambda o: o.A,
    residual_a=lambda a, o: o.A * a - 1.0,
    residual_b=lambda b, o: o.A * (b - o.Y),
    first_order_map=lambda a, b, o: o.A * a * (o.Y - b) + b,
    binary_weight=True,
)

EXPECTED_CONDITIONAL_COVARIANCE = FunctionalSpec(
    name="expected-conditional-covariance",
    weight_map=lambda o: np.ones(o.n),
    residual_a=lambda a, o: o.A - a,
    residual_b=lambda b, o: b - o.Y,
    first_order_map=lambda a, b, o: (o.A - a) * (o.Y - b),
    binary_weight=False,
)

_FUNCTIONALS = {
    "treated-mean": TREATED_MEAN,
    "ecc": EXPECTED_CONDITIONAL_COVARIANCE,
    "expected-conditional-covariance": EXPECTED_CONDITIONAL_COVARIANCE,
}


def functional_spec(name: str) -> FunctionalSpec:
    try:
        return _FUNCTIONALS[name]
    except KeyError:
        raise ArgumentError(f"unknown functional {name!r}", field="functional") from None


def normalize_convention(convention: str) -> str:
    convention = _CONVENTION_ALIASES.get(convention, convention)
    if convention not in CONVENTIONS:
        raise ArgumentError(f"unknown convention {convention!r}", field="convention")
    return convention


# ------------------------------------------------------------- estimates

def first_order_contributions(spec: FunctionalSpec, fit: NuisanceFit, data: ObservationSet) -> np.ndarray:
    spec.validate(data)
    a, b = spec.nuisance_values(fit, data)
    return spec.first_order_map(a, b, data)


def first_order_estimate(spec: FunctionalSpec, fit: NuisanceFit, data: ObservationSet) -> float:
    """Sample mean of the first-order contributions."""
    return math.fsum(first_order_contributions(spec, fit, data)) / data.n


class OrderTerms(dict):
    """Map order ``j`` to the order-``j`` correction term.

    ``condition_number`` records the conditioning of the Gram matrix the
    kernel was built from (``nan`` when it was supplied externally).
    """

    def __init__(self, terms, condition_number: float = math.nan):
        super().__init__(terms)
        self.condition_number = condition_number

    def cumulative(self) -> dict[int, float]:
        out, running = {}, []
        for j in sorted(self):
            running.append(self[j])
            out[j] = math.fsum(running)
        return out


def _check_order(m: int, n: int, k: int) -> None:
    if isinstance(m, bool) or int(m) != m or m < 2:
        raise ArgumentError(f"order must be an integer >= 2, got {m!r}", field="order")
    if m > MAX_ENGINE_ORDER:
        raise OrderTooHigh(f"order {m} exceeds the engine limit {MAX_ENGINE_ORDER}")
    if k >= n:
        raise Underdetermined(f"Underdetermined: dictionary size k={k} must be below n={n}")
    if m > n:
        raise ArgumentError(f"order {m} exceeds sample size {n}", field="order")


def _apply_convention(terms: dict[int, float], n: int, convention: str) -> dict[int, float]:
    if normalize_convention(convention) == CANONICAL:
        return dict(terms)
    return {j: v * (n - j + 1) / n if j >= 3 else v for j, v in terms.items()}


def _terms_from_factors(spec, fit, data, basis_values, left, right, m, convention,
                        coupling=None, condition_number=math.nan) -> OrderTerms:
    eps_a, eps_b = spec.residuals(fit, data)
    groups = support_groups(basis_values, coupling)
    kspec = SandwichKernelSpec(eps_a, eps_b, np.asarray(spec.weight_map(data), float),
                               left, right, int(m), groups)
    terms = order_terms(kspec)
    return OrderTerms(_apply_convention(terms, data.n, convention), condition_number)


def shoif_correction(spec: FunctionalSpec, fit: NuisanceFit, data: ObservationSet,
                     dictionary: Dictionary, m: int, convention: str = CANONICAL,
                     rank_tolerance: float = DEFAULT_RANK_TOLERANCE) -> OrderTerms:
    """Order terms ``{2..m}`` with the inverse Gram from the estimation sample via SVD."""
    spec.validate(data)
    basis = evaluate_basis(dictionary, data.X).values
    _check_order(m, data.n, basis.shape[1])
    sk = stable_kernel(basis, spec.weight_map(data), rank_tolerance)
    left, right = sk.factors()
    return _terms_from_factors(spec, fit, data, basis, left, right, m, convention,
                               condition_number=sk.condition_number)


def ehoif_correction(spec: FunctionalSpec, fit: NuisanceFit, data: ObservationSet,
                     dictionary: Dictionary, m: int, nuisance_data: ObservationSet,
                     convention: str = CANONICAL,
                     rank_tolerance: float = DEFAULT_RANK_TOLERANCE) -> OrderTerms:
    """Order terms with the Gram matrix of a separate sample, inverted explicitly."""
    spec.validate(data)
    spec.validate(nuisance_data)
    basis = evaluate_basis(dictionary, data.X).values
    _check_order(m, data.n, basis.shape[1])
    nuis_basis = evaluate_basis(dictionary, nuisance_data.X).values
    nuis_weights = spec.weight_map(nuisance_data)
    # rank check with the same rule as the stable kernel, then invert on purpose
    stable_kernel(nuis_basis, nuis_weights, rank_tolerance)
    sigma = weighted_gram(nuis_basis, nuis_weights).sigma_hat
    omega = np.linalg.inv(sigma)
    omega = 0.5 * (omega + omega.T)
    return _terms_from_factors(spec, fit, data, basis, basis @ omega, basis, m, convention,
                               coupling=omega, condition_number=float(np.linalg.cond(sigma)))


def oracle_hoif_correction(spec: FunctionalSpec, fit: NuisanceFit, data: ObservationSet,
                           dictionary: Dictionary, m: int, omega: np.ndarray,
                           convention: str = CANONICAL) -> OrderTerms:
    """Order terms with a supplied (population) inverse Gram matrix."""
    spec.validate(data)
    omega = np.asarray(omega, dtype=float)
    basis = evaluate_basis(dictionary, data.X).values
    k = basis.shape[1]
    if omega.shape != (k, k):
        raise ShapeError(f"omega must be {k} x {k}, got {omega.shape}", field="omega")
    if not np.allclose(omega, omega.T, rtol=1e-12, atol=0.0):
        raise ArgumentError("omega must be symmetric", field="omega")
    try:
        np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        raise ArgumentError("omega must be positive definite", field="omega") from None
    _check_order(m, data.n, k)
    return _terms_from_factors(spec, fit, data, basis, basis @ omega, basis, m, convention,
                               coupling=omega)


def soif_closed_form(spec: FunctionalSpec, fit: NuisanceFit, data: ObservationSet,
                     dictionary: Dictionary) -> float:
    """Order-2 term as an off-diagonal bilinear form in the left singular vectors.

    ``1/(n-1) eps_a' (P - Diag P) eps_b`` with ``P = Z (Z' Z^A)^{-1} Z^A'``;
    through ``Z^A = U D V'`` this is ``P = (Z V D^{-1}) U'``, never forming an
    inverse.  Valid for 0/1 weights, which covers both implemented functionals.
    """
    spec.validate(data)
    eps_a, eps_b = spec.residuals(fit, data)
    Z = evaluate_basis(dictionary, data.X).values
    n, k = Z.shape
    _check_order(2, n, k)
    S = np.asarray(spec.weight_map(data), float)
    U, D, Vt = np.linalg.svd(S[:, None] * Z, full_matrices=False)
    if D[-1] <= DEFAULT_RANK_TOLERANCE * D[0]:
        raise SingularGram("weighted basis matrix is rank deficient")
    left = Z @ Vt.T / D
    full = float((eps_a @ left) @ (U.T @ eps_b))
    diagonal = float(np.sum(eps_a * np.einsum("ij,ij->i", left, U) * eps_b))
    return (full - diagonal) / (n - 1)


def pathwise_alternative_sides(spec: FunctionalSpec, fit: NuisanceFit, data: ObservationSet,
                               dictionary: Dictionary, m: int) -> tuple[float, float]:
    """Two evaluations of ``U_{n,2}[eps_a z'z eps_b] - sum_{j<=m} IF_jj``.

    The first uses the partition engine on the stable kernel; the second sums
    ``(-1)^j C(m-1,j)`` times nested averages of ``Omega prod (Q_s Omega) - I``
    by brute force with an explicitly inverted Gram matrix.
    """
    if not 2 <= m <= 4:
        raise ArgumentError(f"the dual-path check supports 2 <= m <= 4, got {m}", field="order")
    terms = shoif_correction(spec, fit, data, dictionary, m)
    eps_a, eps_b = spec.residuals(fit, data)
    Z = evaluate_basis(dictionary, data.X).values
    S = np.asarray(spec.weight_map(data), float)
    n, k = Z.shape
    omega = np.linalg.inv(weighted_gram(Z, S).sigma_hat)
    eye = np.eye(k)
    identity_term = nested_chain_ustat(eps_a, eps_b, Z, S, eye, 0)
    lhs = identity_term - math.fsum(terms.values())
    rhs = math.fsum((-1) ** j * math.comb(m - 1, j)
                    * nested_chain_ustat(eps_a, eps_b, Z, S, omega, j - 1, subtract_identity=True)
                    for j in range(1, m))
    return lhs, rhs


def pathwise_alternative_identity_check(spec: FunctionalSpec, fit: NuisanceFit, data: ObservationSet,
                                       dictionary: Dictionary, m: int) -> float:
    """Absolute discrepancy between the two sides above."""
    lhs, rhs = pathwise_alternative_sides(spec, fit, data, dictionary, m)
    return abs(lhs - rhs)


# ---------------------------------------------------------------- report

@dataclass
class EstimateReport:
    psi_1: float
    order_terms: dict[int, float]
    corrections: dict[int, float]
    psi_m: dict[int, float]
    se_psi1: float
    se_corrections: dict[int, float] | None
    k: int
    n: int
    m_max: int
    convention: str
    condition_number: float
    functional: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        def keyed(d):
            return None if d is None else {str(j): v for j, v in sorted(d.items())}

        out = {
            "functional": self.functional,
            "n": self.n, "k": self.k, "m_max": self.m_max, "convention": self.convention,
            "psi_1": self.psi_1, "se_psi1": self.se_psi1,
            "order_terms": keyed(self.order_terms),
            "corrections": keyed(self.corrections),
            "psi_m": keyed(self.psi_m),
            "se_corrections": keyed(self.se_corrections),
            "condition_number": self.condition_number,
        }
        for j, v in sorted(self.corrections.items()):
            out[f"correction_{j}"] = v
        out.update(self.extra)
        return out


def estimate(spec: FunctionalSpec, fit: NuisanceFit, data: ObservationSet, dictionary: Dictionary,
             m: int, convention: str = CANONICAL) -> EstimateReport:
    """First-order estimate plus cumulative corrections up to order ``m``.

    ``se_psi1`` is the plug-in ``sd(contributions)/sqrt(n)``; correction
    standard errors are left empty here (see ``inference.bootstrap_se``).
    """
    contrib = first_order_contributions(spec, fit, data)
    psi1 = math.fsum(contrib) / data.n
    terms = shoif_correction(spec, fit, data, dictionary, m, convention)
    cumulative = terms.cumulative()
    se = float(np.std(contrib, ddof=1) / math.sqrt(data.n)) if data.n > 1 else math.nan
    return EstimateReport(
        psi_1=psi1, order_terms=dict(terms), corrections=cumulative,
        psi_m={j: psi1 + v for j, v in cumulative.items()},
        se_psi1=se, se_corrections=None, k=dictionary.k, n=data.n, m_max=int(m),
        convention=normalize_convention(convention), condition_number=terms.condition_number,
        functional=spec.name)
