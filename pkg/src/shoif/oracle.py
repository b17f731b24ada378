"""Exact population quantities for finite-support data generating processes.

Every expectation is a finite sum over covariate atoms, so bias, projected
bias, Gram matrices and the efficiency bound are available without sampling.
The treated mean is covered: ``a(x) = 1/pi(x)``, ``b(x) = E[Y | X=x, A=1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dictionary import Dictionary, evaluate_basis
from .errors import ArgumentError, ShapeError, SingularGram
from .estimators import NuisanceFit
from .kernels import DEFAULT_RANK_TOLERANCE


@dataclass(frozen=True)
class DiscreteDGP:
    """Covariate atoms with probabilities, propensity, outcome mean and noise sd.

    The propensity is validated as ``c < pi <= 1``: only the lower bound is
    needed for the inverse propensity to stay bounded.
    """

    atoms: np.ndarray
    probs: np.ndarray
    propensity: np.ndarray
    outcome_mean: np.ndarray
    outcome_noise_sd: np.ndarray
    c: float = 0.05

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        K = atoms.shape[0]
        object.__setattr__(self, "atoms", atoms)
        for name in ("probs", "propensity", "outcome_mean", "outcome_noise_sd"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (K,)).copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if np.any(self.probs < 0) or not math.isclose(math.fsum(self.probs), 1.0, abs_tol=1e-12):
            raise ArgumentError("atom probabilities must be nonnegative and sum to 1", field="probs")
        if not 0 < self.c < 0.5:
            raise ArgumentError("overlap constant must lie in (0, 0.5)", field="c")
        if np.any(self.propensity <= self.c) or np.any(self.propensity > 1):
            raise ArgumentError(f"propensity must lie in ({self.c}, 1]", field="propensity")
        if np.any(self.outcome_noise_sd < 0):
            raise ArgumentError("noise sd must be nonnegative", field="outcome_noise_sd")

    @property
    def K(self) -> int:
        return self.atoms.shape[0]

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    @property
    def a(self) -> np.ndarray:
        return 1.0 / self.propensity

    def atom_lookup(self, X: np.ndarray) -> np.ndarray:
        """Index of the atom equal to each row of ``X``."""
        X = np.asarray(X, dtype=float).reshape(-1, self.d)
        if self.d == 1:
            order = np.argsort(self.atoms[:, 0], kind="stable")
            sorted_atoms = self.atoms[order, 0]
            pos = np.clip(np.searchsorted(sorted_atoms, X[:, 0]), 0, self.K - 1)
            if not np.array_equal(sorted_atoms[pos], X[:, 0]):
                raise ArgumentError("a covariate row is not one of the atoms")
            return order[pos]
        keys = {row.tobytes(): i for i, row in enumerate(self.atoms)}
        try:
            return np.fromiter((keys[row.tobytes()] for row in X), dtype=np.int64, count=X.shape[0])
        except KeyError:
            raise ArgumentError("a covariate row is not one of the atoms") from None

    def to_json(self) -> dict:
        return {"type": "discrete", "atoms": self.atoms.tolist(), "probs": self.probs.tolist(),
                "propensity": self.propensity.tolist(), "outcome_mean": self.outcome_mean.tolist(),
                "outcome_noise_sd": self.outcome_noise_sd.tolist(), "c": self.c}


def atom_function(dgp: DiscreteDGP, values) -> "AtomFunction":
    return AtomFunction(dgp, np.asarray(values, dtype=float))


@dataclass(frozen=True)
class AtomFunction:
    """A function on the atoms of a discrete DGP, callable on covariate rows."""

    dgp: DiscreteDGP
    values: np.ndarray

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.values[self.dgp.atom_lookup(X)]


def atom_fit(dgp: DiscreteDGP, a_hat, b_hat, provenance: str = "simulated-perturbation") -> NuisanceFit:
    """Nuisance fit given by its values on the atoms."""
    a_hat, b_hat = np.asarray(a_hat, float), np.asarray(b_hat, float)
    if a_hat.shape != (dgp.K,) or b_hat.shape != (dgp.K,):
        raise ShapeError(f"atom nuisance values need length {dgp.K}")
    return NuisanceFit(atom_function(dgp, a_hat), atom_function(dgp, b_hat), provenance)


@dataclass(frozen=True)
class OracleRecord:
    psi: float
    bias_psi1: float
    bias_k: float
    sigma: np.ndarray
    omega: np.ndarray
    cs_bias: float
    eff_bound: float
    var_psi1: float

    def to_json(self) -> dict:
        return {"psi": self.psi, "bias_psi1": self.bias_psi1, "bias_k": self.bias_k,
                "sigma": self.sigma.tolist(), "omega": self.omega.tolist(),
                "cs_bias": self.cs_bias, "eff_bound": self.eff_bound, "var_psi1": self.var_psi1}


def fit_on_atoms(dgp: DiscreteDGP, fit: NuisanceFit) -> tuple[np.ndarray, np.ndarray]:
    values = []
    for f in (fit.a_hat, fit.b_hat):
        if isinstance(f, AtomFunction):
            values.append(np.asarray(f.values, float))
        elif callable(f):
            values.append(np.asarray(f(dgp.atoms), float))
        else:
            raise ArgumentError("the oracle needs nuisance functions, not value columns")
    return values[0], values[1]


def population_gram(dgp: DiscreteDGP, dictionary: Dictionary) -> np.ndarray:
    """``E[A z z'] = sum_x p(x) pi(x) z(x) z(x)'``."""
    Z = evaluate_basis(dictionary, dgp.atoms).values
    return (Z.T * (dgp.probs * dgp.propensity)) @ Z


def exact_functionals(dgp: DiscreteDGP, fit: NuisanceFit, dictionary: Dictionary) -> OracleRecord:
    """Exact first-order bias, projected bias, Gram pair, cs-bias and efficiency bound.

    The cs-bias weights both squared errors by ``|lambda| = 1/a = pi``, the
    absolute value of the treated-mean weight function.
    """
    p, pi, b, sd = dgp.probs, dgp.propensity, dgp.outcome_mean, dgp.outcome_noise_sd
    a = 1.0 / pi
    a_hat, b_hat = fit_on_atoms(dgp, fit)
    psi = math.fsum(p * b)
    err_a = a_hat * pi - 1.0
    err_b = b - b_hat
    bias_psi1 = math.fsum(p * err_a * err_b)

    Z = evaluate_basis(dictionary, dgp.atoms).values
    sigma = (Z.T * (p * pi)) @ Z
    sigma = 0.5 * (sigma + sigma.T)
    s = np.linalg.svd(sigma, compute_uv=False)
    if s.size == 0 or s[-1] <= DEFAULT_RANK_TOLERANCE ** 2 * s[0]:
        raise SingularGram("population Gram matrix is singular on the atom set",
                           smallest_singular_value=float(s[-1]) if s.size else 0.0)
    omega = np.linalg.inv(sigma)
    omega = 0.5 * (omega + omega.T)
    left = Z.T @ (p * err_a)
    right = Z.T @ (p * pi * err_b)
    bias_k = float(left @ omega @ right)

    cs_bias = math.sqrt(math.fsum(p * pi * (a_hat - a) ** 2) * math.fsum(p * pi * (b_hat - b) ** 2))
    eff_bound = math.fsum(p * (sd ** 2 / pi + (b - psi) ** 2))
    mean_phi = math.fsum(p * (pi * a_hat * err_b + b_hat))
    second = math.fsum(p * (pi * (a_hat ** 2 * (sd ** 2 + err_b ** 2) + 2 * a_hat * b_hat * err_b)
                            + b_hat ** 2))
    return OracleRecord(psi, bias_psi1, bias_k, sigma, omega, cs_bias, eff_bound,
                        max(second - mean_phi ** 2, 0.0))
