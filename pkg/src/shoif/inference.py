"""Bootstrap standard errors, Wald intervals and the one-sided bias test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from scipy.stats import norm

from .errors import ArgumentError, DegenerateScale, SingularGram, UnstableResampling

DELTA_CAP = math.inf
MIN_BOOTSTRAP = 100


def normal_quantile(p: float) -> float:
    return float(norm.ppf(p))


@dataclass(frozen=True)
class BootstrapResult:
    se: float | np.ndarray
    replicates: np.ndarray
    rejected: int


def _resample(data, idx):
    if isinstance(data, np.ndarray) or not hasattr(data, "take"):
        return np.asarray(data)[idx]
    return data.take(idx)


def _length(data) -> int:
    return data.n if hasattr(data, "n") else len(data)


def bootstrap_se(statistic: Callable[[Any], Any], data, B: int, seed: int,
                 min_B: int = MIN_BOOTSTRAP) -> BootstrapResult:
    """Standard deviation of ``statistic`` over ``B`` resamples with replacement.

    Resample ``b`` draws from ``default_rng(seed + b)``; draws on which the
    statistic raises :class:`SingularGram` are redrawn from the same stream and
    counted.  ``statistic`` may return a scalar or a vector.
    """
    if B < min_B:
        raise ArgumentError(f"bootstrap needs at least {min_B} resamples, got {B}", field="bootstrap_B")
    n = _length(data)
    values = []
    rejected = 0
    for b in range(B):
        rng = np.random.default_rng(seed + b)
        while True:
            idx = rng.integers(0, n, size=n)
            try:
                values.append(np.asarray(statistic(_resample(data, idx)), dtype=float))
                break
            except SingularGram:
                rejected += 1
                if rejected > B / 2:
                    raise UnstableResampling(
                        f"{rejected} resamples rejected for a singular Gram matrix (B={B})") from None
    reps = np.stack(values)
    se = reps.std(axis=0, ddof=1)
    return BootstrapResult(float(se) if se.ndim == 0 else se, reps, rejected)


def wald_ci(psi_hat: float, se: float, alpha: float = 0.05) -> tuple[float, float]:
    if se < 0:
        raise ArgumentError("standard error must be nonnegative")
    if not 0 < alpha < 1:
        raise ArgumentError("alpha must lie in (0, 1)", field="alpha")
    half = normal_quantile(1 - alpha / 2) * se
    return psi_hat - half, psi_hat + half


@dataclass(frozen=True)
class BiasTestConfig:
    alpha: float = 0.05
    delta: float = 0.0
    order: int = 2
    bootstrap_B: int = 200
    seed: int = 0
    two_sided_magnitude: bool = False

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ArgumentError("alpha must lie in (0, 1)", field="alpha")
        if not self.delta >= 0:
            raise ArgumentError("delta must be nonnegative", field="delta")
        if self.bootstrap_B < MIN_BOOTSTRAP:
            raise ArgumentError(f"bootstrap_B must be at least {MIN_BOOTSTRAP}", field="bootstrap_B")
        if self.order < 2:
            raise ArgumentError("order must be at least 2", field="order")


@dataclass(frozen=True)
class BiasTestResult:
    reject: bool
    statistic: float


def bias_test(correction_value: float, se_correction: float, se_psi1: float,
              cfg: BiasTestConfig) -> BiasTestResult:
    """Reject when ``corr/se_psi1 - z_{alpha/2} se_corr/se_psi1`` exceeds delta.

    With ``two_sided_magnitude`` the absolute correction is used instead.
    """
    if not se_psi1 > 0:
        raise DegenerateScale("standard error of the first-order estimate must be positive")
    corr = abs(correction_value) if cfg.two_sided_magnitude else correction_value
    z = normal_quantile(1 - cfg.alpha / 2)
    stat = corr / se_psi1 - z * se_correction / se_psi1
    return BiasTestResult(bool(stat > cfg.delta), float(stat))
