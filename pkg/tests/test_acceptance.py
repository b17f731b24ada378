"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line (repeated in the terminal summary) and
then asserts the same verdict, so a red criterion is visible both ways.
"""

from __future__ import annotations

import math
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.optimize import brentq

from shoif.cli import identity_report
from shoif.dictionary import build_dictionary
from shoif.errors import SingularGram
from shoif.estimators import (TREATED_MEAN, FittedSample, NuisanceFit,
                              ObservationSet, first_order_estimate, oracle_hoif_correction,
                              pathwise_alternative_sides, shoif_correction, soif_closed_form)
from shoif.inference import BiasTestConfig, bias_test, bootstrap_se, normal_quantile, wald_ci
from shoif.kernels import stable_kernel, support_groups
from shoif.oracle import DiscreteDGP, atom_fit, exact_functionals
from shoif.simharness import parse_config, run_experiment, sample
from shoif.ustats import (SandwichKernelSpec, brute_force_ustat, cancellation_coefficient,
                          order_terms, partition_moebius_ustat)

pytestmark = pytest.mark.acceptance


def _relative(value: float, reference: float) -> float:
    scale = max(abs(reference), abs(value))
    return 0.0 if scale == 0 else abs(value - reference) / scale


def _random_treated_mean_sample(rng, n, d=1):
    X = rng.uniform(-1, 1, size=(n, d))
    A = (rng.random(n) < 0.7).astype(float)
    # keep both arms: with a constant basis and every row treated both sides of
    # the pathwise identity vanish exactly and a relative error is undefined
    A[:2] = (1.0, 0.0)
    Y = rng.normal(size=n)
    fit = NuisanceFit(1.0 + rng.exponential(size=n), rng.normal(size=n))
    return ObservationSet(X, A, Y), fit


def _atoms(K: int) -> np.ndarray:
    return -1 + (2 * np.arange(K) + 1) / K


# ----------------------------------------------------------------- 1

def _engine_instance(rng):
    n = int(rng.integers(4, 10))
    m = int(rng.choice([2, 3, 4]))
    k = int(rng.choice([1, 2, 3]))
    block_basis = rng.random() < 0.5
    while True:
        if block_basis:
            cells = rng.integers(0, k, size=n)
            Z = np.zeros((n, k))
            Z[np.arange(n), cells] = rng.uniform(0.5, 2.0, size=n)
        else:
            Z = rng.normal(size=(n, k))
        S = (rng.random(n) < 0.7).astype(float) if rng.random() < 0.5 else rng.uniform(0.2, 2.0, n)
        try:
            kernel = stable_kernel(Z, S)
            break
        except SingularGram:
            continue
    return SandwichKernelSpec.from_kernel(kernel, rng.normal(size=n), rng.normal(size=n), m,
                                          support_groups(Z))


def test_criterion_01_engine_matches_brute_force(acceptance_log):
    rng = np.random.default_rng(20240101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        spec = _engine_instance(rng)
        worst = max(worst, _relative(partition_moebius_ustat(spec), brute_force_ustat(spec)))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-10 and elapsed < 60
    acceptance_log("criterion 1 engine equivalence", passed,
                   f"max relative error {worst:.2e} (limit 1e-10) on 200 instances, {elapsed:.1f}s (limit 60s)")
    assert passed


# ----------------------------------------------------------------- 2

def test_criterion_02_closed_form_order_two(acceptance_log):
    rng = np.random.default_rng(20240102)
    worst = 0.0
    done = 0
    while done < 100:
        n = int(rng.integers(15, 60))
        data, fit = _random_treated_mean_sample(rng, n)
        dictionary = build_dictionary("piecewise-polynomial", 1, int(rng.integers(1, 4)), int(rng.integers(0, 3)))
        try:
            engine = shoif_correction(TREATED_MEAN, fit, data, dictionary, 2)[2]
        except SingularGram:
            continue
        worst = max(worst, _relative(engine, soif_closed_form(TREATED_MEAN, fit, data, dictionary)))
        done += 1
    passed = worst <= 1e-12
    acceptance_log("criterion 2 closed-form order 2", passed,
                   f"max relative error {worst:.2e} (limit 1e-12) on 100 instances")
    assert passed


# ----------------------------------------------------------------- 3

def _conditioned_transform(rng, k, condition):
    left, _ = np.linalg.qr(rng.normal(size=(k, k)))
    right, _ = np.linalg.qr(rng.normal(size=(k, k)))
    return left @ np.diag(np.logspace(0, -math.log10(condition), k)) @ right


def _terms_for_basis(Z, S, eps_a, eps_b, m):
    kernel = stable_kernel(Z, S)
    return order_terms(SandwichKernelSpec.from_kernel(kernel, eps_a, eps_b, m, support_groups(Z)))


def _explicit_terms(Z, S, eps_a, eps_b, m):
    """Debug route: kernel from an explicitly inverted Gram matrix."""
    gram = (Z.T * S) @ Z / Z.shape[0]
    spec = SandwichKernelSpec(eps_a, eps_b, S, Z @ np.linalg.inv(gram), Z, m)
    return order_terms(spec)


def test_criterion_03_invariance_to_dictionary_transformations(acceptance_log):
    rng = np.random.default_rng(20240103)
    worst = 0.0
    explicit_worst = 0.0
    for condition in np.logspace(1, 8, 15):
        n, k = 24, 4
        Z = rng.normal(size=(n, k))
        S = (rng.random(n) < 0.7).astype(float)
        S[:k] = 1.0
        eps_a, eps_b = rng.normal(size=n), rng.normal(size=n)
        reference = _terms_for_basis(Z, S, eps_a, eps_b, 4)
        T = _conditioned_transform(rng, k, condition)
        transformed = _terms_for_basis(Z @ T, S, eps_a, eps_b, 4)
        explicit = _explicit_terms(Z @ T, S, eps_a, eps_b, 4)
        for j in (2, 3, 4):
            worst = max(worst, _relative(transformed[j], reference[j]))
            explicit_worst = max(explicit_worst, _relative(explicit[j], reference[j]))
    passed = worst <= 1e-6
    acceptance_log("criterion 3 invariance under T", passed,
                   f"max relative change {worst:.2e} (limit 1e-6) for cond(T) up to 1e8; "
                   f"explicit-inverse path differs by up to {explicit_worst:.2e} (recorded only)")
    assert passed


# ----------------------------------------------------------------- 4

STABILITY_DICTIONARIES = {"50": {"cells_per_axis": 2, "degree": 24},
                          "100": {"cells_per_axis": 5, "degree": 19},
                          "150": {"cells_per_axis": 5, "degree": 29},
                          "190": {"cells_per_axis": 10, "degree": 18}}


@pytest.mark.slow
def test_criterion_04_stability_sweep(acceptance_log):
    config = {
        "functional": "ecc",
        "dgp": {"type": "continuous", "d": 1, "noise_correlation": 0.0},
        "dictionary": {"kind": "piecewise-polynomial", "d": 1, "by_k": STABILITY_DICTIONARIES},
        "nuisance": {"type": "perturbation", "rate_exponent": 0.25, "seed": 4},
        "grid": [{"n": 200, "k": int(k), "m": 2} for k in STABILITY_DICTIONARIES],
        "replications": 200,
        "base_seed": 40_000,
    }
    start = time.perf_counter()
    result = run_experiment(parse_config(config))
    elapsed = time.perf_counter() - start
    by_k = {}
    for k in STABILITY_DICTIONARIES:
        rows = [r for r in result.rows if r["k"] == int(k) and r["estimator"] == "shoif"]
        values = np.array([r["psi_hat"] for r in rows], float)
        conds = np.array([r["cond_number"] for r in rows], float)
        by_k[int(k)] = (values, conds)
    base = by_k[50][0]
    base = base[np.isfinite(base)]
    iqr = float(np.subtract(*np.percentile(base, [75, 25]))) if base.size else math.nan
    details, ok = [], True
    for k, (values, conds) in by_k.items():
        failures = int(np.sum(~np.isfinite(values)))
        # a replication without an estimate counts as unbounded
        worst = math.inf if failures else float(np.max(np.abs(values)))
        ok &= worst <= 10 * iqr
        details.append(f"k={k}: max|est|={worst:.3g}, failures={failures}/200")
    share = float(np.mean(by_k[190][1] > 1e6))
    ok &= share >= 0.9 and np.all(np.isfinite(by_k[190][0]))
    ok &= elapsed < 600
    acceptance_log("criterion 4 stability sweep", bool(ok),
                   f"10*IQR(k=50)={10 * iqr:.3g}; " + "; ".join(details)
                   + f"; cond>1e6 at k=190 in {share:.0%} of reps; {elapsed:.0f}s")
    assert ok


# ----------------------------------------------------------------- 5

def test_criterion_05_combinatorial_identities(acceptance_log):
    start = time.perf_counter()
    report = identity_report(10)
    cancel_ok, witnesses_ok = True, True
    for m in range(2, 9):
        witness = False
        for c in range(1, m + 1):
            for c_dag in range(0, c + 1):
                value = cancellation_coefficient(m, c, c_dag)
                assert isinstance(value, Fraction)
                if c + c_dag < m - 1 and value != 0:
                    cancel_ok = False
                if c + c_dag == m - 1 and value != 0:
                    witness = True
        witnesses_ok &= witness
    elapsed = time.perf_counter() - start
    passed = (report["falling_factorial"]["pass"] and cancel_ok and witnesses_ok and elapsed < 5)
    acceptance_log("criterion 5 combinatorial identities", passed,
                   f"falling factorial checks {report['falling_factorial']['checked']} exact, "
                   f"cancellation vanishes={cancel_ok}, boundary witnesses={witnesses_ok}, {elapsed:.2f}s")
    assert passed


# ----------------------------------------------------------------- 6

def two_atom_problem():
    dgp = DiscreteDGP([-0.5, 0.5], [0.5, 0.5], [0.5, 1.0], [1.0, 0.0], 1.0)
    fit = atom_fit(dgp, [3.0, 1.0], [0.0, 1.0])
    dictionary = build_dictionary("indicator", 1, 2)
    return dgp, fit, dictionary


@pytest.mark.slow
def test_criterion_06_oracle_unbiasedness(acceptance_log):
    dgp, fit, dictionary = two_atom_problem()
    record = exact_functionals(dgp, fit, dictionary)
    assert record.bias_k == pytest.approx(0.25, abs=1e-15)
    start = time.perf_counter()
    values = np.array([oracle_hoif_correction(TREATED_MEAN, fit, sample(dgp, 500, 60_000 + r), dictionary,
                                              2, record.omega)[2] for r in range(2000)])
    elapsed = time.perf_counter() - start
    mean, se = values.mean(), values.std(ddof=1) / math.sqrt(values.size)
    passed = abs(mean + 0.25) <= 4 * se and elapsed < 120
    acceptance_log("criterion 6 oracle unbiasedness", passed,
                   f"MC mean {mean:.5f} vs -0.25, {abs(mean + 0.25) / se:.2f} MC se (limit 4), {elapsed:.0f}s")
    assert passed


# ----------------------------------------------------------------- 7

def kernel_bias_problem():
    K = 64
    x = _atoms(K)
    pi = np.where(np.arange(K) % 2 == 0, 0.35, 0.75)
    b = np.sin(np.pi * x)
    dgp = DiscreteDGP(x, np.full(K, 1 / K), pi, b, 0.5, c=0.1)
    shift = 1.0
    fit = atom_fit(dgp, (1 / pi) * (1 + shift), b - shift)
    return dgp, fit


@pytest.mark.slow
def test_criterion_07_kernel_bias_scaling(acceptance_log):
    dgp, fit = kernel_bias_problem()
    n, R, ks = 2000, 5000, (8, 16, 32, 64)
    dictionaries = {k: build_dictionary("indicator", 1, k) for k in ks}
    omegas = {k: exact_functionals(dgp, fit, dictionaries[k]).omega for k in ks}
    diffs = {k: [] for k in ks}
    failures = 0
    start = time.perf_counter()
    for r in range(R):
        data = sample(dgp, n, 70_000 + r)
        row = {}
        try:
            for k in ks:
                stable = shoif_correction(TREATED_MEAN, fit, data, dictionaries[k], 2)[2]
                oracle = oracle_hoif_correction(TREATED_MEAN, fit, data, dictionaries[k], 2, omegas[k])[2]
                row[k] = stable - oracle
        except SingularGram:
            failures += 1
            continue
        for k in ks:
            diffs[k].append(row[k])
    elapsed = time.perf_counter() - start
    means = np.array([np.mean(diffs[k]) for k in ks])
    ses = np.array([np.std(diffs[k], ddof=1) / math.sqrt(len(diffs[k])) for k in ks])
    slope = float(np.polyfit(np.log(np.array(ks) / n), np.log(np.abs(means)), 1)[0])
    bars = ", ".join(f"k={k}: {m:.4g}+-{s:.2g}" for k, m, s in zip(ks, means, ses))
    passed = slope >= 0.8 and elapsed < 1800
    acceptance_log("criterion 7 kernel-bias scaling", passed,
                   f"slope {slope:.3f} (limit >= 0.8); |diff| {bars}; failures {failures}; {elapsed:.0f}s")
    assert passed


# ----------------------------------------------------------------- 8

def test_criterion_08_pathwise_alternative(acceptance_log):
    rng = np.random.default_rng(20240108)
    worst = 0.0
    done = 0
    while done < 50:
        n = int(rng.integers(7, 10))
        data, fit = _random_treated_mean_sample(rng, n)
        dictionary = build_dictionary("piecewise-polynomial", 1, 1, int(rng.integers(0, 2)))
        try:
            for m in (2, 3, 4):
                lhs, rhs = pathwise_alternative_sides(TREATED_MEAN, fit, data, dictionary, m)
                worst = max(worst, _relative(lhs, rhs))
        except SingularGram:
            continue
        done += 1
    passed = worst <= 1e-9
    acceptance_log("criterion 8 pathwise alternative", passed,
                   f"max relative discrepancy {worst:.2e} (limit 1e-9) on 50 datasets, m=2,3,4")
    assert passed


# ----------------------------------------------------------------- 9

def order_bias_problem():
    K = 2000
    x = _atoms(K)
    pi = 0.95 + 0.04 * np.sin(3 * x)
    b = np.cos(2 * x)
    dgp = DiscreteDGP(x, np.full(K, 1 / K), pi, b, 0.1, c=0.1)
    t = 0.4
    fit = atom_fit(dgp, (1 / pi) * (1 + t * (0.5 + x ** 2)), b - t * (1 + x) / 2)
    return dgp, fit


@pytest.mark.slow
def test_criterion_09_bias_reduction_with_order(acceptance_log):
    dgp, fit = order_bias_problem()
    n, R = 1000, 2000
    dictionary = build_dictionary("piecewise-polynomial", 1, 50, 4)
    assert dictionary.k == n // 4
    psi = exact_functionals(dgp, fit, dictionary).psi
    estimates = {m: [] for m in (2, 3, 4)}
    failures = 0
    start = time.perf_counter()
    for r in range(R):
        data = sample(dgp, n, 90_000 + r)
        try:
            terms = shoif_correction(TREATED_MEAN, fit, data, dictionary, 4).cumulative()
        except SingularGram:
            failures += 1
            continue
        psi1 = first_order_estimate(TREATED_MEAN, fit, data)
        for m in estimates:
            estimates[m].append(psi1 + terms[m])
    elapsed = time.perf_counter() - start
    bias = {m: float(np.mean(v)) - psi for m, v in estimates.items()}
    se = {m: float(np.std(v, ddof=1) / math.sqrt(len(v))) for m, v in estimates.items()}
    passed = all(abs(bias[m + 1]) <= abs(bias[m]) + se[m + 1] for m in (2, 3))
    acceptance_log("criterion 9 bias reduction with order", passed,
                   ", ".join(f"m={m}: bias {bias[m]:.5f} (se {se[m]:.5f})" for m in bias)
                   + f"; failures {failures}; {elapsed:.0f}s")
    assert passed


# ---------------------------------------------------------------- 10

def coverage_problem():
    K = 16
    x = _atoms(K)
    pi = 0.5 + 0.3 * np.sin(2 * x)
    b = np.cos(x) + x
    dgp = DiscreteDGP(x, np.full(K, 1 / K), pi, b, 1.0, c=0.1)
    t = 1.0
    fit = atom_fit(dgp, (1 / pi) * (1 + t * (0.5 + x) ** 2), b - t * (1 - x) / 2)
    return dgp, fit


@pytest.mark.slow
def test_criterion_10_coverage(acceptance_log):
    dgp, fit = coverage_problem()
    n, R, B, m = 1000, 500, 200, 3
    dictionary = build_dictionary("indicator", 1, 16)
    psi = exact_functionals(dgp, fit, dictionary).psi

    def statistic(s: FittedSample) -> float:
        terms = shoif_correction(TREATED_MEAN, s.fit, s.data, dictionary, m)
        return first_order_estimate(TREATED_MEAN, s.fit, s.data) + terms.cumulative()[m]

    covered, covered_first, failures = 0, 0, 0
    z = normal_quantile(0.975)
    start = time.perf_counter()
    for r in range(R):
        data = sample(dgp, n, 100_000 + r)
        fitted = FittedSample(data, fit)
        try:
            estimate_m = statistic(fitted)
            boot = bootstrap_se(statistic, fitted, B, seed=1_000_000 + r * B)
        except SingularGram:
            failures += 1
            continue
        lo, hi = wald_ci(estimate_m, boot.se, 0.05)
        covered += lo <= psi <= hi
        psi1 = first_order_estimate(TREATED_MEAN, fit, data)
        covered_first += abs(psi1 - psi) <= z * boot.se
    elapsed = time.perf_counter() - start
    coverage = covered / (R - failures) if R > failures else math.nan
    passed = failures == 0 and 0.91 <= coverage <= 0.98 and elapsed < 900
    acceptance_log("criterion 10 coverage", passed,
                   f"coverage {coverage:.3f} (target [0.91, 0.98]); first-order interval of the same width "
                   f"covers {covered_first / max(R - failures, 1):.3f}; failures {failures}; {elapsed:.0f}s")
    assert passed


# ---------------------------------------------------------------- 11

BIAS_TEST_N = 400
BIAS_TEST_DELTA = 1.0


def bias_test_problem(ratio: float):
    """Saturated design with nuisance errors in one shared direction.

    Both errors equal ``t * u`` pointwise, so the first-order bias is
    ``-E[pi (t u)^2]`` and its magnitude equals the Cauchy-Schwarz bound.
    ``t`` is solved so that cs-bias / se(psi_1) equals ``ratio``.
    """
    K = 8
    x = _atoms(K)
    pi = 0.6 + 0.2 * np.sin(2 * x)
    b = x
    dgp = DiscreteDGP(x, np.full(K, 1 / K), pi, b, 1.0, c=0.1)
    dictionary = build_dictionary("indicator", 1, K)
    u = 1 + 0.5 * x

    def record(t):
        return exact_functionals(dgp, atom_fit(dgp, 1 / pi + t * u, b + t * u), dictionary)

    def gap(t):
        rec = record(t)
        return rec.cs_bias / math.sqrt(rec.var_psi1 / BIAS_TEST_N) - ratio

    t = brentq(gap, 1e-6, 5.0, xtol=1e-14)
    return dgp, atom_fit(dgp, 1 / pi + t * u, b + t * u), dictionary, record(t)


def _rejection_rate(ratio: float, R: int, seed0: int):
    dgp, fit, dictionary, rec = bias_test_problem(ratio)
    cfg = BiasTestConfig(alpha=0.05, delta=BIAS_TEST_DELTA, order=2, bootstrap_B=100)

    def statistic(s: FittedSample):
        corr = shoif_correction(TREATED_MEAN, s.fit, s.data, dictionary, 2)[2]
        return [first_order_estimate(TREATED_MEAN, s.fit, s.data), corr]

    rejections = 0
    for r in range(R):
        fitted = FittedSample(sample(dgp, BIAS_TEST_N, seed0 + r), fit)
        correction = statistic(fitted)[1]
        boot = bootstrap_se(statistic, fitted, cfg.bootstrap_B, seed=seed0 * 1000 + r * cfg.bootstrap_B)
        se_psi1, se_corr = boot.se
        rejections += bias_test(correction, se_corr, se_psi1, cfg).reject
    return rejections / R, rec


@pytest.mark.slow
def test_criterion_11_bias_test_level(acceptance_log):
    R, alpha = 1000, 0.05
    start = time.perf_counter()
    null_rate, null_rec = _rejection_rate(BIAS_TEST_DELTA, R, 110_000)
    alt_rate, alt_rec = _rejection_rate(3 * BIAS_TEST_DELTA, R, 120_000)
    elapsed = time.perf_counter() - start
    assert abs(null_rec.bias_psi1) == pytest.approx(null_rec.cs_bias, rel=1e-12)
    limit = alpha + 3 * math.sqrt(alpha * (1 - alpha) / R)
    passed = null_rate <= limit and alt_rate >= 0.5
    acceptance_log("criterion 11 bias-test level", passed,
                   f"null (cs/se = {BIAS_TEST_DELTA:g}) rejects {null_rate:.3f} (limit {limit:.4f}); "
                   f"alternative (cs/se = {3 * BIAS_TEST_DELTA:g}) rejects {alt_rate:.3f} (limit >= 0.5); "
                   f"{elapsed:.0f}s")
    assert passed
