"""Synthetic data, controlled nuisance perturbations and the Monte Carlo runner."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre
from scipy.special import expit

from .dictionary import Dictionary, build_dictionary, evaluate_basis
from .errors import ArgumentError, ConfigError, PerturbationInfeasible, ShoifError, SingularGram
from .estimators import (CANONICAL, DEFAULT_NUISANCE_BOUND, NuisanceFit, ObservationSet,
                         ehoif_correction, first_order_estimate, functional_spec,
                         normalize_convention, oracle_hoif_correction, shoif_correction)
from .oracle import AtomFunction, DiscreteDGP, atom_fit, exact_functionals

ESTIMATORS = ("shoif", "ehoif", "oracle")
RESULT_COLUMNS = ("n", "k", "m", "estimator", "order", "replication", "value", "psi_hat",
                  "cond_number", "status")


# ------------------------------------------------------------------ DGPs

def _second_coordinate(X):
    return X[:, 1] if X.shape[1] > 1 else np.zeros(X.shape[0])


def _default_propensity(X):
    return expit(X[:, 0] - _second_coordinate(X) / 2)


def _default_outcome(X):
    return np.sin(np.pi * X[:, 0]) * (1 + _second_coordinate(X)) / 2


_PROPENSITIES = {"default": _default_propensity}
_OUTCOMES = {"default": _default_outcome}


@dataclass(frozen=True)
class ContinuousDGP:
    """Uniform covariates on ``[-1, 1]^d`` with a clipped propensity.

    For the treated mean ``A ~ Bernoulli(pi(X))`` and ``Y = b(X) + noise``.  For
    the expected conditional covariance ``A = pi(X) + treatment_sd e_1`` and
    ``Y = b(X) + noise_sd (rho e_1 + sqrt(1-rho^2) e_2)`` with standard normal
    ``e_1, e_2``, so the target equals ``rho treatment_sd noise_sd``.
    A propensity given as a number is a constant and is not clipped.
    """

    d: int = 2
    functional: str = "treated-mean"
    propensity: str | float = "default"
    outcome: str = "default"
    noise_sd: float = 0.5
    c: float = 0.1
    treatment_noise_sd: float = 0.5
    noise_correlation: float = 0.0
    s_a: float | None = None
    s_b: float | None = None

    def __post_init__(self):
        if self.d < 1:
            raise ArgumentError("d must be positive", field="d")
        functional_spec(self.functional)
        if not isinstance(self.propensity, (int, float)) and self.propensity not in _PROPENSITIES:
            raise ArgumentError(f"unknown propensity {self.propensity!r}", field="propensity")
        if isinstance(self.propensity, (int, float)) and not 0 < self.propensity <= 1:
            raise ArgumentError("constant propensity must lie in (0, 1]", field="propensity")
        if self.outcome not in _OUTCOMES:
            raise ArgumentError(f"unknown outcome {self.outcome!r}", field="outcome")
        if not 0 < self.c < 0.5:
            raise ArgumentError("clip constant must lie in (0, 0.5)", field="c")
        if not -1 <= self.noise_correlation <= 1:
            raise ArgumentError("noise correlation must lie in [-1, 1]", field="noise_correlation")

    def pi(self, X) -> np.ndarray:
        X = np.asarray(X, float).reshape(-1, self.d)
        if isinstance(self.propensity, (int, float)):
            return np.full(X.shape[0], float(self.propensity))
        return np.clip(_PROPENSITIES[self.propensity](X), self.c, 1 - self.c)

    def b(self, X) -> np.ndarray:
        return _OUTCOMES[self.outcome](np.asarray(X, float).reshape(-1, self.d))

    def a(self, X) -> np.ndarray:
        pi = self.pi(X)
        return 1.0 / pi if self.functional == "treated-mean" else pi

    @property
    def psi_ecc(self) -> float:
        return self.noise_correlation * self.noise_sd * self.treatment_noise_sd

    def to_json(self) -> dict:
        out = {"type": "continuous"}
        out.update({k: getattr(self, k) for k in ("d", "functional", "propensity", "outcome", "noise_sd",
                                                  "c", "treatment_noise_sd", "noise_correlation",
                                                  "s_a", "s_b")})
        return out


def probe_grid(d: int, points: int = 10_000) -> np.ndarray:
    """Deterministic grid of about ``points`` cell midpoints in ``[-1, 1]^d``."""
    per_axis = max(2, int(round(points ** (1.0 / d))))
    axis = -1 + (2 * np.arange(per_axis) + 1) / per_axis
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def sample(dgp, n: int, seed) -> ObservationSet:
    """Draw ``n`` observations; ``seed`` is anything ``default_rng`` accepts."""
    if n < 1:
        raise ArgumentError("n must be at least 1", field="n")
    rng = np.random.default_rng(seed)
    if isinstance(dgp, DiscreteDGP):
        idx = rng.choice(dgp.K, size=n, p=dgp.probs)
        A = (rng.random(n) < dgp.propensity[idx]).astype(float)
        Y = dgp.outcome_mean[idx] + dgp.outcome_noise_sd[idx] * rng.standard_normal(n)
        return ObservationSet(dgp.atoms[idx], A, Y)
    X = rng.uniform(-1.0, 1.0, size=(n, dgp.d))
    pi = dgp.pi(X)
    if dgp.functional == "treated-mean":
        A = (rng.random(n) < pi).astype(float)
        Y = dgp.b(X) + dgp.noise_sd * rng.standard_normal(n)
    else:
        e1 = rng.standard_normal(n)
        e2 = rng.standard_normal(n)
        rho = dgp.noise_correlation
        A = pi + dgp.treatment_noise_sd * e1
        Y = dgp.b(X) + dgp.noise_sd * (rho * e1 + math.sqrt(1 - rho ** 2) * e2)
    return ObservationSet(X, A, Y)


# ------------------------------------------------------ nuisance perturbation

@dataclass(frozen=True)
class PerturbationSpec:
    rate_exponent: float
    direction: str = "basis-noise"
    scale: float = 1.0
    seed: int = 0
    n_functions: int = 4

    def __post_init__(self):
        if not self.rate_exponent > 0:
            raise ArgumentError("rate exponent must be positive", field="rate_exponent")
        if self.direction not in ("basis-noise", "constant-shift"):
            raise ArgumentError(f"unknown direction {self.direction!r}", field="direction")
        if self.scale < 0:
            raise ArgumentError("scale must be nonnegative", field="scale")


class _Direction:
    """Random combination of low-degree global Legendre products, unit L2 norm."""

    def __init__(self, d: int, spec: PerturbationSpec, stream: int, norm_points, norm_weights):
        self.d = d
        self.constant = spec.direction == "constant-shift"
        if self.constant:
            self.coef = None
            return
        degree = 1
        while (degree + 1) ** d < spec.n_functions:
            degree += 1
        idx = np.array(np.meshgrid(*([np.arange(degree + 1)] * d), indexing="ij")).reshape(d, -1).T
        idx = idx[np.argsort(idx.sum(axis=1), kind="stable")]
        self.multi = idx[:spec.n_functions]
        self.degree = degree
        rng = np.random.default_rng([spec.seed, stream])
        self.coef = rng.standard_normal(len(self.multi))
        raw = self._raw(norm_points)
        self.coef = self.coef / math.sqrt(float(np.sum(norm_weights * raw ** 2)))

    def _raw(self, X):
        X = np.asarray(X, float).reshape(-1, self.d)
        V = legendre.legvander(X, self.degree)  # n, d, p
        cols = np.ones((X.shape[0], len(self.multi)))
        for axis in range(self.d):
            cols *= V[:, axis, self.multi[:, axis]]
        return cols @ self.coef

    def __call__(self, X):
        X = np.asarray(X, float).reshape(-1, self.d)
        return np.ones(X.shape[0]) if self.constant else self._raw(X)


@dataclass(frozen=True)
class _PerturbedFunction:
    truth: object
    direction: _Direction
    step: float
    low: float
    high: float

    def __call__(self, X):
        return np.clip(self.truth(X) + self.step * self.direction(X), self.low, self.high)


def _law(dgp):
    if isinstance(dgp, DiscreteDGP):
        return dgp.atoms, dgp.probs
    pts = probe_grid(dgp.d)
    return pts, np.full(pts.shape[0], 1.0 / pts.shape[0])


def _truth(dgp):
    if isinstance(dgp, DiscreteDGP):
        return AtomFunction(dgp, dgp.a), AtomFunction(dgp, dgp.outcome_mean), "treated-mean"
    return dgp.a, dgp.b, dgp.functional


def perturbed_nuisance(dgp, spec: PerturbationSpec, n: int,
                       bound: float = DEFAULT_NUISANCE_BOUND) -> NuisanceFit:
    """Truth plus ``scale * n^{-beta}`` times a fixed unit-norm direction, clipped."""
    points, weights = _law(dgp)
    a_true, b_true, functional = _truth(dgp)
    step = spec.scale * n ** (-spec.rate_exponent)
    dirs = [_Direction(points.shape[1], spec, stream, points, weights) for stream in (0, 1)]
    a_low = 1.0 if functional == "treated-mean" else -bound
    funcs = [_PerturbedFunction(a_true, dirs[0], step, a_low, bound),
             _PerturbedFunction(b_true, dirs[1], step, -bound, bound)]
    if step > 0:
        for name, f, truth in (("a_hat", funcs[0], a_true), ("b_hat", funcs[1], b_true)):
            kept = math.sqrt(float(np.sum(weights * (f(points) - truth(points)) ** 2)))
            if kept < 0.5 * step:
                raise PerturbationInfeasible(
                    f"clipping removed more than half of the {name} perturbation "
                    f"(kept norm {kept:.3g} of {step:.3g})")
    if isinstance(dgp, DiscreteDGP):
        return atom_fit(dgp, funcs[0](dgp.atoms), funcs[1](dgp.atoms))
    return NuisanceFit(funcs[0], funcs[1], "simulated-perturbation", bound)


# ------------------------------------------------------------- configuration

@dataclass(frozen=True)
class GridPoint:
    n: int
    k: int
    m: int


@dataclass
class ExperimentConfig:
    functional: str
    dgp: object
    dictionary: dict
    nuisance: dict
    grid: list[GridPoint]
    replications: int
    base_seed: int = 0
    estimators: tuple[str, ...] = ("shoif",)
    convention: str = CANONICAL
    raw: dict = field(default_factory=dict, repr=False)

    def dictionary_for(self, k: int) -> Dictionary:
        spec = dict(self.dictionary)
        by_k = spec.pop("by_k", {}) or {}
        spec.update(by_k.get(str(k), {}))
        d = int(spec.get("d", _dgp_dim(self.dgp)))
        degree = int(spec.get("degree", 0))
        if "cells_per_axis" in spec:
            cells = int(spec["cells_per_axis"])
        else:
            cells = int(round((k / (degree + 1) ** d) ** (1.0 / d)))
        dictionary = build_dictionary(spec.get("kind", "indicator-partition"), d, max(cells, 1),
                                      degree, spec.get("B", 1.0))
        if dictionary.k != k:
            raise ConfigError(f"no dictionary with k={k} for the configured kind/degree",
                              pointer="/dictionary")
        return dictionary

    def fit_for(self, n: int) -> NuisanceFit:
        kind = self.nuisance.get("type")
        if kind == "atoms":
            return atom_fit(self.dgp, self.nuisance["a_hat"], self.nuisance["b_hat"])
        spec = PerturbationSpec(self.nuisance["rate_exponent"], self.nuisance.get("direction", "basis-noise"),
                                self.nuisance.get("scale", 1.0), self.nuisance.get("seed", 0),
                                self.nuisance.get("n_functions", 4))
        return perturbed_nuisance(self.dgp, spec, n)


def _dgp_dim(dgp) -> int:
    return dgp.d


def _require(obj, key, pointer, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise ConfigError(f"missing field {pointer}/{key}", pointer=f"{pointer}/{key}")
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"field {pointer}/{key} has the wrong type", pointer=f"{pointer}/{key}")
    return value


def _parse_dgp(obj, functional) -> object:
    kind = _require(obj, "type", "/dgp", str)
    try:
        if kind == "discrete":
            if functional != "treated-mean":
                raise ConfigError("discrete DGPs support the treated mean only", pointer="/functional")
            return DiscreteDGP(_require(obj, "atoms", "/dgp"), _require(obj, "probs", "/dgp"),
                               _require(obj, "propensity", "/dgp"), _require(obj, "outcome_mean", "/dgp"),
                               obj.get("outcome_noise_sd", 1.0), obj.get("c", 0.05))
        if kind == "continuous":
            fields = {k: v for k, v in obj.items() if k != "type"}
            fields.setdefault("functional", functional)
            return ContinuousDGP(**fields)
    except ConfigError:
        raise
    except (ShoifError, TypeError, ValueError) as exc:
        field_name = getattr(exc, "field", None)
        pointer = f"/dgp/{field_name}" if field_name else "/dgp"
        raise ConfigError(f"invalid DGP: {exc}", pointer=pointer) from None
    raise ConfigError(f"unknown DGP type {kind!r}", pointer="/dgp/type")


def parse_config(obj: dict) -> ExperimentConfig:
    """Validate a JSON experiment configuration; errors carry a JSON pointer."""
    if not isinstance(obj, dict):
        raise ConfigError("configuration must be a JSON object", pointer="")
    functional = obj.get("functional", "treated-mean")
    try:
        functional = functional_spec(functional).name
    except ShoifError:
        raise ConfigError(f"unknown functional {functional!r}", pointer="/functional") from None
    dgp = _parse_dgp(_require(obj, "dgp", "", dict), functional)
    dictionary = _require(obj, "dictionary", "", dict)
    nuisance = _require(obj, "nuisance", "", dict)
    ntype = _require(nuisance, "type", "/nuisance", str)
    if ntype == "atoms":
        if not isinstance(dgp, DiscreteDGP):
            raise ConfigError("atom nuisances need a discrete DGP", pointer="/nuisance/type")
        for key in ("a_hat", "b_hat"):
            vals = _require(nuisance, key, "/nuisance", list)
            if len(vals) != dgp.K:
                raise ConfigError(f"/nuisance/{key} needs {dgp.K} values", pointer=f"/nuisance/{key}")
    elif ntype == "perturbation":
        _require(nuisance, "rate_exponent", "/nuisance", (int, float))
    else:
        raise ConfigError(f"unknown nuisance type {ntype!r}", pointer="/nuisance/type")
    grid_raw = _require(obj, "grid", "", list)
    if not grid_raw:
        raise ConfigError("grid must be nonempty", pointer="/grid")
    grid = []
    for i, point in enumerate(grid_raw):
        vals = {}
        for key in ("n", "k", "m"):
            v = _require(point, key, f"/grid/{i}", int)
            if isinstance(v, bool) or v < (2 if key == "m" else 1):
                raise ConfigError(f"/grid/{i}/{key} out of range", pointer=f"/grid/{i}/{key}")
            vals[key] = v
        if vals["k"] >= vals["n"]:
            raise ConfigError(f"grid point {i} needs k < n", pointer=f"/grid/{i}/k")
        grid.append(GridPoint(**vals))
    replications = _require(obj, "replications", "", int)
    if replications < 1:
        raise ConfigError("replications must be positive", pointer="/replications")
    estimators = tuple(obj.get("estimators", ["shoif"]))
    for i, e in enumerate(estimators):
        if e not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {e!r}", pointer=f"/estimators/{i}")
    if "oracle" in estimators and not isinstance(dgp, DiscreteDGP):
        raise ConfigError("the oracle estimator needs a discrete DGP", pointer="/estimators")
    try:
        convention = normalize_convention(obj.get("convention", CANONICAL))
    except ShoifError:
        raise ConfigError("unknown convention", pointer="/convention") from None
    base_seed = obj.get("base_seed", 0)
    if not isinstance(base_seed, int):
        raise ConfigError("base_seed must be an integer", pointer="/base_seed")
    cfg = ExperimentConfig(functional, dgp, dictionary, nuisance, grid, replications, base_seed,
                           estimators, convention, raw=obj)
    for i, point in enumerate(grid):
        try:
            cfg.dictionary_for(point.k)
        except ConfigError as exc:
            raise ConfigError(str(exc), pointer=f"/grid/{i}/k") from None
        except ShoifError as exc:
            raise ConfigError(f"invalid dictionary: {exc}", pointer="/dictionary") from None
    try:
        for point in grid:
            cfg.fit_for(point.n)
    except ShoifError as exc:
        raise ConfigError(f"invalid nuisance: {exc}", pointer="/nuisance") from None
    return cfg


# ------------------------------------------------------------------ runner

@dataclass
class ExperimentResult:
    rows: list[dict]
    summary: dict


def _gram_condition(dictionary, spec, data) -> float:
    Z = evaluate_basis(dictionary, data.X).values
    S = np.sqrt(np.abs(spec.weight_map(data)))
    D = np.linalg.svd(S[:, None] * Z, compute_uv=False)
    if D.size < Z.shape[1] or D[-1] == 0:
        return math.inf
    return float((D[0] / D[-1]) ** 2)


@lru_cache(maxsize=8)
def _context(cfg_json: str, grid_index: int):
    cfg = parse_config(json.loads(cfg_json))
    point = cfg.grid[grid_index]
    dictionary = cfg.dictionary_for(point.k)
    fit = cfg.fit_for(point.n)
    omega = None
    if isinstance(cfg.dgp, DiscreteDGP):
        try:
            omega = exact_functionals(cfg.dgp, fit, dictionary).omega
        except SingularGram:
            omega = None
    return cfg, point, dictionary, fit, omega


def run_replication(cfg_json: str, grid_index: int, replication: int) -> list[dict]:
    """All rows of one replication at one grid point; a pure function of its arguments."""
    cfg, point, dictionary, fit, omega = _context(cfg_json, grid_index)
    spec = functional_spec(cfg.functional)
    seed = cfg.base_seed + replication
    data = sample(cfg.dgp, point.n, seed)
    base = {"n": point.n, "k": point.k, "m": point.m, "replication": replication}
    psi1 = first_order_estimate(spec, fit, data)
    rows = [dict(base, estimator="first-order", order=1, value=psi1, psi_hat=psi1,
                 cond_number=math.nan, status="ok")]
    for name in cfg.estimators:
        try:
            if name == "shoif":
                terms = shoif_correction(spec, fit, data, dictionary, point.m, cfg.convention)
            elif name == "ehoif":
                nuis = sample(cfg.dgp, point.n, [seed, 1])
                terms = ehoif_correction(spec, fit, data, dictionary, point.m, nuis, cfg.convention)
            else:
                if omega is None:
                    raise SingularGram("population Gram matrix is singular")
                terms = oracle_hoif_correction(spec, fit, data, dictionary, point.m, omega, cfg.convention)
        except SingularGram:
            cond = _gram_condition(dictionary, spec, data) if name == "shoif" else math.inf
            rows.extend(dict(base, estimator=name, order=j, value=math.nan, psi_hat=math.nan,
                             cond_number=cond, status="singular-gram")
                        for j in range(2, point.m + 1))
            continue
        running = []
        for j in sorted(terms):
            running.append(terms[j])
            rows.append(dict(base, estimator=name, order=j, value=terms[j],
                             psi_hat=psi1 + math.fsum(running),
                             cond_number=terms.condition_number, status="ok"))
    return rows


def _run_chunk(args):
    cfg_json, grid_index, reps = args
    out = []
    for r in reps:
        out.extend(run_replication(cfg_json, grid_index, r))
    return out


def _moments(values: np.ndarray) -> dict:
    values = values[np.isfinite(values)]
    if values.size == 0:
        return {"mean": math.nan, "sd": math.nan, "se": math.nan}
    sd = float(np.std(values, ddof=1)) if values.size > 1 else math.nan
    return {"mean": math.fsum(values) / values.size, "sd": sd, "se": sd / math.sqrt(values.size)}


def summarize(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    points = []
    for gi, point in enumerate(cfg.grid):
        entry = {"n": point.n, "k": point.k, "m": point.m, "estimators": {}}
        if isinstance(cfg.dgp, DiscreteDGP):
            try:
                rec = exact_functionals(cfg.dgp, cfg.fit_for(point.n), cfg.dictionary_for(point.k))
                entry["oracle"] = {key: getattr(rec, key) for key in
                                   ("psi", "bias_psi1", "bias_k", "cs_bias", "eff_bound", "var_psi1")}
            except SingularGram:
                entry["oracle"] = None
        sel = [r for r in rows if (r["n"], r["k"], r["m"]) == (point.n, point.k, point.m)]
        for name in ("first-order",) + tuple(cfg.estimators):
            est_rows = [r for r in sel if r["estimator"] == name]
            lowest = min(r["order"] for r in est_rows)
            first = [r for r in est_rows if r["order"] == lowest]
            ok = sum(r["status"] == "ok" for r in first)
            cond = np.array([r["cond_number"] for r in first], float)
            info = {"successes": ok, "failures": len(first) - ok, "orders": {}}
            if name != "first-order":
                finite = cond[~np.isnan(cond)]
                info["cond_number_median"] = float(np.median(finite)) if finite.size else math.nan
                info["cond_number_max"] = float(np.max(finite)) if finite.size else math.nan
            for j in sorted({r["order"] for r in est_rows}):
                vals = np.array([r["value"] for r in est_rows if r["order"] == j], float)
                ests = np.array([r["psi_hat"] for r in est_rows if r["order"] == j], float)
                info["orders"][str(j)] = {"term": _moments(vals), "estimate": _moments(ests)}
            entry["estimators"][name] = info
        points.append(entry)
    return {"functional": cfg.functional, "replications": cfg.replications,
            "base_seed": cfg.base_seed, "convention": cfg.convention, "grid": points}


def run_experiment(cfg: ExperimentConfig, parallel: int = 1) -> ExperimentResult:
    """Run every grid point and replication; output is independent of ``parallel``."""
    cfg_json = json.dumps(cfg.raw, sort_keys=True)
    tasks = []
    for gi in range(len(cfg.grid)):
        reps = list(range(cfg.replications))
        chunk = max(1, math.ceil(len(reps) / max(1, parallel)))
        tasks.extend((cfg_json, gi, reps[i:i + chunk]) for i in range(0, len(reps), chunk))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            chunks = list(pool.map(_run_chunk, tasks))
    else:
        chunks = [_run_chunk(t) for t in tasks]
    rows = [row for chunk in chunks for row in chunk]
    return ExperimentResult(rows, summarize(cfg, rows))


def format_float(x) -> str:
    """17 significant digits: enough for an exact float round trip."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def write_results(result: ExperimentResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in result.rows:
            writer.writerow([format_float(row[c]) if c in ("value", "psi_hat", "cond_number") else row[c]
                             for c in RESULT_COLUMNS])
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(_json_safe(result.summary), fh, indent=2, sort_keys=True)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj
