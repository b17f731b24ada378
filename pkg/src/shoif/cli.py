"""Command-line interface: ``shoif {estimate,simulate,identities,test-bias}``.

Exit codes: 0 success, 2 validation error, 3 singular Gram matrix.  Every
error is written to standard error as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from .dictionary import Dictionary, evaluate_basis
from .errors import ArgumentError, ShapeError, ShoifError, SingularGram, UnstableResampling, ValidationError
from .estimators import (CONVENTIONS, FittedSample, NuisanceFit, ObservationSet, estimate,
                         first_order_estimate, functional_spec, shoif_correction)
from .inference import BiasTestConfig, bias_test, bootstrap_se
from .kernels import kernel_weighted_matrix, stable_kernel
from .simharness import format_float, parse_config, run_experiment, write_results
from .ustats import (cancellation_coefficient, falling_factorial, partition_table,
                     stirling_first_unsigned, u_to_v_coefficients)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SINGULAR = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error({"error": "UsageError", "message": message})
        sys.exit(EXIT_INVALID)


def _emit_error(obj: dict) -> None:
    sys.stderr.write(json.dumps(obj, default=str) + "\n")


# ------------------------------------------------------------------ files

def _parse_float(text: str, row: int, name: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"row {row}, column {name!r}: {text!r} is not a number",
                              row=row, field=name) from None
    if not math.isfinite(value):
        raise ValidationError(f"row {row}, column {name!r}: value is not finite", row=row, field=name)
    return value


def _read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}", field=path) from None
    if not rows:
        raise ValidationError(f"{path} is empty", field=path)
    return [h.strip() for h in rows[0]], rows[1:]


def read_dataset(path: str, functional: str = "ecc") -> ObservationSet:
    """Dataset CSV with header ``x1..xd,a,y``."""
    header, rows = _read_csv(path)
    d = len(header) - 2
    expected = [f"x{i + 1}" for i in range(d)] + ["a", "y"]
    if d < 1 or header != expected:
        raise ValidationError(f"dataset header must be {expected}, got {header}", field="header")
    values = np.empty((len(rows), d + 2))
    for r, row in enumerate(rows):
        if len(row) != d + 2:
            raise ValidationError(f"row {r} has {len(row)} columns, expected {d + 2}", row=r)
        for c, (name, cell) in enumerate(zip(header, row)):
            values[r, c] = _parse_float(cell, r, name)
    if functional == "treated-mean":
        bad = (values[:, d] != 0) & (values[:, d] != 1)
        if bad.any():
            r = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"row {r}, column 'a': treatment must be 0 or 1", row=r, field="a")
    return ObservationSet(values[:, :d], values[:, d], values[:, d + 1])


def read_nuisance(path: str, n: int) -> NuisanceFit:
    header, rows = _read_csv(path)
    if header != ["a_hat", "b_hat"]:
        raise ValidationError(f"nuisance header must be ['a_hat', 'b_hat'], got {header}", field="header")
    if len(rows) != n:
        raise ValidationError(f"nuisance file has {len(rows)} rows but the dataset has {n}", field="rows")
    values = np.empty((n, 2))
    for r, row in enumerate(rows):
        if len(row) != 2:
            raise ValidationError(f"row {r} has {len(row)} columns, expected 2", row=r)
        values[r] = [_parse_float(row[0], r, "a_hat"), _parse_float(row[1], r, "b_hat")]
    return NuisanceFit(values[:, 0], values[:, 1], "external-file")


def write_dataset(path: str, data: ObservationSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(data.d)] + ["a", "y"])
        for x, a, y in zip(data.X, data.A, data.Y):
            writer.writerow([format_float(v) for v in (*x, a, y)])


def write_nuisance(path: str, a_hat, b_hat) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["a_hat", "b_hat"])
        for a, b in zip(a_hat, b_hat):
            writer.writerow([format_float(a), format_float(b)])


def _load_dictionary(text: str) -> Dictionary:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        try:
            with open(text, encoding="utf-8") as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"--dict is neither JSON nor a readable JSON file: {exc}",
                                  field="dict") from None
    if not isinstance(obj, dict):
        raise ValidationError("--dict must be a JSON object", field="dict")
    return Dictionary.from_json(obj)


def _write_json(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    if path in (None, "-"):
        sys.stdout.write(text + "\n")
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _seed(args) -> int:
    env = os.environ.get("SHOIF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"SHOIF_SEED must be an integer, got {env!r}", field="SHOIF_SEED") from None
    return args.seed


# --------------------------------------------------------------- commands

def _load_inputs(args):
    spec = functional_spec(args.functional)
    data = read_dataset(args.data, spec.name)
    fit = read_nuisance(args.nuisance, data.n)
    dictionary = _load_dictionary(args.dict)
    if dictionary.d != data.d:
        raise ShapeError(f"dictionary dimension {dictionary.d} differs from dataset dimension {data.d}",
                         field="dict")
    return spec, data, fit, dictionary


def _correction_statistic(spec, dictionary, m, convention):
    def statistic(sample: FittedSample):
        terms = shoif_correction(spec, sample.fit, sample.data, dictionary, m, convention)
        psi1 = first_order_estimate(spec, sample.fit, sample.data)
        return [psi1] + list(terms.cumulative().values())
    return statistic


def cmd_estimate(args) -> int:
    spec, data, fit, dictionary = _load_inputs(args)
    report = estimate(spec, fit, data, dictionary, args.order, args.convention)
    if args.bootstrap_B:
        boot = bootstrap_se(_correction_statistic(spec, dictionary, args.order, args.convention),
                            FittedSample(data, fit), args.bootstrap_B, _seed(args))
        report.se_corrections = {j: float(s) for j, s in zip(range(2, args.order + 1), boot.se[1:])}
        report.extra["bootstrap_B"] = args.bootstrap_B
        report.extra["rejected_resamples"] = boot.rejected
    if args.dump_kernel:
        Z = evaluate_basis(dictionary, data.X)
        K = kernel_weighted_matrix(stable_kernel(Z, spec.weight_map(data)))
        np.savetxt(args.dump_kernel, K, delimiter=",", fmt="%.17g")
    _write_json(report.to_json(), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read {args.config}: {exc.strerror}", field="config") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}", field="config", pointer="") from None
    cfg = parse_config(obj)
    result = run_experiment(cfg, parallel=args.parallel)
    write_results(result, args.out)
    return EXIT_OK


def identity_report(max_m: int) -> dict:
    """Exact-arithmetic checks of the Stirling, Moebius and cancellation identities."""
    if not 2 <= max_m <= 10:
        raise ArgumentError(f"--max-m must lie in [2, 10], got {max_m}", field="max_m")
    falling = {"checked": 0, "failures": []}
    for m in range(2, max_m + 1):
        coeffs = u_to_v_coefficients(m)
        for n in range(m, 51):
            falling["checked"] += 1
            if sum(c * n ** j for j, c in coeffs) != falling_factorial(n, m):
                falling["failures"].append({"m": m, "n": n})
    falling["pass"] = not falling["failures"]

    moebius = {"checked": 0, "failures": []}
    for m in range(1, min(max_m, 6) + 1):
        table = partition_table(m)
        for n in range(1, 13):
            moebius["checked"] += 1
            total = sum(mu * n ** (max(p) + 1) for p, mu in zip(table.partitions, table.weights))
            if total != falling_factorial(n, m):
                moebius["failures"].append({"m": m, "n": n})
    moebius["pass"] = not moebius["failures"]

    vanishing = {"checked": 0, "failures": []}
    witnesses = {}
    for m in range(2, max_m + 1):
        witnesses[str(m)] = []
        for c in range(1, m + 1):
            for c_dag in range(0, c + 1):
                value = cancellation_coefficient(m, c, c_dag)
                if c + c_dag < m - 1:
                    vanishing["checked"] += 1
                    if value != 0:
                        vanishing["failures"].append({"m": m, "c": c, "c_dag": c_dag, "value": str(value)})
                elif c + c_dag == m - 1:
                    witnesses[str(m)].append({"c": c, "c_dag": c_dag, "value": str(value),
                                              "float": float(value), "nonzero_expected": True,
                                              "nonzero": value != 0})
    vanishing["pass"] = not vanishing["failures"]
    witness_pass = all(any(w["nonzero"] for w in ws) for ws in witnesses.values())
    stirling_table = {str(m): [stirling_first_unsigned(m, j) for j in range(1, m + 1)]
                      for m in range(1, max_m + 1)}
    report = {
        "max_m": max_m,
        "falling_factorial": falling,
        "moebius_weights": moebius,
        "stirling_unsigned": stirling_table,
        "u_to_v": {str(m): u_to_v_coefficients(m) for m in range(2, max_m + 1)},
        "cancellation_vanishing": vanishing,
        "cancellation_boundary": {"witnesses": witnesses, "pass": witness_pass},
    }
    report["pass"] = falling["pass"] and moebius["pass"] and vanishing["pass"] and witness_pass
    return report


def cmd_identities(args) -> int:
    report = identity_report(args.max_m)
    _write_json(report, args.out)
    return EXIT_OK if report["pass"] else 1


def cmd_test_bias(args) -> int:
    seed = _seed(args)
    cfg = BiasTestConfig(args.alpha, args.delta, args.order, args.bootstrap_B, seed,
                         args.two_sided_magnitude)
    plug_in = (args.correction, args.se_correction, args.se_psi1)
    if all(v is not None for v in plug_in):
        correction, se_corr, se_psi1 = plug_in
        rejected = 0
    elif any(v is not None for v in plug_in):
        raise ArgumentError("--correction, --se-correction and --se-psi1 go together", field="correction")
    else:
        if not (args.data and args.nuisance and args.dict):
            raise ArgumentError("--data, --nuisance and --dict are required", field="data")
        spec, data, fit, dictionary = _load_inputs(args)
        statistic = _correction_statistic(spec, dictionary, args.order, args.convention)
        correction = statistic(FittedSample(data, fit))[-1]
        boot = bootstrap_se(statistic, FittedSample(data, fit), cfg.bootstrap_B, seed)
        se_psi1, se_corr = float(boot.se[0]), float(boot.se[-1])
        rejected = boot.rejected
    result = bias_test(correction, se_corr, se_psi1, cfg)
    _write_json({"reject": result.reject, "statistic": result.statistic, "correction": correction,
                 "se_correction": se_corr, "se_psi1": se_psi1, "alpha": cfg.alpha,
                 "delta": cfg.delta if math.isfinite(cfg.delta) else "inf", "order": cfg.order,
                 "bootstrap_B": cfg.bootstrap_B, "seed": seed, "rejected_resamples": rejected,
                 "two_sided_magnitude": cfg.two_sided_magnitude}, args.out)
    return EXIT_OK


# ----------------------------------------------------------------- parser

def _data_arguments(p, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="dataset CSV (x1..xd,a,y)")
    p.add_argument("--nuisance", required=required, help="nuisance CSV (a_hat,b_hat)")
    p.add_argument("--functional", choices=["treated-mean", "ecc"], default="treated-mean")
    p.add_argument("--dict", required=required, help="dictionary JSON object or path to one")
    p.add_argument("--convention", choices=list(CONVENTIONS) + ["prefactors"],
                   default="canonical")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shoif", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="first-order estimate and higher-order corrections")
    _data_arguments(p)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--out", default="-")
    p.add_argument("--bootstrap-B", type=int, default=0, help="bootstrap resamples for correction se (0: skip)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-kernel", default=None, help="write the weighted kernel matrix as CSV")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run a Monte Carlo experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("identities", help="exact combinatorial identity checks")
    p.add_argument("--max-m", type=int, default=8)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_identities)

    p = sub.add_parser("test-bias", help="one-sided test of the first-order bias")
    _data_arguments(p, required=False)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=0.0, help="null threshold; 'inf' never rejects")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--bootstrap-B", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--two-sided-magnitude", action="store_true")
    p.add_argument("--correction", type=float, default=None, help="plug-in correction (skips data)")
    p.add_argument("--se-correction", type=float, default=None)
    p.add_argument("--se-psi1", type=float, default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_test_bias)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SingularGram, UnstableResampling) as exc:
        _emit_error(exc.to_dict())
        return EXIT_SINGULAR
    except ShoifError as exc:
        _emit_error(exc.to_dict())
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
