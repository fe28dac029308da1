"""Command-line front end: ``validate-design``, ``analyze`` and ``simulate``.

Exit codes: 0 success, 1 design violations, 2 input or configuration
errors, 3 empty eligible population, 4 positivity failure of a restricted
set, 5 degenerate arm, stratum cell or variance.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from .analysis_set import Selector, build_ece, build_restricted, build_strata, empirical_weights
from .dataset import ColumnMap, load_records, parse_column_map
from .design import DesignError, compile_schedule, parse_design, validate_schedule
from .errors import (
    ConfigError,
    DegenerateArmError,
    DegenerateVarianceError,
    EceTrialError,
    EmptyEceError,
    InsufficientDataError,
    ParseError,
    PositivityError,
    SchemaError,
)
from .estimators import (
    METHODS,
    estimate_aipw,
    estimate_aps,
    estimate_ipw,
    estimate_naive,
    estimate_ps,
    estimate_saipw,
    estimate_sipw,
)
from .jsonio import dumps
from .simulation import SimulationConfig, _load_text, pair_label, run_monte_carlo
from .variance import (
    contrast_inference,
    cov_aipw,
    cov_aps,
    cov_ipw,
    cov_naive,
    cov_ps,
    cov_saipw,
    cov_sipw,
)
from .working_model import (
    CovariateSpec,
    center_model,
    check_adjustment_conditions,
    fit_anhecova,
    fit_linear,
)

__all__ = ["main", "EXIT_OK", "EXIT_VIOLATION", "EXIT_INPUT", "EXIT_EMPTY_ECE",
           "EXIT_POSITIVITY", "EXIT_DEGENERATE"]

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_INPUT = 2
EXIT_EMPTY_ECE = 3
EXIT_POSITIVITY = 4
EXIT_DEGENERATE = 5

CONTRASTS = {"diff": (1.0, -1.0), "theta_jk": (1.0, 0.0), "theta_kj": (0.0, 1.0)}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, EmptyEceError):
        return EXIT_EMPTY_ECE
    if isinstance(exc, PositivityError):
        return EXIT_POSITIVITY
    if isinstance(exc, (DegenerateArmError, DegenerateVarianceError, InsufficientDataError)):
        return EXIT_DEGENERATE
    return EXIT_INPUT


def _read(path: str, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {what} {path!r}: {exc.strerror}", EXIT_INPUT) from None


def _write(path: str, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write {path!r}: {exc.strerror}", EXIT_INPUT) from None


# ---------------------------------------------------------------------------
# validate-design


def cmd_validate_design(args) -> int:
    text = _read(args.design, "design")
    try:
        design = parse_design(text)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DesignError as exc:
        for v in exc.violations:
            print(v)
        return EXIT_VIOLATION
    try:
        schedule = compile_schedule(design)
    except ValueError as exc:
        print(f"pi < 1: {exc}")
        return EXIT_VIOLATION
    violations = validate_schedule(schedule)
    if violations:
        for v in violations:
            print(v)
        return EXIT_VIOLATION
    width = max(len(str(k)) for k in schedule.keys)
    print(f"{'Z':<{width}}  " + "  ".join(f"{'pi_' + a:>10}" for a in schedule.arms))
    for key, row in zip(schedule.keys, schedule.marginals):
        print(f"{str(key):<{width}}  " + "  ".join(f"{p:>10.6g}" for p in row))
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def _methods(text: str) -> list[str]:
    if text == "all":
        return list(METHODS)
    out = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in out if m not in METHODS]
    if bad or not out:
        raise CliError(f"unknown method(s) {bad}; choose from {list(METHODS)} or 'all'", EXIT_INPUT)
    return out


def _arms(text: str) -> tuple[str, str]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2 or not all(parts):
        raise CliError("--arms expects 'j,k'", EXIT_INPUT)
    return parts[0], parts[1]


def _column_map(args, design) -> ColumnMap:
    if args.columns:
        try:
            cmap = parse_column_map(_read(args.columns, "column map"))
        except (json.JSONDecodeError, SchemaError) as exc:
            raise CliError(f"column map: {exc}", EXIT_INPUT) from None
    else:
        cmap = ColumnMap(z_factors={name: name for name, _ in design.factors})
    if args.covariates:
        names = [c.strip() for c in args.covariates.split(",") if c.strip()]
        extra = tuple(c for c in names if c not in cmap.numeric and c not in cmap.categorical)
        cmap = replace(cmap, numeric=cmap.numeric + extra)
    return cmap


def _strata_table(est) -> list[dict] | None:
    return None if est.strata is None else [dict(s) for s in est.strata]


def _run_method(method, aset, data, strata, models):
    if method == "naive":
        est = estimate_naive(aset, data)
        return est, cov_naive(aset, data, est)
    if method == "ipw":
        est = estimate_ipw(aset, data)
        return est, cov_ipw(aset, data, est)
    if method == "sipw":
        est = estimate_sipw(aset, data)
        return est, cov_sipw(aset, data, est)
    mj, mk = models()
    if method == "aipw":
        est = estimate_aipw(aset, data, mj, mk)
        return est, cov_aipw(aset, data, mj, mk, est)
    if method == "saipw":
        est = estimate_saipw(aset, data, mj, mk)
        return est, cov_saipw(aset, data, mj, mk, est)
    if method == "ps":
        est = estimate_ps(aset, data, strata)
        return est, cov_ps(aset, data, strata, est)
    est = estimate_aps(aset, data, strata, mj, mk)
    return est, cov_aps(aset, data, strata, mj, mk, est)


def cmd_analyze(args) -> int:
    methods = _methods(args.method)
    j, k = _arms(args.arms)
    if args.contrast not in CONTRASTS:
        raise CliError(f"--contrast must be one of {list(CONTRASTS)}", EXIT_INPUT)
    if not 0.0 < args.alpha < 1.0:
        raise CliError("--alpha must lie in (0, 1)", EXIT_INPUT)
    try:
        design = parse_design(_read(args.design, "design"))
        schedule = compile_schedule(design)
    except (SchemaError, ValueError) as exc:
        raise CliError(f"design: {exc}", EXIT_INPUT) from None
    cmap = _column_map(args, design)
    try:
        data = load_records(_read(args.data, "data"), design, cmap, schedule)
    except (ParseError, SchemaError, ValueError, KeyError) as exc:
        raise CliError(f"data: {exc}", EXIT_INPUT) from None

    for arm in (j, k):
        if arm not in data.arms:
            raise CliError(f"unknown arm {arm!r}; design arms are {list(data.arms)}", EXIT_INPUT)
    selector = None
    if args.subset:
        try:
            selector = Selector.parse(args.subset)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_INPUT) from None

    try:
        if selector is None:
            aset = build_ece(data, j, k)
        else:
            aset = build_restricted(data, j, k, selector)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    strata = build_strata(aset)
    if args.estimated_propensity:
        aset = empirical_weights(aset, strata)

    names = [c.strip() for c in (args.covariates or "").split(",") if c.strip()]
    cache: dict = {}

    def models():
        if "m" not in cache:
            if not names:
                spec = CovariateSpec((), (), args.model == "anhecova")
            else:
                spec = CovariateSpec.from_names(names, data, args.model == "anhecova")
            fits = []
            for arm in (aset.arm_j, aset.arm_k):
                if args.model == "anhecova":
                    m = fit_anhecova(aset, arm, spec, data, strata)
                else:
                    m = fit_linear(aset, arm, spec, data)
                if args.center:
                    m = center_model(m, aset, arm, data, strata)
                fits.append(m)
            cache["m"] = tuple(fits)
        return cache["m"]

    c = CONTRASTS[args.contrast]
    results = {}
    first_error = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for method in methods:
            try:
                est, cov = _run_method(method, aset, data, strata, models)
                inf = contrast_inference(est, cov, c=c, alpha=args.alpha, margin=args.margin)
            except EceTrialError as exc:
                code = exit_code_for(exc)
                first_error = first_error or (code, f"{method}: {exc}")
                results[method] = {"error": type(exc).__name__, "message": str(exc)}
                continue
            entry = {
                "theta": [est.theta_jk, est.theta_kj],
                "sigma": cov.sigma.tolist(),
                "contrast": inf.estimate,
                "se": inf.se,
                "ci": list(inf.ci),
                "z": inf.z,
                "p_value": inf.p_value,
                "noninferior": inf.noninferior,
                "n_jk": est.n_jk,
            }
            if est.delta is not None:
                entry["delta"] = list(est.delta)
            if est.strata is not None:
                entry["strata"] = _strata_table(est)
            results[method] = entry
    diag = None
    if "m" in cache:
        d = check_adjustment_conditions(*cache["m"], aset, data, strata)
        diag = {"ok": d.ok, "flags": list(d.flags)}

    report = {
        "arms": [aset.arm_j, aset.arm_k],
        "contrast": args.contrast,
        "contrast_vector": list(c),
        "alpha": args.alpha,
        "margin": args.margin,
        "model": {
            "type": args.model,
            "covariates": names,
            "center": bool(args.center),
            "diagnostics": diag,
        },
        "subset": None if selector is None else selector.describe(),
        "estimated_propensity": bool(args.estimated_propensity),
        "counts": {
            "records": data.n,
            "excluded_missing_outcome": data.excluded_missing_outcome,
            "outside_analysis_set": data.n - aset.n,
            "n_jk": aset.n,
            "n_j": int(aset.in_j.sum()),
            "n_k": int(aset.in_k.sum()),
            "not_selected": 0 if aset.selected is None else int((~aset.selected).sum()),
        },
        "strata": [
            {"id": s.id, "pi_j": s.pi_j, "pi_k": s.pi_k, "n": s.size,
             "n_j": int(aset.in_j[s.members].sum()), "n_k": int(aset.in_k[s.members].sum())}
            for s in strata.strata
        ],
        "warnings": sorted({str(w.message) for w in caught}),
        "methods": results,
    }
    text = dumps(report)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    if first_error is not None:
        print(f"error: {first_error[1]}", file=sys.stderr)
        return first_error[0]
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    text = _read(args.config, "config") if args.config else _load_text("tableS5.json")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"config: malformed JSON: {exc}", EXIT_INPUT) from None
    if not isinstance(doc, dict):
        raise CliError("config: expected a JSON object", EXIT_INPUT)
    for key, val in (("runs", args.runs), ("n", args.n), ("seed", args.seed),
                     ("threads", args.threads), ("oracle_m", args.oracle_m)):
        if val is not None:
            doc[key] = val
    try:
        cfg = SimulationConfig.from_dict(doc)
    except (ConfigError, TypeError) as exc:
        raise CliError(f"config: {exc}", EXIT_INPUT) from None
    report = run_monte_carlo(cfg)
    if args.out:
        out = Path(args.out)
        stem = out.with_suffix("") if out.suffix == ".json" else out
        _write(str(stem) + ".json", report.to_json())
        _write(str(stem) + ".txt", report.to_table())
    for s in report.summaries:
        print(
            f"{pair_label(s.pair)} {s.method}: bias={s.bias:.4f} sd={s.sd:.4f} "
            f"se={s.mean_se:.4f} cp={s.cp:.3f} failed={s.n_failed}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ecetrial",
        description="Robust treatment-effect analysis for platform trials.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate-design", help="check and compile a design file")
    v.add_argument("design", nargs="?", help="design JSON file")
    v.add_argument("--design", dest="design_opt", help="design JSON file")

    a = sub.add_parser("analyze", help="estimate a pairwise effect on the eligible population")
    a.add_argument("--design", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--columns", help="column map JSON")
    a.add_argument("--arms", required=True, help="arm pair 'j,k'")
    a.add_argument("--method", default="all",
                   help="comma list of " + "|".join(METHODS) + ", or 'all'")
    a.add_argument("--covariates", default="", help="comma list of adjustment covariates")
    a.add_argument("--model", choices=("linear", "anhecova"), default="linear")
    a.add_argument("--center", action="store_true", help="center the working models per stratum")
    a.add_argument("--subset", help="restricted set: 'substudy=1', 'substudy=1|2' or 'arms-only'")
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--contrast", default="diff", help="diff|theta_jk|theta_kj")
    a.add_argument("--margin", type=float, default=None, help="non-inferiority margin")
    a.add_argument("--estimated-propensity", action="store_true",
                   help="replace known probabilities by within-stratum proportions")
    a.add_argument("--out", help="write the JSON report here instead of stdout")

    s = sub.add_parser("simulate", help="run the Monte Carlo study")
    s.add_argument("--config", help="simulation config JSON (default: bundled tableS5.json)")
    s.add_argument("--runs", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--oracle-m", type=int, dest="oracle_m")
    s.add_argument("--out", help="output stem; writes STEM.json and STEM.txt")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate-design":
            args.design = args.design or args.design_opt
            if not args.design:
                raise CliError("validate-design needs a design path", EXIT_INPUT)
            return cmd_validate_design(args)
        if args.command == "analyze":
            return cmd_analyze(args)
        return cmd_simulate(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except EceTrialError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
