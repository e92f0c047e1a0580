"""Command-line front end: ``simulate``, ``fit``, and ``analyze``.

Every run writes a ``manifest.json`` echoing the fully resolved configuration
(seed always explicit) so it can be reproduced exactly.  Exit codes: 0 on
success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cox import breslow, newton_solve
from .data import CsvSchema, load_csv, sort_cohort
from .errors import CoxSubError
from .sampling import SamplingMethod
from .simulate import (
    ScenarioConfig,
    repeated_subsampling,
    resolve_workers,
    run_scenario,
)
from .weighted import full_data_sandwich, normal_quantile

_METHOD_FLAGS = {
    "uniform": (SamplingMethod.UNIFORM,),
    "fullopt": (SamplingMethod.FULL_OPT,),
    "cenopt": (SamplingMethod.CEN_OPT,),
    "all": (SamplingMethod.UNIFORM, SamplingMethod.FULL_OPT, SamplingMethod.CEN_OPT),
}


def _parse_r_spec(text: str):
    """``"500"`` -> [500]; ``"100..500:100"`` -> [100, 200, 300, 400, 500]."""
    text = text.strip()
    if ".." in text:
        span, _, step = text.partition(":")
        start, _, end = span.partition("..")
        if not step:
            raise argparse.ArgumentTypeError("range form must be start..end:step")
        start, end, step = int(start), int(end), int(step)
        if step < 1 or end < start:
            raise argparse.ArgumentTypeError(f"bad subsample-size range {text!r}")
        return list(range(start, end + 1, step))
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("subsample size must be positive")
    return [value]


def _csv_list(text: str):
    items = [item.strip() for item in text.split(",") if item.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def _load_config_file(path: str) -> dict:
    entries = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CoxSubError(f"{path}: line {lineno}: expected key=value")
        entries[key.strip().replace("-", "_")] = value.strip()
    return entries


def _bool_from_text(text: str) -> bool:
    return text.strip().lower() in {"1", "true", "yes", "on"}


# per-command merge table: dest -> (cast for config-file text, hard default)
_MERGE = {
    "simulate": {
        "case": (int, None),
        "baseline": (str, None),
        "censoring": (float, None),
        "n": (int, 20000),
        "r": (_parse_r_spec, [100, 200, 300, 400, 500]),
        "b": (int, 1000),
        "method": (str, "all"),
        "seed": (int, 42),
        "level": (float, 0.95),
        "out": (str, "coxsub_out"),
    },
    "fit": {
        "input": (str, None),
        "time_col": (str, "time"),
        "status_col": (str, "status"),
        "covariates": (_csv_list, None),
        "categorical": (_csv_list, []),
        "median_fill": (_bool_from_text, False),
        "level": (float, 0.95),
        "seed": (int, 42),
        "out": (str, "coxsub_out"),
    },
    "analyze": {
        "input": (str, None),
        "time_col": (str, "time"),
        "status_col": (str, "status"),
        "covariates": (_csv_list, None),
        "categorical": (_csv_list, []),
        "median_fill": (_bool_from_text, False),
        "method": (str, "all"),
        "r": (_parse_r_spec, [500]),
        "b": (int, 1000),
        "seed": (int, 42),
        "level": (float, 0.95),
        "out": (str, "coxsub_out"),
    },
}


def _merge_config(ns: argparse.Namespace, command: str, parser: argparse.ArgumentParser):
    table = _MERGE[command]
    if ns.config:
        entries = _load_config_file(ns.config)
        unknown = set(entries) - set(table)
        if unknown:
            parser.error(f"config file keys not recognized: {sorted(unknown)}")
        for dest, (cast, _) in table.items():
            if getattr(ns, dest, None) is None and dest in entries:
                try:
                    setattr(ns, dest, cast(entries[dest]))
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    parser.error(f"config file value for {dest}: {exc}")
    for dest, (_, default) in table.items():
        if getattr(ns, dest, None) is None:
            setattr(ns, dest, default)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coxsub",
        description="Cox proportional hazards estimation via two-stage optimal subsampling",
    )
    parser.add_argument("--version", action="version", version=f"coxsub {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    sim.add_argument("--case", type=int, choices=(1, 2, 3, 4))
    sim.add_argument("--baseline", choices=("constant", "linear"))
    sim.add_argument("--censoring", type=float, help="target censoring rate in (0,1)")
    sim.add_argument("--n", type=int)
    sim.add_argument("--r", type=_parse_r_spec, help="subsample size or start..end:step")
    sim.add_argument("--b", type=int, help="replicate count")
    sim.add_argument("--method", choices=sorted(_METHOD_FLAGS))
    sim.add_argument("--seed", type=int)
    sim.add_argument("--level", type=float)
    sim.add_argument("--out", help="output directory")
    sim.add_argument("--config", help="key=value config file merged under flags")

    fit = sub.add_parser("fit", help="full-data fit of a CSV dataset")
    ana = sub.add_parser("analyze", help="repeated subsampling on a CSV dataset")
    for p in (fit, ana):
        p.add_argument("--input")
        p.add_argument("--time-col", dest="time_col")
        p.add_argument("--status-col", dest="status_col")
        p.add_argument("--covariates", type=_csv_list)
        p.add_argument("--categorical", type=_csv_list)
        p.add_argument("--median-fill", dest="median_fill", action="store_const", const=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--level", type=float)
        p.add_argument("--out")
        p.add_argument("--config", help="key=value config file merged under flags")
    ana.add_argument("--method", choices=sorted(_METHOD_FLAGS))
    ana.add_argument("--r", type=_parse_r_spec)
    ana.add_argument("--b", type=int)
    return parser


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _manifest(command: str, config: dict, started: float, extra=None) -> dict:
    doc = {
        "command": command,
        "artifact_version": __version__,
        "config": config,
        "wall_clock_seconds": time.perf_counter() - started,
    }
    if extra:
        doc.update(extra)
    return doc


def _schema_from_args(ns) -> CsvSchema:
    if not ns.input:
        raise CoxSubError("--input is required")
    if not ns.covariates:
        raise CoxSubError("--covariates is required")
    return CsvSchema(
        time=ns.time_col,
        status=ns.status_col,
        covariates=tuple(ns.covariates),
        categorical=frozenset(ns.categorical or ()),
        median_fill=bool(ns.median_fill),
    )


def cmd_simulate(ns) -> int:
    started = time.perf_counter()
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    methods = _METHOD_FLAGS[ns.method]
    common = dict(
        n=ns.n, r_grid=tuple(ns.r), b=ns.b, methods=methods,
        master_seed=ns.seed, level=ns.level,
    )
    if ns.case is not None:
        config = ScenarioConfig.from_case(ns.case, **common)
    else:
        if ns.baseline is None or ns.censoring is None:
            raise CoxSubError("give --case or both --baseline and --censoring")
        config = ScenarioConfig(
            baseline=ns.baseline, target_censoring=ns.censoring, **common
        )
    result = run_scenario(config, workers=resolve_workers())
    result.metrics.write_coordinate_csv(out / "metrics_by_coordinate.csv")
    result.metrics.write_summary_csv(out / "metrics_mse.csv")
    resolved = {
        "case": config.case,
        "baseline": config.baseline.value,
        "target_censoring": config.target_censoring,
        "n": config.n,
        "r_grid": list(config.r_grid),
        "b": config.b,
        "methods": [m.value for m in config.methods],
        "seed": config.master_seed,
        "level": config.level,
        "out": str(out),
    }
    _write_json(out / "manifest.json", _manifest(
        "simulate", resolved, started,
        extra={
            "calibrated_c": result.calibrated_c,
            "achieved_censoring": result.achieved_rate,
            "failures": result.failure_summary(),
        },
    ))
    return 0


def cmd_fit(ns) -> int:
    started = time.perf_counter()
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    schema = _schema_from_args(ns)
    cohort = load_csv(ns.input, schema)
    sorted_cohort = sort_cohort(cohort)
    fit = newton_solve(sorted_cohort)
    baseline = breslow(sorted_cohort, fit.beta)
    _, se = full_data_sandwich(sorted_cohort, fit.beta, fit.hessian)
    z = normal_quantile(0.5 * (1.0 + ns.level))
    doc = fit.to_dict()
    doc.update(
        {
            "se": [float(v) for v in se],
            "ci_lower": [float(v) for v in fit.beta - z * se],
            "ci_upper": [float(v) for v in fit.beta + z * se],
            "level": ns.level,
            "feature_names": list(cohort.feature_names or ()),
            "baseline": baseline.to_dict(),
        }
    )
    _write_json(out / "fit.json", doc)
    resolved = {
        "input": ns.input,
        "time_col": ns.time_col,
        "status_col": ns.status_col,
        "covariates": list(ns.covariates),
        "categorical": list(ns.categorical or ()),
        "median_fill": bool(ns.median_fill),
        "level": ns.level,
        "seed": ns.seed,
        "out": str(out),
    }
    _write_json(out / "manifest.json", _manifest("fit", resolved, started))
    return 0


def cmd_analyze(ns) -> int:
    started = time.perf_counter()
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    if len(ns.r) != 1:
        raise CoxSubError("analyze expects a single --r value")
    r = ns.r[0]
    schema = _schema_from_args(ns)
    cohort = load_csv(ns.input, schema)
    sorted_cohort = sort_cohort(cohort)
    full_fit = newton_solve(sorted_cohort)
    _, full_se = full_data_sandwich(sorted_cohort, full_fit.beta, full_fit.hessian)
    methods = _METHOD_FLAGS[ns.method]
    betas, ses, failures = repeated_subsampling(
        cohort, methods, r, ns.b, ns.seed, level=ns.level, workers=resolve_workers()
    )

    names = list(cohort.feature_names or (f"z{j + 1}" for j in range(cohort.p)))
    rows = []
    method_stats = {}
    for j in range(cohort.p):
        rows.append(["FullData", j + 1, float(full_fit.beta[j]), "", float(full_se[j]), ""])
    for method in methods:
        all_beta = betas[method.value]
        all_se = ses[method.value]
        ok = ~np.isnan(all_beta).any(axis=1)
        used = int(ok.sum())
        if used == 0:
            raise CoxSubError(f"{method.value}: every replicate failed")
        beta_ok, se_ok = all_beta[ok], all_se[ok]
        mean = beta_ok.mean(axis=0)
        sse = beta_ok.std(axis=0, ddof=1) if used > 1 else np.full(cohort.p, np.nan)
        ese = se_ok.mean(axis=0)
        mse = ((beta_ok - full_fit.beta) ** 2).mean(axis=0)
        method_stats[method.value] = {
            "mean": mean.tolist(),
            "sse": [None if np.isnan(v) else float(v) for v in sse],
            "ese": ese.tolist(),
            "mse": mse.tolist(),
            "replicates_used": used,
            "failures": failures[method.value],
        }
        for j in range(cohort.p):
            rows.append(
                [
                    method.value,
                    j + 1,
                    float(mean[j]),
                    "" if np.isnan(sse[j]) else float(sse[j]),
                    float(ese[j]),
                    float(mse[j]),
                ]
            )

    with open(out / "analysis.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("method,coord,name,mean,sse,ese,mse\n")
        for method, coord, mean, sse_v, ese_v, mse_v in rows:
            def cell(v):
                return "" if v == "" else repr(float(v))
            fh.write(
                f"{method},{coord},{names[coord - 1]},{cell(mean)},{cell(sse_v)},"
                f"{cell(ese_v)},{cell(mse_v)}\n"
            )
    _write_json(
        out / "analysis.json",
        {
            "full_data": {
                "beta": full_fit.beta.tolist(),
                "se": full_se.tolist(),
                "loglik": full_fit.loglik,
            },
            "r": r,
            "b": ns.b,
            "feature_names": names,
            "methods": method_stats,
        },
    )
    resolved = {
        "input": ns.input,
        "time_col": ns.time_col,
        "status_col": ns.status_col,
        "covariates": list(ns.covariates),
        "categorical": list(ns.categorical or ()),
        "median_fill": bool(ns.median_fill),
        "method": ns.method,
        "r": r,
        "b": ns.b,
        "seed": ns.seed,
        "level": ns.level,
        "out": str(out),
    }
    _write_json(out / "manifest.json", _manifest("analyze", resolved, started))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    _merge_config(ns, ns.command, parser)
    handler = {"simulate": cmd_simulate, "fit": cmd_fit, "analyze": cmd_analyze}[ns.command]
    try:
        return handler(ns)
    except CoxSubError as exc:
        print(f"coxsub {ns.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
