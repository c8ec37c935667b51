"""Command line interface.

::

    mitram fit --spec model.spec --data data.csv --out results/
    mitram marginal --fit results/ --spec model.spec --query q.csv --out marginal.csv
    mitram simulate --design design.spec --out data.csv

Exit codes: 0 success, 2 non-convergence, 3 input error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bases import BasisError, BasisKind, TransformationBasis
from .data import INTERCEPT, DataError, Dataset, SpecError, format_number, parse_dataset, parse_spec, write_dataset
from .fit import FitOptions, FitResult, fit
from .likelihood import DegenerateIntervalError, InvalidParameterError, ModelSpec, ParameterVector, parameter_names
from .marginal import MarginalQuery, marginal_cdf
from .simulate import Covariate, SimulationDesign, simulate

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_INPUT = 3
GRID_POINTS = 101

log = logging.getLogger("mitram")


class InputError(ValueError):
    pass


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_keyvalue(path: Path) -> dict:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return {row[0]: row[1] for row in reader if row}


# ---------------------------------------------------------------------------
# marginal queries
# ---------------------------------------------------------------------------


def _grid(spec: ModelSpec, lo: float, hi: float, grid: str | None) -> np.ndarray:
    if grid:
        try:
            return np.array([float(v) for v in grid.split(",")])
        except ValueError:
            raise InputError(f"invalid --grid {grid!r}") from None
    if spec.basis.kind is BasisKind.ORDINAL:
        return np.arange(1.0, spec.basis.n_categories + 1)
    return np.linspace(lo, hi, GRID_POINTS)


def read_queries(path, fixed_names, random_names, strata_levels=()) -> list[tuple[str, np.ndarray, np.ndarray, int]]:
    """Query file: a ``query`` id column, the fixed-effects columns, the
    non-constant random-effects columns and, for stratified models, the
    stratum column named ``stratum``."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    out = []
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = ["query"] + list(fixed_names) + [r for r in random_names if r != INTERCEPT]
        for name in needed:
            if name not in header:
                raise InputError(f"{path}:1: column {name!r} missing from query file")
        for line, row in enumerate(reader, start=2):
            try:
                x = np.array([float(row[n]) for n in fixed_names])
                u = np.array([1.0 if n == INTERCEPT else float(row[n]) for n in random_names])
            except (TypeError, ValueError):
                raise InputError(f"{path}:{line}: non-numeric query value") from None
            s = 0
            if strata_levels:
                level = (row.get("stratum") or "").strip()
                if level not in strata_levels:
                    raise InputError(f"{path}:{line}: unknown stratum {level!r}")
                s = strata_levels.index(level)
            out.append((row["query"], x, u, s))
    return out


def marginal_rows(spec, params, queries, grid):
    rows = []
    for qid, x, u, s in queries:
        q = MarginalQuery(x, u, grid, s)
        for y, p in zip(grid, marginal_cdf(spec, params, q)):
            rows.append([qid, format_number(y), format_number(p)])
    return rows


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def write_fit(out: Path, result: FitResult, spec: ModelSpec, dataset: Dataset, extra: dict):
    out.mkdir(parents=True, exist_ok=True)
    names = parameter_names(spec, dataset.fixed_names)
    rows = [
        [n, format_number(e), format_number(s), str(bool(a)).lower()]
        for n, e, s, a in zip(names, result.estimates, result.se, result.active)
    ]
    _write_csv(out / "parameters.csv", ["name", "estimate", "se", "active"], rows)
    _write_csv(out / "covariance.csv", ["name"] + names,
               [[n] + [format_number(v) for v in row] for n, row in zip(names, result.cov)])
    meta = {
        "converged": str(result.converged).lower(),
        "loglik": format_number(result.loglik),
        "loglik_optim": format_number(result.loglik_optim),
        "outer_iterations": str(result.outer_iterations),
        "inner_iterations": str(result.inner_iterations),
        "grad_norm": format_number(result.grad_norm),
        "max_violation": format_number(result.max_violation),
        "n_clusters": str(result.n_clusters),
        "n_obs": str(result.n_obs),
        "basis": spec.basis.kind.value,
        "order": str(spec.basis.order),
        "support_lo": format_number(spec.basis.support[0]) if spec.basis.support else "",
        "support_hi": format_number(spec.basis.support[1]) if spec.basis.support else "",
        "n_strata": str(spec.n_strata),
        "strata_levels": "|".join(dataset.strata_levels),
        "link": spec.link.name,
        "marginalization": spec.marginalization.value,
        "R": str(spec.R),
        "integration": result.rule.describe(spec.R) if not dataset.exact else "none",
        "integration_final": result.rule_final.describe(spec.R) if not dataset.exact else "none",
        "warnings": " | ".join(result.warnings),
    }
    meta.update(extra)
    _write_csv(out / "fit.csv", ["key", "value"], list(meta.items()))


def cmd_fit(args) -> int:
    sf = parse_spec(args.spec)
    dataset = parse_dataset(args.data, sf.roles)
    spec = sf.resolve(dataset)
    rule = sf.rule
    if args.cubature:
        rule = replace(rule, kind=args.cubature, nodes=None if args.nodes is None else rule.nodes)
    if args.nodes is not None:
        rule = replace(rule, nodes=args.nodes)
    if args.seed is not None:
        rule = replace(rule, seed=args.seed)
    options = FitOptions(
        tol=args.tol if args.tol is not None else sf.tol,
        max_outer=args.max_outer if args.max_outer is not None else sf.max_outer,
        rule=rule,
        fix_gamma=args.fix_gamma,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = fit(spec, dataset, options)
    out = Path(args.out)
    y = dataset.response_values()
    write_fit(out, result, spec, dataset, {"y_min": format_number(y.min()), "y_max": format_number(y.max())})
    if args.marginal:
        queries = read_queries(args.marginal, dataset.fixed_names, dataset.random_names, dataset.strata_levels)
        grid = _grid(spec, y.min(), y.max(), args.grid)
        _write_csv(out / "marginal.csv", ["query", "y", "cdf"], marginal_rows(spec, result.params, queries, grid))
    for w in result.warnings:
        log.warning(w)
    if not result.converged:
        log.error("fit did not converge; diagnostics written to %s", out / "fit.csv")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def load_fit(directory) -> tuple[dict, dict]:
    d = Path(directory)
    try:
        meta = _read_keyvalue(d / "fit.csv")
        with (d / "parameters.csv").open(newline="") as fh:
            est = {row["name"]: float(row["estimate"]) for row in csv.DictReader(fh)}
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read fit from {d}: {exc}") from None
    return meta, est


def cmd_marginal(args) -> int:
    sf = parse_spec(args.spec)
    meta, est = load_fit(args.fit)
    basis = sf.model.basis
    if meta.get("support_lo"):
        basis = TransformationBasis(basis.kind, basis.order, (float(meta["support_lo"]), float(meta["support_hi"])))
    n_strata = int(meta.get("n_strata", "1"))
    spec = ModelSpec(basis, sf.model.link, sf.model.marginalization, sf.model.R, n_strata)
    names = parameter_names(spec, sf.roles.fixed)
    missing = [n for n in names if n not in est]
    if missing:
        raise InputError(f"fit in {args.fit} does not match the specification (missing {missing[:3]})")
    x = np.array([est[n] for n in names])
    params = ParameterVector.from_array(x, spec.P, len(sf.roles.fixed), spec.M)
    levels = tuple(v for v in meta.get("strata_levels", "").split("|") if v)
    queries = read_queries(args.query, sf.roles.fixed, sf.roles.random, levels)
    grid = _grid(spec, float(meta.get("y_min", 0)), float(meta.get("y_max", 1)), args.grid)
    _write_csv(Path(args.out), ["query", "y", "cdf"], marginal_rows(spec, params, queries, grid))
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def design_from_spec(sf) -> SimulationDesign:
    d = sf.design
    prm = sf.parameters
    where = sf.where
    for key in ("theta", "gamma"):
        if key not in prm:
            raise SpecError(f"{where('parameters', key)}: missing true {key}")
    beta = prm.get("beta", np.zeros(0))
    try:
        covs = []
        spec_covs = [c.strip() for c in d.get("covariates", "").split(",") if c.strip()]
        for item in spec_covs:
            parts = [p.strip() for p in item.split(":")]
            covs.append(Covariate(parts[0], parts[1] if len(parts) > 1 else "normal", len(parts) > 2 and parts[2] == "cluster"))
        if tuple(c.name for c in covs) != sf.roles.fixed:
            raise SpecError(f"{where('design', 'covariates')}: covariates must list the fixed columns {sf.roles.fixed}")
        size_raw = d.get("size", "4")
        size = tuple(int(v) for v in size_raw.split("-")) if "-" in size_raw else int(size_raw)
        times = tuple(float(v) for v in d.get("slope_times", "0,1").split(","))
        basis = sf.model.basis
        if basis.kind is BasisKind.BERNSTEIN and basis.support is None:
            raise SpecError(f"{where('model', 'support')}: simulation from a Bernstein basis needs a support")
        spec = sf.model
        return SimulationDesign(
            spec,
            ParameterVector(prm["theta"], beta, prm["gamma"]),
            int(d.get("clusters", "100")),
            size,
            tuple(covs),
            int(d.get("seed", "1")),
            times,
            float(d["round"]) if "round" in d else None,
        )
    except ValueError as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(f"{where('design', None)}: {exc}") from None


def cmd_simulate(args) -> int:
    sf = parse_spec(args.design)
    design = design_from_spec(sf)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds = simulate(design)
    for w in caught:
        log.warning(str(w.message))
    # output columns follow the [data] section of the design file
    roles = sf.roles
    if sf.response == "censored" and design.round_to is None:
        raise SpecError(f"{sf.where('design', 'round')}: censored designs need a rounding width")
    if sf.response != "censored" and design.round_to is not None:
        raise SpecError(f"{sf.where('design', 'round')}: rounding produces censored responses; set response = censored")
    if len(roles.random) != sf.model.R or (roles.random and roles.random[0] != INTERCEPT):
        raise SpecError(f"{sf.where('data', 'random')}: simulation designs start with the constant column '1'")
    ds = Dataset(ds.clusters, roles, ds.strata_levels, ds.ordinal)
    write_dataset(ds, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mitram", description="Marginally interpretable transformation models for clustered data.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model")
    f.add_argument("--spec", required=True, help="model specification file")
    f.add_argument("--data", required=True, help="CSV data file")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--nodes", type=int, help="QMC node count or sparse-grid level")
    f.add_argument("--cubature", choices=("qmc", "sparse"))
    f.add_argument("--seed", type=int, help="QMC scrambling seed")
    f.add_argument("--fix-gamma", type=float, dest="fix_gamma", help="hold all variance parameters at this value")
    f.add_argument("--marginal", help="query CSV; writes marginal.csv")
    f.add_argument("--grid", help="comma-separated response grid for --marginal")
    f.add_argument("--max-outer", type=int, dest="max_outer")
    f.add_argument("--tol", type=float)
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("marginal", help="marginal distribution functions from a fit")
    m.add_argument("--fit", required=True, help="output directory of 'mitram fit'")
    m.add_argument("--spec", required=True)
    m.add_argument("--query", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--grid")
    m.set_defaults(func=cmd_marginal)

    s = sub.add_parser("simulate", help="simulate a dataset")
    s.add_argument("--design", required=True, help="design specification file")
    s.add_argument("--out", required=True, help="CSV output")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, DataError, SpecError, BasisError, InvalidParameterError, DegenerateIntervalError, ValueError) as exc:
        print(f"mitram: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
