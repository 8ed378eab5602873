"""Command-line surface tying the pipeline together.

Subcommands: validate, simulate, fit, envelope, landscape, bootstrap,
report.  Exit codes: 0 success, 2 validation or usage error, 3 numerical
failure.  Errors emit one structured JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .bootstrap import BootstrapConfig, run_double_bootstrap, write_report
from .dataio import ModelConfig, build_design, load_data, save_fit_result, write_meta
from .envelope import select_structure
from .errors import AsterError, GraphError, NumericalError
from .fitness import FitnessQuery, delta_method_se, expected_fitness, landscape_grid
from .graph import load_graph, validate
from .model import AsterModel, fit_mle
from .scenario import ScenarioSpec, generate_scenario

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _log_error(kind: str, exc: Exception) -> None:
    line = json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)


def _load_model(args) -> tuple[AsterModel, ModelConfig, dict]:
    graph = load_graph(args.graph)
    problems = validate(graph)
    if problems:
        raise GraphError("; ".join(problems))
    config = ModelConfig.load(args.model)
    Y, covariates, _ = load_data(args.data, graph)
    M, offset, names, k = build_design(graph, config, covariates)
    ga = graph.compile()
    model = AsterModel.build(
        ga, Y, M, offset, interest_dim=k, column_names=names
    )
    return model, config, covariates


def _profiles_from_file(path, config: ModelConfig, model: AsterModel):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        rows = list(r)
    graph = model.graph.spec
    settings = []
    labels = []
    for i, row in enumerate(rows):
        settings.append({z: float(row[z]) for z in config.covariates})
        labels.append(row.get("label", f"profile{i + 1}"))
    from .dataio import profile_rows_builder

    build = profile_rows_builder(graph, config)
    profiles = np.stack([build(s) for s in settings])
    return FitnessQuery.from_rows(profiles, offset=config.offset, labels=tuple(labels))


def _top_profiles(model: AsterModel, fit, top_n: int) -> FitnessQuery:
    """Highest-fitness unique in-sample covariate profiles."""
    mu_fit = fit.mu_hat[:, model.graph.fitness_idx].sum(axis=1)
    order = np.argsort(-mu_fit, kind="stable")
    seen = set()
    rows = []
    labels = []
    for i in order:
        key = model.M[i].tobytes()
        if key in seen:
            continue
        seen.add(key)
        rows.append(model.M[i])
        labels.append(f"id{i + 1}")
        if len(rows) == top_n:
            break
    offset = model.offset[:1].repeat(len(rows), axis=0)
    return FitnessQuery.from_rows(np.stack(rows), offset=offset, labels=tuple(labels))


def cmd_validate(args) -> int:
    graph = load_graph(args.graph)
    problems = validate(graph)
    for p in problems:
        print(p)
    if problems:
        return EXIT_VALIDATION
    print("ok")
    return EXIT_OK


def cmd_simulate(args) -> int:
    subspace = tuple(int(v) for v in args.subspace.split(",")) if args.subspace else ()
    spec = ScenarioSpec(
        n_individuals=args.n,
        graph_kind=args.graph_kind,
        stages=args.stages,
        covariate_law=args.covariate_law,
        quadratic=not args.no_quadratic,
        true_subspace=subspace,
    )
    generate_scenario(spec, seed=args.seed, outdir=args.out)
    print(f"wrote scenario to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    model, config, _ = _load_model(args)
    fit = fit_mle(model)
    outdir = Path(args.out)
    save_fit_result(outdir, fit, model.column_names)
    write_meta(outdir, seed=None, configs=(config.to_dict(),))
    print(f"loglik {fit.loglik:.6f} in {fit.iterations} iterations")
    return EXIT_OK


def cmd_envelope(args) -> int:
    model, config, _ = _load_model(args)
    fit = fit_mle(model)
    res = select_structure(model, fit, args.method, args.criterion)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "selection.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["candidate", "u", "loglik", "df", "criterion_value", "selected",
             "skipped", "message"]
        )
        best = res.structure
        best_label = (
            "+".join(map(str, best.index_set))
            if best.index_set is not None
            else f"u={best.u}"
        )
        for c in res.candidates:
            w.writerow(
                [
                    c.label,
                    c.u,
                    "" if np.isnan(c.loglik) else repr(c.loglik),
                    c.df,
                    repr(c.criterion_value),
                    int(c.label == best_label),
                    int(c.skipped),
                    c.message,
                ]
            )
    write_meta(outdir, seed=None,
               extra={"method": args.method, "criterion": args.criterion},
               configs=(config.to_dict(),))
    print(f"selected {best_label} (u={best.u}) by {args.criterion}")
    return EXIT_OK


def cmd_landscape(args) -> int:
    model, config, _ = _load_model(args)
    if len(config.covariates) != 2:
        raise AsterError("landscape grids need exactly two model covariates")
    fit = fit_mle(model)
    z1n, z2n = config.covariates
    from .dataio import profile_rows_builder

    build = profile_rows_builder(model.graph.spec, config)

    def builder(z1, z2):
        return build({z1n: z1, z2n: z2})

    def parse_range(text, default):
        if not text:
            return default
        lo, hi = (float(v) for v in text.split(","))
        return lo, hi

    r1 = parse_range(args.z1, (-2.0, 2.0))
    r2 = parse_range(args.z2, (-2.0, 2.0))
    z1s = np.linspace(r1[0], r1[1], args.grid)
    z2s = np.linspace(r2[0], r2[1], args.grid)
    grid = landscape_grid(model, fit.tau_hat, z1s, z2s, builder, beta0=fit.beta_hat)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    se = None
    if args.se:
        rows = np.stack([builder(z1, z2) for z1, _, _ in grid] )
        query = FitnessQuery.from_rows(rows, offset=config.offset)
        se = delta_method_se(model, fit, query)
    with open(outdir / "landscape.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["z1", "z2", "ghat"] + (["se"] if se is not None else []))
        for i, (z1, z2, g) in enumerate(grid):
            row = [repr(float(z1)), repr(float(z2)), repr(float(g))]
            if se is not None:
                row.append(repr(float(se[i])))
            w.writerow(row)
    write_meta(outdir, seed=None, configs=(config.to_dict(),))
    print(f"wrote {len(grid)} grid points")
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    model, config, _ = _load_model(args)
    fit = fit_mle(model)
    if args.profiles:
        query = _profiles_from_file(args.profiles, config, model)
    else:
        query = _top_profiles(model, fit, args.top)
    cfg = BootstrapConfig(
        B=args.B,
        K=args.K,
        seed=args.seed,
        query=query,
        criterion=args.criterion,
        method={"subspace": "subspace", "1d": "1d"}[args.method],
        n_jobs=args.jobs,
    )
    selection = select_structure(model, fit, cfg.method, cfg.criterion)
    report = run_double_bootstrap(model, fit, selection, cfg)
    write_report(report, args.out, top_n=args.top)
    print(f"wrote bootstrap report to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.dir) / "report.csv"
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    header = f"{'profile':>12s} {'g_env':>8s} {'se_env':>8s} {'g_mle':>8s} {'se_mle':>8s} {'ratio':>7s}"
    print(header)
    for row in rows:
        if args.top and row["top"] != "1":
            continue
        print(
            f"{row['profile']:>12s} "
            f"{float(row['g_env']):8.3f} {float(row['se_env']):8.3f} "
            f"{float(row['g_mle']):8.3f} {float(row['se_mle']):8.3f} "
            f"{float(row['ratio']):7.3f}"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asterenv")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_model_args(p):
        p.add_argument("--data", required=True)
        p.add_argument("--graph", required=True)
        p.add_argument("--model", required=True)

    p = sub.add_parser("validate", help="check a graph config")
    p.add_argument("--graph", required=True)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("simulate", help="generate a synthetic scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--graph-kind", default="layered", choices=["layered", "chain"])
    p.add_argument("--stages", type=int, default=10)
    p.add_argument("--covariate-law", default="uniform", choices=["uniform", "normal"])
    p.add_argument("--no-quadratic", action="store_true")
    p.add_argument("--subspace", default="", help="plant indices, e.g. 1,4")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("fit", help="maximum likelihood fit")
    add_model_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("envelope", help="envelope structure selection")
    add_model_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="subspace", choices=["subspace", "1d"])
    p.add_argument("--criterion", default="bic", choices=["aic", "bic"])
    p.set_defaults(fn=cmd_envelope)

    p = sub.add_parser("landscape", help="fitness grid over two covariates")
    add_model_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=50)
    p.add_argument("--z1", default="", help="range lo,hi")
    p.add_argument("--z2", default="", help="range lo,hi")
    p.add_argument("--se", action="store_true", help="add delta-method errors")
    p.set_defaults(fn=cmd_landscape)

    p = sub.add_parser("bootstrap", help="double parametric bootstrap")
    add_model_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--B", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--criterion", default="bic", choices=["aic", "bic"])
    p.add_argument("--method", default="subspace", choices=["subspace", "1d"])
    p.add_argument("--profiles", default="", help="covariate-profile CSV")
    p.add_argument("--top", type=int, default=7)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_bootstrap)

    p = sub.add_parser("report", help="render a bootstrap ratio table")
    p.add_argument("--dir", required=True)
    p.add_argument("--top", action="store_true", help="only the flagged rows")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (GraphError, FileNotFoundError, ValueError) as exc:
        _log_error("validation", exc)
        return EXIT_VALIDATION
    except NumericalError as exc:
        _log_error("numerical", exc)
        return EXIT_NUMERICAL
    except AsterError as exc:
        _log_error("error", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
