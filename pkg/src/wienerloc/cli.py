"""Command-line surface.

Subcommands: verify (analytical-check suite), density (end-to-end diffusion
experiment), nondegen (spectral and tail tables), weights (weight-norm scaling
in the window width), laplace (path-variance Laplace transform table).

Artifacts are CSV tables plus a JSON manifest embedding the resolved config
and its hash; files are written to a temp name and renamed, so a crashed run
never leaves a partial table.  A worker-count environment variable (MC_WORKERS)
is accepted for scheduling but never influences any numeric output.

Exit codes: 0 pass, 1 check failure, 2 usage error, 3 numerical degeneracy.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import tempfile

import numpy as np

from . import verify as V
from .config import RunConfig
from .estimate import ExperimentAborted, example_experiment
from .funcalc import brownian_coordinate, squared_brownian
from .ibp import (DegenerateCovariance, ibp_weight, localized_norm,
                  remainder_bundle, weight_norm_scaling)
from .localize import build_localizers, scale_law_check
from .mctypes import CheckReport
from .nondegen import lambda_min
from .sde import MODELS, euler_functional, euler_simulate, model_coefficients
from .timegrid import InvalidArgument, make_grid, make_window, sample_increments

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_DEGENERATE = 0, 1, 2, 3


def _atomic_write(path: str, write_fn) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    def inner(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    _atomic_write(path, inner)


def _write_manifest(cfg: RunConfig, name: str, extra: dict) -> None:
    payload = {"subcommand": name, "config": dataclasses.asdict(cfg),
               "config_hash": cfg.digest(), "seed": cfg.seed, **extra}
    _atomic_write(os.path.join(cfg.out_dir, f"{name}_manifest.json"),
                  lambda fh: json.dump(payload, fh, indent=2, sort_keys=True))


def _report_rows(reports: list[CheckReport]) -> list[list]:
    return [[r.name, f"{r.lhs:.12g}", f"{r.rhs:.12g}", r.verdict,
             f"{r.tolerance:.6g}"] for r in reports]


def _cmd_laplace(cfg: RunConfig) -> int:
    reports = V.laplace_check(cfg.lambdas, cfg.n_paths, cfg.m, cfg.seed)
    _write_csv(os.path.join(cfg.out_dir, "laplace.csv"),
               ["lambda", "estimate", "target", "verdict", "tolerance"],
               [[lam, f"{r.lhs:.12g}", f"{r.rhs:.12g}", r.verdict,
                 f"{r.tolerance:.6g}"] for lam, r in zip(cfg.lambdas, reports)])
    _write_manifest(cfg, "laplace", {"passed": all(r.passed for r in reports)})
    for r in reports:
        print(f"{r.name}: {r.verdict} ({r.lhs:.6f} vs {r.rhs:.6f})")
    return EXIT_PASS if all(r.passed for r in reports) else EXIT_FAIL


def _verify_suite(cfg: RunConfig) -> list[CheckReport]:
    reports: list[CheckReport] = []
    v = V.brownian_variance_samples(cfg.m, cfg.n_paths, cfg.seed)
    reports.append(V.brownian_variance_mean_check(cfg.n_paths, cfg.m, cfg.seed,
                                                  v_samples=v))
    reports.extend(V.laplace_check(cfg.lambdas, cfg.n_paths, cfg.m, cfg.seed,
                                   v_samples=v))
    for n in (1, 2, 3):
        for p in (1, 2, 3):
            closed, quad = V.cnp_constant(n, p), V.cnp_constant_quadrature(n, p)
            rel = abs(closed - quad) / quad
            reports.append(CheckReport(
                name=f"det-moment-constant(n={n},p={p})", lhs=closed, rhs=quad,
                verdict="pass" if rel <= 1e-9 else "fail", tolerance=1e-9))
    for k in (1, 2, 3):
        table = scale_law_check(k, 1, (0.1, 0.5, 0.9))
        vals = np.array(list(table.values()))
        spread = float(np.ptp(vals) / vals.max())
        reports.append(CheckReport(name=f"bump-scale-law(k={k})", lhs=spread,
                                   rhs=0.0,
                                   verdict="pass" if spread <= 1e-9 else "fail",
                                   tolerance=1e-9))
    scenarios = [
        V.VarianceScenario(4.0, 0.5), V.VarianceScenario(2.0, 1.5),
        V.VarianceScenario(0.5, 3.0),
        V.VarianceScenario(3.0, 0.5, "uniform", 0.6),
        V.VarianceScenario(1.0, 2.0, "uniform", 0.6),
        V.VarianceScenario(2.0, 2.0, "const", 0.3, event_fraction=1.0 / 64.0),
    ]
    n_var = min(cfg.n_paths, 200_000)
    for sc in scenarios:
        reports.append(V.variance_lemma_check(sc, 1.0, n_var, 256, cfg.seed))
    split, scale = V.variance_identity_residuals(1.0, 2.0, 0.3, 0.7, 128,
                                                 2048, cfg.seed)
    reports.append(CheckReport(name="variance-split-identity", lhs=split,
                               rhs=0.0, verdict="pass" if split <= 1e-10 else "fail",
                               tolerance=1e-10))
    reports.append(CheckReport(name="variance-scaling-identity", lhs=scale,
                               rhs=0.0, verdict="pass" if scale <= 1e-10 else "fail",
                               tolerance=1e-10))
    grid = make_grid(cfg.t_end, cfg.m)
    batch = sample_increments(grid, 1, min(cfg.n_paths, 20_000), cfg.seed)
    w = make_window(grid, cfg.t_end, cfg.delta)
    from .nondegen import CoefficientFamily
    fam = CoefficientFamily(first=np.array([[1.0]]),
                            pair=np.zeros((1, 1, 1)))
    from .ibp import z_delta_functional
    Fz = z_delta_functional(fam, w, grid)
    reports.append(V.determinant_lemma_check(Fz, fam, 0.5, w, batch, p=1,
                                             name="determinant-lemma-linear"))
    Fq = squared_brownian(grid, 1)
    small = sample_increments(grid, 1, 4096, cfg.seed + 1)
    for order in (1, 2):
        reports.append(V.leibniz_identity_check(Fq, w, small, order))
        bb = V.bracket_bound_violations(Fq, Fq, w, small, order)
        reports.append(CheckReport(
            name=f"derivative-product-bound(order={order})",
            lhs=float(bb["violations"]), rhs=0.0,
            verdict="pass" if bb["violations"] == 0 else "fail",
            tolerance=0.0, details=bb))
    return reports


def _cmd_verify(cfg: RunConfig) -> int:
    reports = _verify_suite(cfg)
    _write_csv(os.path.join(cfg.out_dir, "verify.csv"),
               ["name", "lhs", "rhs", "verdict", "tolerance"],
               _report_rows(reports))
    _write_manifest(cfg, "verify", {"passed": all(r.passed for r in reports)})
    for r in reports:
        print(f"{r.name}: {r.verdict}")
    return EXIT_PASS if all(r.passed for r in reports) else EXIT_FAIL


def _cmd_nondegen(cfg: RunConfig) -> int:
    if cfg.model not in MODELS:
        print(f"unknown model {cfg.model!r}", file=sys.stderr)
        return EXIT_USAGE
    model = MODELS[cfg.model]()
    grid = make_grid(cfg.t_end, cfg.m)
    batch = sample_increments(grid, model.drivers, cfg.n_paths, cfg.seed)
    states = euler_simulate(model, grid, batch)
    F = euler_functional(model, grid)
    values = F.value(batch)
    fam_at = model_coefficients(model)
    from .nondegen import tail_probability, tail_slope
    y = np.zeros(model.dim)
    y[: len(cfg.center)] = cfg.center[: model.dim]
    rows, out = [], []
    for delta in cfg.deltas:
        w = make_window(grid, cfg.t_end, delta)
        spec = lambda_min(fam_at(states[:, w.first_cell, :]))
        row = tail_probability(values, spec.lam, y, cfg.radius,
                               cfg.lambda_star, delta)
        rows.append(row)
        out.append([delta, f"{row.estimate:.8g}", f"{row.ci_low:.8g}",
                    f"{row.ci_high:.8g}", row.hits, row.n,
                    f"{float(spec.lam.min()):.8g}", f"{float(spec.lam.mean()):.8g}"])
    slope = tail_slope(rows)
    _write_csv(os.path.join(cfg.out_dir, "nondegen.csv"),
               ["delta", "tail_prob", "ci_low", "ci_high", "hits", "n",
                "lambda_min", "lambda_mean"], out)
    _write_manifest(cfg, "nondegen", {"tail_slope": slope})
    print(f"tail slope vs 1/delta: {slope}")
    return EXIT_PASS


def _cmd_weights(cfg: RunConfig) -> int:
    if cfg.model not in MODELS:
        print(f"unknown model {cfg.model!r}", file=sys.stderr)
        return EXIT_USAGE
    model = MODELS[cfg.model]()
    grid = make_grid(cfg.t_end, cfg.m)
    batch = sample_increments(grid, model.drivers, cfg.n_paths, cfg.seed)
    states = euler_simulate(model, grid, batch)
    F = euler_functional(model, grid)
    values = F.value(batch)
    fam_at = model_coefficients(model)
    y = np.zeros(model.dim)
    y[: len(cfg.center)] = cfg.center[: model.dim]
    rows, out = [], []
    try:
        for delta in cfg.deltas:
            w = make_window(grid, cfg.t_end, delta)
            fam = fam_at(states[:, w.first_cell, :])
            bundle = remainder_bundle(F, fam, w, batch, cfg.lambda_star)
            locs = build_localizers(values, bundle.g_delta, bundle.abar,
                                    bundle.lam, bundle.q1, bundle.q2, y=y,
                                    r=cfg.radius, delta=delta,
                                    lambda_star=cfg.lambda_star,
                                    gamma=cfg.gamma, drivers=batch.drivers)
            from .ibp import functional_jets, localizer_jets
            jets = functional_jets(F, w, batch, order=3)
            loc = localizer_jets(locs, jets, values, fam, batch, w)
            h = ibp_weight(F, w, batch, loc=loc)
            est = localized_norm(h[:, 0], locs.u_delta, p=1)
            rows.append((delta, est.mean))
            out.append([delta, f"{est.mean:.10g}", f"{est.se:.4g}",
                        f"{float(locs.u_delta.mean()):.6g}"])
    except DegenerateCovariance as exc:
        print(f"degenerate covariance on localized paths: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    slope = weight_norm_scaling([r for r in rows if r[1] > 0])
    theta = 4 * model.dim + 2
    _write_csv(os.path.join(cfg.out_dir, "weights.csv"),
               ["delta", "weight_norm", "se", "localized_mass"], out)
    _write_manifest(cfg, "weights", {"slope": slope, "bound_slope": -theta - 1})
    print(f"weight-norm slope {slope} (blow-up bound {-theta - 1})")
    return EXIT_PASS if not (slope < -theta - 1) else EXIT_FAIL


def _cmd_density(cfg: RunConfig) -> int:
    try:
        rep = example_experiment(
            y=np.asarray(cfg.center[:2]), r=cfg.radius, deltas=cfg.deltas,
            lambda_star=cfg.lambda_star, gamma=cfg.gamma, m=cfg.m,
            t_end=cfg.t_end, n_paths=min(cfg.n_paths, 2048),
            n_paths_density=cfg.n_paths, n_inner=cfg.n_inner, seed=cfg.seed)
    except ExperimentAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    dens = rep["density"]
    out = [[*map(lambda x: f"{x:.6g}", pt), f"{ibp:.8g}", f"{se:.4g}",
            f"{kde:.8g}", f"{kse:.4g}"]
           for pt, ibp, se, kde, kse in zip(dens.points, dens.ibp, dens.ibp_se,
                                            dens.kde, dens.kde_se)]
    n = dens.points.shape[1]
    _write_csv(os.path.join(cfg.out_dir, "density.csv"),
               [f"x{i}" for i in range(n)] + ["ibp", "ibp_se", "kde", "kde_se"],
               out)
    comp = rep["comparison"]
    _write_manifest(cfg, "density", {
        "lambda_gate": rep["lambda_gate"], "sup_rel": comp["sup_rel"],
        "passed": comp["pass"], "tail_slope": rep["tail"]["slope"],
        "bandwidth": list(dens.bandwidth)})
    print(f"lambda gate {rep['lambda_gate']:.4f}; "
          f"sup relative discrepancy {comp['sup_rel']:.4f}")
    return EXIT_PASS if comp["pass"] else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wienerloc")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in ("verify", "density", "nondegen", "weights", "laplace"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--paths", type=float, default=None)
        p.add_argument("--inner", type=int, default=None)
        p.add_argument("--m", type=int, default=None)
        p.add_argument("--model", type=str, default=None)
        p.add_argument("--delta", type=float, default=None)
        p.add_argument("--delta-list", type=str, default=None,
                       help="comma-separated window widths")
        p.add_argument("--lambda", dest="lambdas", type=str, default=None,
                       help="comma-separated Laplace parameters")
        p.add_argument("--lambda-star", type=float, default=None)
        p.add_argument("--gamma", type=float, default=None)
        p.add_argument("--radius", type=float, default=None)
        p.add_argument("--center", type=str, default=None,
                       help="comma-separated target point")
        p.add_argument("--out", type=str, default=None)
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = RunConfig.from_json(fh.read())
    else:
        cfg = RunConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.paths is not None:
        updates["n_paths"] = int(args.paths)
    if args.inner is not None:
        updates["n_inner"] = args.inner
    if args.m is not None:
        updates["m"] = args.m
    if args.model is not None:
        updates["model"] = args.model
    if args.delta is not None:
        updates["delta"] = args.delta
    if args.delta_list is not None:
        updates["delta_list"] = tuple(float(x) for x in args.delta_list.split(","))
    if args.lambdas is not None:
        updates["lambdas"] = tuple(float(x) for x in args.lambdas.split(","))
    if args.lambda_star is not None:
        updates["lambda_star"] = args.lambda_star
    if args.gamma is not None:
        updates["gamma"] = args.gamma
    if args.radius is not None:
        updates["radius"] = args.radius
    if args.center is not None:
        updates["center"] = tuple(float(x) for x in args.center.split(","))
    if args.out is not None:
        updates["out_dir"] = args.out
    return cfg.replace(**updates) if updates else cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    # MC_WORKERS is accepted for scheduler sizing only; results are chunked
    # deterministically and never depend on it.
    os.environ.get("MC_WORKERS")
    try:
        cfg = _resolve_config(args)
    except (InvalidArgument, OSError, ValueError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handler = {"verify": _cmd_verify, "density": _cmd_density,
               "nondegen": _cmd_nondegen, "weights": _cmd_weights,
               "laplace": _cmd_laplace}[args.subcommand]
    try:
        return handler(cfg)
    except InvalidArgument as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateCovariance as exc:
        print(f"numerical degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
