"""Command-line entry point: ``evppi simulate | compute | diagnose``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import psa
from .engine import EngineConfig, evppi_spde
from .errors import EvppiError, NumericError, ValidationError
from .estimate import EvppiEstimate, read_report
from .gp import GpConfig, evppi_gp
from .inla import GridConfig
from .mesh import MeshConfig
from .oracles import (
    GaussianModelSpec,
    InfluenzaConfig,
    evppi_nested_mc,
    evppi_single_loop,
    model_evpi,
    savi_like_spec,
    simulate_gaussian_model,
    simulate_influenza,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
DEFAULT_WTP = 20000.0
METHODS = ("spde", "gp", "mc-nested", "mc-single")


def _csv_list(text: str | None) -> list[str] | None:
    if text is None:
        return None
    items = [t.strip() for t in text.split(",") if t.strip()]
    return items or None


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evppi", description="EVPI and EVPPI from probabilistic sensitivity analysis samples")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw a synthetic PSA dataset")
    sim.add_argument("model", choices=("influenza", "gaussian"))
    sim.add_argument("--n", type=int, default=1000, help="number of PSA rows")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="CSV path; the model spec goes to <out>.json")
    sim.add_argument("--params", type=int, default=19, help="gaussian: number of parameters")
    sim.add_argument("--treatments", type=int, default=3, help="gaussian: number of treatments")
    sim.add_argument("--quadratic", action="store_true", help="gaussian: add quadratic net-benefit terms")
    sim.add_argument("--oracle-n", type=int, default=200_000,
                     help="gaussian: draws for the EVPI recorded in the spec file")

    cmp_ = sub.add_parser("compute", help="estimate EVPPI (or EVPI with no --poi)")
    cmp_.add_argument("input", help="PSA CSV (spde, gp) or model-spec JSON (mc-nested, mc-single)")
    cmp_.add_argument("--method", choices=METHODS, default="spde")
    cmp_.add_argument("--poi", help="comma-separated focal parameter names or 0-based indices; default all")
    cmp_.add_argument("--wtp", type=float, default=DEFAULT_WTP, help="willingness to pay k")
    cmp_.add_argument("--seed", type=int, default=0)
    cmp_.add_argument("--threads", type=int, default=1)
    cmp_.add_argument("--out", default="report.json")
    g = cmp_.add_argument_group("CSV schema (defaults follow the column-name convention)")
    g.add_argument("--param-cols")
    g.add_argument("--effect-cols")
    g.add_argument("--cost-cols")
    g.add_argument("--nb-cols")
    g = cmp_.add_argument_group("spde overrides")
    g.add_argument("--interaction-order", type=int, default=1, choices=(1, 2, 3))
    g.add_argument("--d-max", type=int, default=4)
    g.add_argument("--h-max", type=int, default=4)
    g.add_argument("--max-vertices", type=int, default=MeshConfig.max_vertices)
    g.add_argument("--inner-edge", type=float, help="maximum inner mesh edge (standardized units)")
    g.add_argument("--outer-edge", type=float, help="maximum outer mesh edge (standardized units)")
    g.add_argument("--min-angle", type=float, default=MeshConfig.min_angle)
    g.add_argument("--grid-step", type=float, default=GridConfig.step)
    g.add_argument("--grid-threshold", type=float, default=GridConfig.threshold)
    g.add_argument("--alpha", type=float, default=0.01, help="significance level of the residual checks")
    g = cmp_.add_argument_group("gp overrides")
    g.add_argument("--n-hyp", type=int, help="rows used for hyperparameter search (default min(500, S))")
    g.add_argument("--gp-maxiter", type=int, default=500)
    g = cmp_.add_argument_group("Monte Carlo")
    g.add_argument("--n-draws", type=int, default=100_000, help="mc-single: focal draws")
    g.add_argument("--s-phi", type=int, default=1000, help="mc-nested: outer draws")
    g.add_argument("--s-psi", type=int, default=1000, help="mc-nested: inner draws per outer draw")

    dia = sub.add_parser("diagnose", help="write plot data for a regression report")
    dia.add_argument("report")
    dia.add_argument("--out", default=".", help="output directory")
    return ap


def _is_spec(path: Path) -> bool:
    if path.suffix.lower() == ".json":
        return True
    try:
        with open(path) as fh:
            return fh.read(64).lstrip().startswith("{")
    except OSError:
        return False


def _mc_estimate(args, spec: GaussianModelSpec) -> EvppiEstimate:
    names = spec.param_names or tuple(f"theta{i + 1}" for i in range(spec.P))
    labels = _csv_list(args.poi)
    subset = psa.SubsetSpec.from_labels(labels, names) if labels else psa.SubsetSpec.all(spec.P)
    t0 = time.perf_counter()
    if args.method == "mc-single":
        res = evppi_single_loop(spec, subset, args.n_draws, args.seed)
        evpi = model_evpi(spec, args.n_draws, args.seed + 1, n_boot=0).value
        cfg = {"n_draws": args.n_draws}
    else:
        res = evppi_nested_mc(spec, subset, args.s_phi, args.s_psi, args.seed)
        evpi = model_evpi(spec, min(args.s_phi * args.s_psi, 10**6), args.seed + 1, n_boot=0).value
        cfg = {"s_phi": args.s_phi, "s_psi": args.s_psi}
    return EvppiEstimate(value=res.value, method=args.method, evpi=evpi, wtp=None,
                         subset=[names[i] for i in subset.focal], seed=args.seed,
                         timing_s=time.perf_counter() - t0, warnings=list(res.warnings),
                         config=cfg, extra={"monte_carlo": {"se": res.se, "n": res.n}})


def _regression_estimate(args, path: Path) -> EvppiEstimate:
    schema = psa.PsaSchema(_csv_list(args.param_cols), _csv_list(args.effect_cols),
                           _csv_list(args.cost_cols), _csv_list(args.nb_cols))
    ds = psa.load_psa(path, schema)
    labels = _csv_list(args.poi)
    subset = psa.SubsetSpec.from_labels(labels, ds.param_names) if labels else psa.SubsetSpec.all(ds.P)
    if args.method == "gp":
        cfg = GpConfig(n_hyp=args.n_hyp, maxiter=args.gp_maxiter, seed=args.seed, alpha=args.alpha,
                       threads=args.threads)
        return evppi_gp(ds, subset, args.wtp, cfg)
    mesh = MeshConfig(min_angle=args.min_angle, inner_max_edge=args.inner_edge,
                      outer_max_edge=args.outer_edge, max_vertices=args.max_vertices)
    grid = dataclasses.replace(GridConfig(), step=args.grid_step, threshold=args.grid_threshold)
    cfg = EngineConfig(interaction_order=args.interaction_order, d_max=args.d_max, h_max=args.h_max,
                       mesh=mesh, grid=grid, alpha=args.alpha, threads=args.threads)
    return evppi_spde(ds, subset, args.wtp, cfg, seed=args.seed)


def cmd_compute(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise ValidationError(f"input {path} does not exist", stage="input")
    if args.method.startswith("mc-"):
        if not _is_spec(path):
            raise ValidationError(f"--method {args.method} needs a model-spec JSON file (as written by "
                                  "'evppi simulate gaussian'), not a PSA CSV", stage="input")
        try:
            spec = GaussianModelSpec.load(path)
        except (KeyError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path} is not a Gaussian model spec: {exc}", stage="input") from None
        est = _mc_estimate(args, spec)
    else:
        if _is_spec(path):
            raise ValidationError(f"--method {args.method} needs a PSA CSV, got a JSON file", stage="input")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est = _regression_estimate(args, path)
    est.write(args.out)
    kind = "evppi" if _csv_list(args.poi) else "evpi"
    print(f"{kind}={est.value:.6g} method={est.method} seconds={est.timing_s:.2f} report={args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.n < 2:
        raise ValidationError(f"--n must be at least 2, got {args.n}", stage="simulate")
    out = Path(args.out)
    side = out.with_suffix(".json") if out.suffix.lower() != ".json" else out.with_suffix(".spec.json")
    if args.model == "influenza":
        cfg = InfluenzaConfig(seed=args.seed)
        ds = simulate_influenza(cfg, args.n)
        ds.to_csv(out)
        side.write_text(json.dumps({**cfg.to_dict(), "n": args.n}, indent=2))
    else:
        spec = savi_like_spec(args.seed, n_params=args.params, n_treatments=args.treatments,
                              quadratic=args.quadratic)
        ds = simulate_gaussian_model(spec, args.n, args.seed)
        ds.to_csv(out)
        oracle = model_evpi(spec, args.oracle_n, args.seed + 1)
        spec.save(side, n=args.n, oracle={"evpi": oracle.value, "se": oracle.se, "n": oracle.n,
                                          "seed": args.seed + 1})
    print(f"wrote {args.n} rows to {out} and the model spec to {side}")
    return EXIT_OK


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_diagnose(args) -> int:
    rep = read_report(args.report)
    if "surfaces" not in rep or "diagnostics" not in rep:
        raise ValidationError(f"report from method {rep.get('method')!r} has no fitted surfaces to diagnose",
                              stage="diagnose")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fitted = np.asarray(rep["surfaces"]["fitted"], dtype=float)
    observed = np.asarray(rep["surfaces"]["observed"], dtype=float)
    rows = []
    for t in range(1, fitted.shape[1]):
        r = observed[:, t] - fitted[:, t]
        sd = r.std(ddof=1)
        std_r = (r - r.mean()) / sd if sd > 0 else np.zeros_like(r)
        rows += [[t, i, repr(f), repr(o), repr(e), repr(s)]
                 for i, (f, o, e, s) in enumerate(zip(fitted[:, t], observed[:, t], r, std_r))]
    written = [out / "residuals.csv"]
    _write_csv(written[0], ["treatment", "row", "fitted", "observed", "residual", "std_residual"], rows)

    plots = rep.get("plot_data") or {}
    if plots:
        rows = []
        for t, pd in sorted(plots.items(), key=lambda kv: int(kv[0])):
            rows += [[t, "point", i, repr(x), repr(y), "", "", ""] for i, (x, y) in enumerate(pd["projection"])]
            rows += [[t, "vertex", i, repr(x), repr(y), "", "", ""] for i, (x, y) in enumerate(pd["mesh_vertices"])]
            rows += [[t, "triangle", i, "", "", a, b, c] for i, (a, b, c) in enumerate(pd["mesh_triangles"])]
        written.append(out / "projection_mesh.csv")
        _write_csv(written[-1], ["treatment", "kind", "index", "x", "y", "v1", "v2", "v3"], rows)
    grid = rep.get("grid")
    if grid:
        rows = []
        for g in grid["treatments"]:
            rows += [[g["treatment"], *map(repr, pt), repr(ld), repr(w)]
                     for pt, ld, w in zip(g["points"], g["log_density"], g["weights"])]
        written.append(out / "grid.csv")
        _write_csv(written[-1], ["treatment", "log_kappa", "log_tau", "log_prec", "log_density", "weight"], rows)
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"simulate": cmd_simulate, "compute": cmd_compute, "diagnose": cmd_diagnose}[args.command]
    try:
        return handler(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as exc:
        ctx = f" {exc.context}" if exc.context else ""
        print(f"numeric failure: {exc}{ctx}", file=sys.stderr)
        return EXIT_NUMERIC
    except EvppiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
