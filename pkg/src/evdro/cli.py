"""Command-line entry point: ``evdro <command> [--flags]``.

Commands: ingest, fit, uncertainty, solve, simulate, compare, pipeline.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver failure.

Solver tolerance precedence: ``--solver-tol`` flag, then the ``DRO_SOLVER_TOL``
environment variable, then ``solver_tol`` in the config file, then the default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from . import __version__
from . import artifacts as art
from .ambiguity import AmbiguitySet, BootstrapConfig, bootstrap_thresholds, build_set
from .conic import DEFAULT_TOL
from .dro import Mode, solve_with_retries
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DimensionError,
    InfeasibleProblemError,
    NonStationaryError,
    SolverError,
)
from .forecasting import ArimaModel, SeriesPanel, fit_panel, forecast_path, rolling_residuals
from .plotting import render_report
from .sim import (
    DEMAND_FLOOR,
    FORECAST_ORDERS,
    METRICS_HEADER,
    Forecaster,
    Scenario,
    compare,
    derive_seed,
    generate_city,
    history_panels,
    planning_instance,
    ridged_covariance,
    supply_bootstrap,
)

log = logging.getLogger("evdro")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4
SUMMARY_HEADER = ("policy", "metric", "mean", "baseline", "mean_diff", "rel_change", "wins", "losses", "sign_p")
TIMINGS_HEADER = ("step", "policy", "seed", "solve_ms")
MODES = {"robust": Mode.ROBUST, "nonrobust": Mode.NONROBUST, "full": Mode.FULL}


class StageError(Exception):
    def __init__(self, stage, completed, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.completed = completed
        self.cause = cause


def _solver_tol(flag=None, config_value=None):
    if flag is not None:
        return flag
    env = os.environ.get("DRO_SOLVER_TOL")
    if env:
        try:
            return float(env)
        except ValueError as exc:
            raise ConfigError(f"DRO_SOLVER_TOL={env!r} is not a number") from exc
    return config_value if config_value is not None else DEFAULT_TOL


def _residual_header(N, tau):
    return ("row",) + tuple(f"k{k + 1}_region_{i}" for k in range(tau) for i in range(N))


def _parse_time(s, what):
    try:
        return datetime.fromisoformat(s)
    except ValueError as exc:
        raise ConfigError(f"{what}: cannot parse {s!r} as ISO-8601") from exc


# -- ingest ------------------------------------------------------------------

def cmd_ingest(args):
    region_map = art.read_region_map(args.region_map)
    ids = sorted(region_map, key=region_map.get)
    N = len(ids)
    parsed = {kind: art.read_events(path, region_map) for kind, path in
              (("demand", args.trips), ("supply", args.charging))}
    all_times = [t for times, _, _ in parsed.values() for t in times]
    if args.start:
        start = _parse_time(args.start, "--start")
    elif all_times:
        # first event floored onto the step grid anchored at its midnight
        first = min(all_times)
        midnight = first.replace(hour=0, minute=0, second=0, microsecond=0)
        width = timedelta(minutes=args.step_minutes)
        start = midnight + ((first - midnight) // width) * width
    else:
        raise DataError("both event files are empty; pass --start and --steps to build zero panels")
    if args.steps:
        steps = args.steps
    elif all_times:
        width = args.step_minutes * 60.0
        steps = int((max(all_times) - start).total_seconds() // width) + 1
    else:
        raise DataError("both event files are empty; pass --steps")
    chash = art.config_hash({"command": "ingest", "start": start.isoformat(), "steps": steps,
                             "step_minutes": args.step_minutes, "regions": ids,
                             "trips": art.file_sha256(args.trips), "charging": art.file_sha256(args.charging)})
    out = Path(args.out)
    for kind, (times, regions, counts) in parsed.items():
        if not times:
            log.warning("%s event file is empty; writing an all-zero panel", kind)
        values, filled = art.aggregate_events(times, regions, counts, N, start, steps, args.step_minutes)
        panel = SeriesPanel(values, args.step_minutes, kind)
        path = art.write_panel(out / f"{kind}.csv", panel, start, filled, chash)
        print(f"{kind}: {steps} steps x {N} regions, total {values.sum():g}, "
              f"gap-filled steps {int(filled.sum())}, per-region mean {np.round(values.mean(axis=0), 3).tolist()}"
              f" -> {path}")
    return EXIT_OK


# -- fit / uncertainty -------------------------------------------------------

def _orders(name):
    if name == "default":
        return FORECAST_ORDERS
    if name == "full":
        from .forecasting import DEFAULT_ORDERS
        return DEFAULT_ORDERS
    raise ConfigError(f"--orders must be 'default' or 'full', got {name!r}")


def fit_stage(panels, tau, orders, out, chash):
    """Fit per-region models and write models.json plus rolling residual CSVs."""
    models, residuals, written = {}, {}, {}
    for panel in panels:
        models[panel.kind] = fit_panel(panel, orders)
        res = rolling_residuals(models[panel.kind], panel, tau)
        residuals[panel.kind] = res
        written[f"residuals_{panel.kind}"] = art.write_csv(
            out / f"residuals_{panel.kind}.csv", _residual_header(panel.N, tau),
            ((m, *row) for m, row in enumerate(res.deltas)), chash)
    written["models"] = art.write_json(out / "models.json", {
        "tau": tau, "orders": [list(o) for o in orders],
        **{k: [m.to_dict() for m in v] for k, v in models.items()}}, chash)
    return models, residuals, written


def cmd_fit(args):
    pr, start, _, h1 = art.read_panel(args.demand, "demand")
    pc, _, _, h2 = art.read_panel(args.supply, "supply")
    if pr.N != pc.N or pr.T != pc.T:
        raise DataError("demand and supply panels differ in shape")
    chash = h1 if h1 == h2 and h1 else art.config_hash({"command": "fit", "demand": art.file_sha256(args.demand),
                                                        "supply": art.file_sha256(args.supply)})
    out = Path(args.out)
    models, residuals, written = fit_stage((pr, pc), args.tau, _orders(args.orders), out, chash)
    art.write_json(out / "panels.json", {"demand": str(Path(args.demand).resolve()),
                                         "supply": str(Path(args.supply).resolve())}, chash)
    for kind, ms in models.items():
        print(f"{kind}: orders {[m.order for m in ms]}, {residuals[kind].M} residual rows")
    print(f"wrote {', '.join(str(p) for p in written.values())}")
    return EXIT_OK


def _load_models(run_dir):
    d = art.read_json(Path(run_dir) / "models.json")
    return d, {k: [ArimaModel.from_dict(m) for m in d[k]] for k in ("demand", "supply")}


def _read_residuals(path):
    _, _, rows = art.read_csv(path)
    return np.array([[float(x) for x in r[1:]] for r in rows])


def sets_stage(models, panels, residuals, tau, boot: BootstrapConfig | None):
    """Ambiguity sets centered at the forecasts following the panels."""
    out = {}
    for kind, cfg in (("demand", boot), ("supply", supply_bootstrap(boot) if boot else None)):
        Sigma = ridged_covariance(residuals[kind])
        center = forecast_path(models[kind], panels[kind], tau)
        if kind == "demand":
            center = np.maximum(center, DEMAND_FLOOR)
        g1, g2 = bootstrap_thresholds(residuals[kind], cfg) if cfg else (0.0, 1.0)
        rows = getattr(residuals[kind], "deltas", residuals[kind])
        out[kind] = build_set(center, Sigma, g1, g2, cfg.alpha if cfg else 0.25,
                              {"M": len(rows), "NB": cfg.NB if cfg else 0, "seed": cfg.seed if cfg else None})
    return out


def cmd_uncertainty(args):
    run = Path(args.run_dir)
    meta, models = _load_models(run)
    chash = meta.get("config_hash")
    paths = art.read_json(run / "panels.json")
    panels = {k: art.read_panel(paths[k], k)[0] for k in ("demand", "supply")}
    residuals = {k: _read_residuals(run / f"residuals_{k}.csv") for k in ("demand", "supply")}
    boot = BootstrapConfig(args.nb, args.alpha, derive_seed("bootstrap", args.seed) % (2 ** 32))
    sets = sets_stage(models, panels, residuals, meta["tau"], boot)
    path = art.write_json(run / "sets.json", {k: v.to_dict() for k, v in sets.items()}, chash)
    for k, s in sets.items():
        print(f"{k}: gamma1={s.gamma1:.6g} gamma2={s.gamma2:.6g} M={s.metadata['M']}")
    print(f"wrote {path}")
    return EXIT_OK


# -- solve -------------------------------------------------------------------

def cmd_solve(args):
    if args.instance:
        inst = art.instance_from_dict(art.read_json(args.instance))
    elif args.scenario and args.sets:
        scn = Scenario.from_dict(art.read_json(args.scenario))
        sets = art.read_json(args.sets)
        dset, sset = (AmbiguitySet.from_dict(sets[k]) for k in ("demand", "supply"))
        inst = planning_instance(scn, scn.initial, scn.history_steps, dset, sset)
    else:
        raise ConfigError("solve needs --instance, or --scenario together with --sets")
    inst = inst.with_mode(MODES[args.mode])
    tol = _solver_tol(args.solver_tol)
    res = solve_with_retries(inst, backend=args.backend, tol=tol)
    out = Path(args.out)
    payload = {"status": res.result.status, "objective": res.result.objective, "retries": res.retries,
               "backend": args.backend, "tol": tol, "mode": inst.mode.value,
               "plan": None if res.plan is None else res.plan.to_dict(),
               "bounds": res.bounds.to_dict()}
    art.write_json(out, payload, art.config_hash(art.instance_to_dict(inst)))
    if res.plan is None:
        print(f"solver status {res.result.status} after {res.retries} retries; details in {out}", file=sys.stderr)
        return EXIT_SOLVER
    parts = res.plan.objective_parts
    print(f"{inst.mode.value}: objective {res.result.objective:.6g} (J_D {parts['jd']:.6g}), "
          f"retries {res.retries} -> {out}")
    return EXIT_OK


# -- simulate / compare ------------------------------------------------------

def _write_metrics(out, report, chash, timing):
    written = {
        "metrics": art.write_csv(out / "metrics.csv", METRICS_HEADER, report.metric_rows(timing), chash),
        "timings": art.write_csv(out / "timings.csv", TIMINGS_HEADER,
                                 ((r[0], r[1], r[2], r[6]) for r in report.metric_rows(True)), chash),
    }
    episodes = {f"{p}/{s}": {"aborted": e.aborted, "held_steps": e.held_steps, "retries": e.retry_count,
                             "stream_sha256": e.stream_digest, "notes": e.notes, **e.totals()}
                for (p, s), e in report.episodes.items()}
    written["episodes"] = art.write_json(out / "episodes.json", {"episodes": episodes}, chash)
    return written


def simulate_stage(scn, cfg: art.RunConfig, forecaster, tol, out, chash, timing=False):
    report = compare(scn, cfg.policies, seeds=cfg.n_seeds, backend=cfg.backend, steps=cfg.steps,
                     forecaster=forecaster, workers=cfg.workers, tol=tol)
    return report, _write_metrics(out, report, chash, timing)


def _scenario_for(cfg: art.RunConfig):
    c = cfg.city
    return generate_city(cfg.seed, N=c.N, station_fraction=c.station_fraction, grid_extent=c.grid_extent,
                         tau=c.tau, K=c.K, history_days=c.history_days, demand_cv=c.demand_cv,
                         supply_cv=c.supply_cv, shift=c.shift, theta=c.theta, beta=c.beta, a=c.a)


def _bootstrap_for(cfg: art.RunConfig):
    return BootstrapConfig(cfg.NB, cfg.alpha, derive_seed("bootstrap", cfg.seed) % (2 ** 32))


def _forecaster(models, panels, residuals, sets, tau):
    Sr = ridged_covariance(residuals["demand"])
    Sc = ridged_covariance(residuals["supply"])
    fc = Forecaster(models["demand"], models["supply"], panels["demand"].values, panels["supply"].values,
                    Sr, Sc, M=residuals["demand"].M)
    if sets:
        fc.gammas_r = (sets["demand"].gamma1, sets["demand"].gamma2)
        fc.gammas_c = (sets["supply"].gamma1, sets["supply"].gamma2)
    return fc


def cmd_simulate(args):
    cfg = _effective_config(args)
    chash = cfg.hash()
    out = Path(args.out)
    scn = Scenario.from_dict(art.read_json(args.scenario)) if args.scenario else _scenario_for(cfg)
    art.write_json(out / "scenario.json", scn.to_dict(), chash)
    pr, pc = history_panels(scn)
    models = {"demand": fit_panel(pr, FORECAST_ORDERS), "supply": fit_panel(pc, FORECAST_ORDERS)}
    residuals = {p.kind: rolling_residuals(models[p.kind], p, scn.config.tau) for p in (pr, pc)}
    panels = {"demand": pr, "supply": pc}
    sets = sets_stage(models, panels, residuals, scn.config.tau, _bootstrap_for(cfg)) \
        if "Robust" in cfg.policies else None
    fc = _forecaster(models, panels, residuals, sets, scn.config.tau)
    report, written = simulate_stage(scn, cfg, fc, _solver_tol(args.solver_tol, cfg.solver_tol), out, chash,
                                     args.timing)
    _print_summary(report.summary(_baseline(cfg.policies)))
    print(f"wrote {', '.join(str(p) for p in written.values())}")
    return EXIT_OK


def _baseline(policies):
    return "NonRobust" if "NonRobust" in policies else policies[-1]


def _print_summary(rows):
    for r in rows:
        print(f"{r['policy']:>9} {r['metric']:<12} mean {r['mean']:.6g}  vs {r['baseline']}: "
              f"{100 * r['rel_change']:+.2f}%  wins {r['wins']} losses {r['losses']}  sign-test p {r['sign_p']:.3g}")


def compare_stage(run_dir, baseline=None, step_minutes=30.0, expected_hash=None):
    """Summary CSV and figures from the metrics CSVs of a run directory."""
    from .sim import sign_test

    run_dir = Path(run_dir)
    metric_files = sorted(run_dir.glob("metrics*.csv"))
    if not metric_files:
        raise DataError(f"no metrics*.csv in {run_dir}")
    chash = art.check_hashes(metric_files, expected_hash)
    rows = []
    for f in metric_files:
        _, header, body = art.read_csv(f)
        if header != METRICS_HEADER:
            raise DataError(f"{f}: header {','.join(header)} does not match {','.join(METRICS_HEADER)}")
        rows += body
    policies = list(dict.fromkeys(r[1] for r in rows))
    baseline = baseline or _baseline(policies)
    if baseline not in policies:
        raise ConfigError(f"baseline {baseline!r} not among policies {policies}")
    totals = {}
    for step, policy, seed, jd, ur, uu, *_ in rows:
        t = totals.setdefault(policy, {}).setdefault(int(seed), np.zeros(3))
        t += (float(jd), float(ur), float(uu))
    seeds = sorted(totals[baseline])
    summary = []
    for p in policies:
        if sorted(totals[p]) != seeds:
            raise DataError(f"policy {p} was run on different seeds than {baseline}")
        vals = np.array([totals[p][s] for s in seeds])
        base = np.array([totals[baseline][s] for s in seeds])
        for j, metric in enumerate(("jd", "unfair_ratio", "unfair_util")):
            d = vals[:, j] - base[:, j]
            summary.append({"policy": p, "metric": metric, "mean": float(vals[:, j].mean()), "baseline": baseline,
                            "mean_diff": float(d.mean()),
                            "rel_change": float(d.mean() / base[:, j].mean()) if base[:, j].mean() else 0.0,
                            "wins": int((d < 0).sum()), "losses": int((d > 0).sum()), "sign_p": sign_test(d)})
    written = {"summary": art.write_csv(run_dir / "summary.csv", SUMMARY_HEADER,
                                        ([r[k] for k in SUMMARY_HEADER] for r in summary), chash)}
    for p in render_report(rows, run_dir, baseline, step_minutes):
        written[p.stem] = p
    return summary, written


def cmd_compare(args):
    summary, written = compare_stage(args.run_dir, args.baseline)
    _print_summary(summary)
    print(f"wrote {', '.join(str(p) for p in written.values())}")
    return EXIT_OK


# -- pipeline ----------------------------------------------------------------

def run_pipeline(cfg: art.RunConfig, out, tol=None, timing=False):
    """fit -> residuals -> bootstrap -> sets -> simulate -> compare, with a manifest at the end."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    tol = _solver_tol(tol, cfg.solver_tol)
    written, stages = {}, []
    state = {}

    def stage(name, fn):
        try:
            result = fn()
        except Exception as exc:
            raise StageError(name, [str(p) for p in written.values()], exc) from exc
        stages.append(name)
        log.info("stage %s done", name)
        return result

    def scenario():
        scn = _scenario_for(cfg)
        written["scenario"] = art.write_json(out / "scenario.json", scn.to_dict(), chash)
        pr, pc = history_panels(scn)
        start = datetime(2000, 1, 1) - timedelta(minutes=scn.config.step_minutes * scn.history_steps)
        written["history_demand"] = art.write_panel(out / "history_demand.csv", pr, start, chash=chash)
        written["history_supply"] = art.write_panel(out / "history_supply.csv", pc, start, chash=chash)
        state.update(scn=scn, panels={"demand": pr, "supply": pc})

    def fit():
        scn = state["scn"]
        models, residuals, files = fit_stage(tuple(state["panels"].values()), scn.config.tau, FORECAST_ORDERS,
                                             out, chash)
        written.update(files)
        state.update(models=models, residuals=residuals)

    def ambiguity():
        scn = state["scn"]
        sets = sets_stage(state["models"], state["panels"], state["residuals"], scn.config.tau, _bootstrap_for(cfg))
        written["sets"] = art.write_json(out / "sets.json", {k: v.to_dict() for k, v in sets.items()}, chash)
        inst = planning_instance(scn, scn.initial, scn.history_steps, sets["demand"], sets["supply"])
        written["instance"] = art.write_json(out / "instance.json", art.instance_to_dict(inst), chash)
        state["sets"] = sets

    def simulate():
        scn = state["scn"]
        fc = _forecaster(state["models"], state["panels"], state["residuals"], state.get("sets"), scn.config.tau)
        report, files = simulate_stage(scn, cfg, fc, tol, out, chash, timing)
        written.update(files)
        state["report"] = report

    def report():
        summary, files = compare_stage(out, step_minutes=state["scn"].config.step_minutes, expected_hash=chash)
        written.update(files)
        state["summary"] = summary

    stage("scenario", scenario)
    stage("fit", fit)  # fit and rolling residuals
    if cfg.mode == "full":
        stage("ambiguity", ambiguity)  # bootstrap thresholds and sets
    else:
        log.info("nonrobust-only: skipping the ambiguity stage")
    stage("simulate", simulate)
    stage("compare", report)
    manifest = art.build_manifest(cfg, range(cfg.n_seeds), written, stages)
    manifest["solver_tol"] = tol
    art.write_json(out / "manifest.json", manifest)
    return state["summary"], written


def cmd_pipeline(args):
    if args.manifest:
        cfg, _ = art.load_manifest(args.manifest)
        if _has_overrides(args):
            raise ConfigError("--manifest reruns exactly; drop the other configuration flags")
    else:
        cfg = _effective_config(args)
    summary, written = run_pipeline(cfg, args.out, args.solver_tol, args.timing)
    _print_summary(summary)
    print(f"manifest: {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


# -- argument handling -------------------------------------------------------

CONFIG_FLAGS = ("seed", "n_seeds", "steps", "policies", "backend", "mode", "nb", "alpha", "workers", "regions",
                "tau", "history_days")


def _has_overrides(args):
    return any(getattr(args, f, None) is not None for f in CONFIG_FLAGS)


def _effective_config(args) -> art.RunConfig:
    """Config file values, overridden by any CLI flag that was given."""
    base = art.load_config(args.config).to_dict() if getattr(args, "config", None) else art.RunConfig().to_dict()
    flat = {"seed": "seed", "n_seeds": "n_seeds", "steps": "steps", "backend": "backend", "mode": "mode",
            "nb": "NB", "alpha": "alpha", "workers": "workers"}
    for flag, key in flat.items():
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    if getattr(args, "policies", None):
        base["policies"] = [p.strip() for p in args.policies.split(",") if p.strip()]
    for flag, key in (("regions", "N"), ("tau", "tau"), ("history_days", "history_days")):
        v = getattr(args, flag, None)
        if v is not None:
            base["city"][key] = v
    base.pop("schema", None)
    return art.RunConfig.from_dict(base)


def _add_run_flags(p):
    p.add_argument("--config", help="JSON run configuration (flags override its values)")
    p.add_argument("--seed", type=int, help="single source of randomness for every stage")
    p.add_argument("--n-seeds", dest="n_seeds", type=int, help="paired episode seeds")
    p.add_argument("--steps", type=int, help="episode length (default K - tau)")
    p.add_argument("--policies", help="comma list from robust,nonrobust,noop")
    p.add_argument("--backend", choices=("clarabel", "cvxopt"))
    p.add_argument("--mode", choices=("full", "nonrobust-only"))
    p.add_argument("--nb", type=int, help="bootstrap resamples")
    p.add_argument("--alpha", type=float, help="bootstrap significance level")
    p.add_argument("--workers", type=int, help="parallel episode processes")
    p.add_argument("--regions", type=int, help="number of regions in the synthetic city")
    p.add_argument("--tau", type=int, help="planning horizon")
    p.add_argument("--history-days", dest="history_days", type=int, help="training history length")
    p.add_argument("--solver-tol", dest="solver_tol", type=float)
    p.add_argument("--timing", action="store_true", help="write wall-clock solve_ms into metrics.csv")
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="evdro", description=__doc__.split("\n")[0], allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"evdro {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="aggregate event CSVs into demand/supply panels", allow_abbrev=False)
    p.add_argument("--trips", required=True, help="CSV time,region[,count] of ride requests")
    p.add_argument("--charging", required=True, help="CSV time,region[,count] of charging completions")
    p.add_argument("--region-map", dest="region_map", required=True, help="CSV region_id,index")
    p.add_argument("--start", help="ISO-8601 start of the first step (default: first event, floored)")
    p.add_argument("--steps", type=int, help="number of steps (default: through the last event)")
    p.add_argument("--step-minutes", dest="step_minutes", type=float, default=30.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="fit per-region forecasters and rolling residuals", allow_abbrev=False)
    p.add_argument("--demand", required=True)
    p.add_argument("--supply", required=True)
    p.add_argument("--tau", type=int, default=2)
    p.add_argument("--orders", default="default", help="'default' (8 orders) or 'full' (18 orders)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("uncertainty", help="bootstrap thresholds and ambiguity sets", allow_abbrev=False)
    p.add_argument("--run-dir", dest="run_dir", required=True, help="directory written by 'fit'")
    p.add_argument("--nb", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("solve", help="solve one planning program", allow_abbrev=False)
    p.add_argument("--instance", help="instance JSON")
    p.add_argument("--scenario", help="scenario JSON (with --sets)")
    p.add_argument("--sets", help="sets JSON written by 'uncertainty' or 'pipeline'")
    p.add_argument("--mode", choices=sorted(MODES), default="robust")
    p.add_argument("--backend", choices=("clarabel", "cvxopt"), default="clarabel")
    p.add_argument("--solver-tol", dest="solver_tol", type=float)
    p.add_argument("--out", required=True, help="plan JSON path")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="paired receding-horizon episodes", allow_abbrev=False)
    p.add_argument("--scenario", help="scenario JSON (default: generate from --seed)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="summary statistics and figures for a run directory", allow_abbrev=False)
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.add_argument("--baseline", help="policy the others are compared against (default NonRobust)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("pipeline", help="run every stage and write a manifest", allow_abbrev=False)
    p.add_argument("--manifest", help="rerun exactly the configuration recorded in a manifest")
    _add_run_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def _exit_code(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (SolverError, ConvergenceError, InfeasibleProblemError)):
        return EXIT_SOLVER
    if isinstance(exc, (DataError, DimensionError, NonStationaryError, FileNotFoundError, ValueError,
                        json.JSONDecodeError)):
        return EXIT_DATA
    return None


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        code = _exit_code(exc.cause)
        print(f"error: {exc}", file=sys.stderr)
        print("completed artifacts:" + "".join(f"\n  {p}" for p in exc.completed) if exc.completed
              else "no artifacts completed", file=sys.stderr)
        if code is None:
            raise
        return code
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
