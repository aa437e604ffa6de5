"""Command-line runner: ``occupation-mlis {solve-pde,estimate,plan,rates,calibrate}``.

Every subcommand reads one YAML config, writes its outputs plus the resolved
config (``config.resolved.yaml``) into ``--out``, and exits with 0 on
success, 2 on configuration errors and 3 on numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Dict, Optional

from . import config as cfgmod
from . import estimators as est
from . import hjb, planner
from .errors import (BadFit, ConfigError, DegenerateFit, HypothesisViolation, InvalidParams,
                     InvalidRates, NonFiniteState, QuadratureFailure, SingularTridiagonal, UnstableSolve)
from .paths import DiscretizationLevel, OccupationProblem, RandomStream, simulate_paths
from .rice import RiceParams, project, rice_model
from .smoothing import SmoothingParams

log = logging.getLogger("occupation_mlis")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CSV_SCHEMA_VERSION = 1
RATES_FIELDS = ("sweep", "P", "N", "level", "statistic", "value")
# wall-clock work goes to a separate timings file so the CSV is reproducible
ESTIMATE_FIELDS = tuple(f for f in est.CSV_FIELDS if f != "work_wall")
PLAN_FIELDS = ("mode", "tol", "n_opt", "p_opt", "l0_opt", "l_opt", "sampling_work", "pde_work", "total_work")


class Context:
    """Objects derived from a config, with solved grids cached per resolution."""

    def __init__(self, cfg: cfgmod.ExperimentConfig, out: Path, workers: int = 1):
        self.cfg, self.out, self.workers = cfg, out, workers
        m = cfg.model
        self.params = RiceParams(m.k, m.theta, m.beta, m.i0, m.q0)
        self.model = rice_model(self.params)
        self.costs = est.CostModel(cfg.cost.C_SDE)
        self.pde_cost = hjb.PdeCostModel(cfg.cost.C_PDE)
        self._projected = None
        self._grids: Dict[tuple, hjb.HjbGrid] = {}

    def problem(self, smooth: Optional[bool] = None) -> OccupationProblem:
        p, sm = self.cfg.problem, self.cfg.smoothing
        smooth = sm.enabled if smooth is None else smooth
        return OccupationProblem(p.T, p.gamma_th, p.w, SmoothingParams(sm.c, sm.d) if smooth else None)

    @property
    def projected(self):
        if self._projected is None:
            self._projected = project(self.params, self.cfg.problem.T, x_max=self.cfg.solver.x_max)
        return self._projected

    def grid_path(self, P: int, smooth: bool) -> Path:
        ext = "bin" if self.cfg.output.grid_format == "binary" else "csv"
        return self.out / "grids" / f"grid_P{P}_{'smooth' if smooth else 'sharp'}.{ext}"

    def solve(self, P: int, smooth: Optional[bool] = None) -> hjb.HjbGrid:
        prob = self.problem(smooth)
        key = (P, prob.smoothed)
        if key not in self._grids:
            log.info("solving HJB at P=%d (%s)", P, "smooth" if prob.smoothed else "sharp")
            self._grids[key] = hjb.solve(self.projected, prob, P, z_substeps=self.cfg.solver.z_substeps)
        return self._grids[key]

    def save_grid(self, grid: hjb.HjbGrid) -> Path:
        path = self.grid_path(grid.resolution, grid.smoothing is not None)
        path.parent.mkdir(parents=True, exist_ok=True)
        grid.save(path, binary=self.cfg.output.grid_format == "binary")
        meta = dict(grid.header(), solve_seconds=grid.solve_seconds)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        return path

    def load_grid(self, P: int, smooth: Optional[bool] = None) -> hjb.HjbGrid:
        prob = self.problem(smooth)
        path = self.grid_path(P, prob.smoothed)
        if not path.exists():
            raise ConfigError(f"grid file {path} not found; run `occupation-mlis solve-pde` "
                              f"with the same config and --out first")
        return hjb.HjbGrid.load(path)

    def control(self, grid):
        return hjb.ControlField(grid, self.model, self.cfg.solver.zeta_max, self.cfg.solver.v_floor)

    def stream(self, offset: int = 0) -> RandomStream:
        return RandomStream(self.cfg.estimator.seed, offset)


def _write_csv(path: Path, fieldnames, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={CSV_SCHEMA_VERSION}\n")
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path) -> list:
    """Read a CSV written by this tool (skips the schema comment line)."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def cmd_solve_pde(ctx: Context) -> list:
    """Solve the HJB at ``solver.P`` and write the grid plus its metadata."""
    grid = ctx.solve(ctx.cfg.solver.P)
    path = ctx.save_grid(grid)
    log.info("wrote %s (%.3f s)", path, grid.solve_seconds)
    return [path]


def _pilot_q(ctx: Context, control) -> float:
    e = ctx.cfg.estimator
    prob = ctx.problem()
    stream = ctx.stream(1000)
    if control is None:
        r = est.crude_mc(ctx.model, prob, e.pilot_N, e.pilot_M, stream, ctx.costs, ctx.workers)
    else:
        r = est.slis(ctx.model, prob, e.pilot_N, e.pilot_M, control, stream, ctx.costs, ctx.workers)
    if not r.estimate > 0:
        raise NonFiniteState("pilot estimate of q_w is zero; increase estimator.pilot_M")
    return r.estimate


def cmd_estimate(ctx: Context, variant: str) -> list:
    """Run one estimator; explicit ``M`` or a ``TOL`` list (pilot-driven) sets the sample sizes."""
    if variant not in est.VARIANTS:
        raise ConfigError(f"unknown estimator variant {variant!r}; choose from {est.VARIANTS}")
    e = ctx.cfg.estimator
    prob = ctx.problem()
    control = None
    if variant in ("slis", "mlis-sll", "mlis-cl"):
        control = ctx.control(ctx.load_grid(ctx.cfg.solver.P))
    coupling = {"mlmc": "none", "mlis-sll": "sll", "mlis-cl": "cl"}.get(variant)
    reports = []
    stream = ctx.stream(0)
    if e.M is not None:
        if coupling is None:
            n = e.N
            fn = est.crude_mc if variant == "mc" else est.slis
            args = () if variant == "mc" else (control,)
            reports.append(fn(ctx.model, prob, n, int(e.M), *args, stream, ctx.costs, ctx.workers))
        else:
            L = e.L if e.L is not None else e.max_level
            l0 = e.l0 if e.l0 is not None else 0
            counts = e.M if isinstance(e.M, list) else [int(e.M)] * (L - l0 + 1)
            reports.append(est.multilevel_estimate(ctx.model, prob, control, coupling, l0, L, counts,
                                                   e.N0, stream, ctx.costs, ctx.workers))
    else:
        q = _pilot_q(ctx, control)
        for tol in e.TOL:
            budget = est.ErrorBudget(tol, q, ctx.cfg.cost.C_b, ctx.cfg.cost.C)
            choice = planner.n_opt(budget, e.N0)
            if coupling is None:
                pilot = (est.crude_mc(ctx.model, prob, choice.steps, e.pilot_M, ctx.stream(1001), ctx.costs,
                                      ctx.workers) if variant == "mc" else
                         est.slis(ctx.model, prob, choice.steps, e.pilot_M, control, ctx.stream(1001),
                                  ctx.costs, ctx.workers))
                m = max(2, math.ceil(planner.m_is(budget, pilot.sample_variance)))
                r = (est.crude_mc(ctx.model, prob, choice.steps, m, stream, ctx.costs, ctx.workers)
                     if variant == "mc" else
                     est.slis(ctx.model, prob, choice.steps, m, control, stream, ctx.costs, ctx.workers))
            else:
                L = choice.level
                stats = est.estimate_level_stats(ctx.model, prob, control, coupling, e.N0, L, e.pilot_M,
                                                 ctx.stream(2000), ctx.costs, ctx.workers)
                l0 = e.l0 if e.l0 is not None else planner.optimal_coarse_level(stats, L)
                counts = est.mlmc_allocate(stats, budget, l0, L)
                r = est.multilevel_estimate(ctx.model, prob, control, coupling, l0, L, counts, e.N0,
                                            stream, ctx.costs, ctx.workers)
            reports.append(r.with_budget(budget))
    rows = [{k: r.row()[k] for k in ESTIMATE_FIELDS} for r in reports]
    path = ctx.out / f"estimate_{variant}.csv"
    _write_csv(path, ESTIMATE_FIELDS, rows)
    (ctx.out / f"estimate_{variant}.json").write_text(json.dumps(rows, indent=2))
    (ctx.out / f"timings_{variant}.json").write_text(
        json.dumps([{"tol": r.tol, "work_model": r.work_model, "work_wall": r.work_wall} for r in reports], indent=2))
    return [path]


class _StatsProbe:
    """Level statistics per resolution: pilot runs up to ``max_pilot_P``, extrapolated beyond."""

    def __init__(self, ctx: Context, coupling: str, max_level: int):
        self.ctx, self.coupling, self.max_level = ctx, coupling, max_level
        self.by_P: Dict[int, est.LevelStats] = {}

    def __call__(self, P: int, L: int) -> est.LevelStats:
        c = self.ctx
        if P not in self.by_P:
            if P > c.cfg.solver.max_pilot_P:
                self.by_P[P] = planner.extrapolate_stats(self.by_P, P)
            else:
                ctl = c.control(c.solve(P))
                self.by_P[P] = est.estimate_level_stats(
                    c.model, c.problem(), ctl, self.coupling, c.cfg.estimator.N0, max(L, self.max_level),
                    c.cfg.estimator.pilot_M, c.stream(3000 + P), c.costs, c.workers)
        return self.by_P[P].truncated(L)


def cmd_plan(ctx: Context, mode: str) -> list:
    """One work plan per tolerance (Algorithm-1 or Algorithm-3 style descent over ``P``)."""
    e, s = ctx.cfg.estimator, ctx.cfg.solver
    q = _pilot_q(ctx, ctx.control(ctx.solve(s.P)))
    plans = []
    if mode == "slis":
        def pilot(N, P):
            r = est.slis(ctx.model, ctx.problem(), N, e.pilot_M, ctx.control(ctx.solve(P)),
                         ctx.stream(4000 + P), ctx.costs, ctx.workers)
            return r.sample_variance

        probe = planner.VarianceProbe(pilot, extrapolate_above=s.max_pilot_P)
        for tol in e.TOL:
            budget = est.ErrorBudget(tol, q, ctx.cfg.cost.C_b, ctx.cfg.cost.C)
            plans.append(planner.optimize_slis(budget, s.schedule, probe, ctx.costs, ctx.pde_cost, n0=e.N0))
    elif mode == "mlis":
        max_L = max(planner.n_opt(est.ErrorBudget(t, q, ctx.cfg.cost.C_b), e.N0).level for t in e.TOL)
        probe = _StatsProbe(ctx, "cl", max_L)
        for tol in e.TOL:
            budget = est.ErrorBudget(tol, q, ctx.cfg.cost.C_b, ctx.cfg.cost.C)
            plans.append(planner.optimize_mlis(budget, e.N0, s.schedule, probe, ctx.costs, ctx.pde_cost))
    else:
        raise ConfigError(f"plan mode must be 'slis' or 'mlis', got {mode!r}")
    (ctx.out / f"plans_{mode}.json").write_text(json.dumps([p.to_dict() for p in plans], indent=2))
    path = ctx.out / f"plan_{mode}.csv"
    _write_csv(path, PLAN_FIELDS, [p.summary_row() for p in plans])
    return [path]


def _sweep_rows(ctx: Context, sweep: cfgmod.SweepConfig) -> list:
    rows = []
    prob = ctx.problem(sweep.smooth)
    if sweep.kind == "slis_variance":
        for P in sweep.P:
            ctl = ctx.control(ctx.solve(P, sweep.smooth))
            for N in sweep.N:
                r = est.slis(ctx.model, prob, N, sweep.M, ctl, ctx.stream(5000 + P), ctx.costs, ctx.workers)
                rows.append({"sweep": sweep.name, "P": P, "N": N, "level": "", "statistic": "V_IS",
                             "value": r.sample_variance})
                rows.append({"sweep": sweep.name, "P": P, "N": N, "level": "", "statistic": "mean",
                             "value": r.estimate})
        return rows
    max_level = ctx.cfg.estimator.max_level
    resolutions = [""] if sweep.coupling == "none" else sweep.P
    for P in resolutions:
        ctl = None if P == "" else ctx.control(ctx.solve(P, sweep.smooth))
        st = est.estimate_level_stats(ctx.model, prob, ctl, sweep.coupling, ctx.cfg.estimator.N0, max_level,
                                      sweep.M, ctx.stream(6000 + (P or 0)), ctx.costs, ctx.workers)
        for ell in range(max_level + 1):
            base = {"sweep": sweep.name, "P": P, "N": st.steps(ell), "level": ell}
            rows.append(dict(base, statistic="V", value=float(st.variance[ell])))
            rows.append(dict(base, statistic="mean", value=float(st.mean[ell])))
            if ell >= 1:
                rows.append(dict(base, statistic="V_diff", value=float(st.diff_variance[ell])))
                rows.append(dict(base, statistic="mean_diff", value=float(st.diff_mean[ell])))
        pts = [(st.steps(l), st.diff_variance[l]) for l in range(1, max_level + 1) if st.diff_variance[l] > 0]
        if len(pts) >= 3:
            fit = planner.fit_rate(pts)
            rows.append({"sweep": sweep.name, "P": P, "N": "", "level": "fit", "statistic": "slope_V_diff",
                         "value": fit.slope})
        if sweep.coupling != "none":
            for c in planner.condition_table(st):
                base = {"sweep": sweep.name, "P": P, "N": st.steps(c["level"]), "level": c["level"]}
                rows.append(dict(base, statistic="cond_lhs", value=c["lhs"]))
                rows.append(dict(base, statistic="cond_rhs", value=c["rhs"]))
                rows.append(dict(base, statistic="cond_satisfied", value=int(c["satisfied"])))
    return rows


def cmd_rates(ctx: Context) -> list:
    """Long-format table of variance sweeps and level statistics for every configured sweep."""
    rows = []
    for sweep in ctx.cfg.rates:
        rows.extend(_sweep_rows(ctx, sweep))
    path = ctx.out / "rates.csv"
    _write_csv(path, RATES_FIELDS, rows)
    return [path]


def cmd_calibrate(ctx: Context) -> list:
    """Fit ``C_PDE`` from solve timings and ``C_SDE`` from a timed batch of paths."""
    s, e = ctx.cfg.solver, ctx.cfg.estimator
    secs = []
    for P in s.resolutions:
        secs.append(hjb.solve(ctx.projected, ctx.problem(), P, z_substeps=s.z_substeps).solve_seconds)
    pde = hjb.calibrate_pde_cost(s.resolutions, secs)
    fit = planner.fit_rate(list(zip(s.resolutions, secs)))
    level = DiscretizationLevel(e.N, ctx.cfg.problem.T)
    m = 20000
    start = time.perf_counter()
    simulate_paths(ctx.model, ctx.problem(), level, None, ctx.stream(7000), range(m))
    c_sde = (time.perf_counter() - start) / (m * e.N)
    result = {"resolutions": list(s.resolutions), "seconds": secs, "C_PDE": pde.c_pde,
              "free_slope": fit.slope, "C_SDE": c_sde}
    path = ctx.out / "calibration.json"
    path.write_text(json.dumps(result, indent=2))
    return [path]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occupation-mlis", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["solve-pde", "estimate", "plan", "rates", "calibrate"])
    p.add_argument("--config", type=Path, help="YAML config (defaults used when omitted)")
    p.add_argument("--seed", type=int, help="override estimator.seed")
    p.add_argument("--out", type=Path, help="output directory (default: output.dir)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for path sampling")
    p.add_argument("--variant", help="estimator variant (estimate) or mode slis|mlis (plan)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.from_dict({})
        if args.seed is not None:
            cfg.estimator.seed = args.seed
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfgmod.validate(cfg)
        out = args.out or Path(cfg.output.dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.yaml").write_text(cfg.dump())
        ctx = Context(cfg, out, args.threads)
        if args.command == "solve-pde":
            paths = cmd_solve_pde(ctx)
        elif args.command == "estimate":
            paths = cmd_estimate(ctx, args.variant or cfg.estimator.variant)
        elif args.command == "plan":
            paths = cmd_plan(ctx, args.variant or "slis")
        elif args.command == "rates":
            paths = cmd_rates(ctx)
        else:
            paths = cmd_calibrate(ctx)
    except (ConfigError, InvalidParams, InvalidRates, HypothesisViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteState, UnstableSolve, QuadratureFailure, SingularTridiagonal, BadFit,
            DegenerateFit, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for p in paths:
        print(p)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
