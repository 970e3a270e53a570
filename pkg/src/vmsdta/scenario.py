"""Scenario configuration, built-in fixtures, run orchestration and outputs."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path as _FsPath

import numpy as np

from .compliance import ComplianceParams
from .daytoday import PenaltyFunction, RunResult, SolverConfig, run_day_to_day
from .network import (
    DepartureProfile,
    Link,
    Network,
    ODPair,
    Path,
    ScenarioError,
    TimeGrid,
    VmsSign,
    load_scenario,
    normalize_intervals,
    save_scenario_files,
)

# parameter ranges exercised in the source study; exceeding them only warns
RANGE_WARNINGS = {
    "x0": (-600.0, 600.0),
    "w": (0.2, 0.5),
    "beta": (0.001, 0.1),
    "gamma": (0.0, 300.0),
}


@dataclass(frozen=True)
class InitProfileConfig:
    mode: str = "uniform"  # "uniform" or "random"
    window: tuple | None = None  # shared departure window; per-O-D [t0, T_A] if None
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    grid: TimeGrid
    compliance: ComplianceParams = ComplianceParams()
    penalty: PenaltyFunction = PenaltyFunction()
    solver: SolverConfig = SolverConfig()
    init: InitProfileConfig = InitProfileConfig()
    default_epsilon: float = 0.0
    dump_curves: bool = False

    def check(self):
        errors = list(self.compliance.check()) + list(self.solver.check())
        return errors

    def range_warnings(self):
        warnings = []
        values = {
            "x0": self.compliance.x0,
            "w": self.compliance.w,
            "beta": self.compliance.beta,
            "gamma": self.compliance.gamma,
        }
        for name, (lo, hi) in RANGE_WARNINGS.items():
            v = values[name]
            if not lo <= v <= hi:
                warnings.append(
                    f"config: {name}={v:g} outside the tested range [{lo:g}, {hi:g}]"
                )
        return warnings


def parse_config(obj: dict) -> RunConfig:
    """Build a RunConfig from a parsed config.json dict."""
    try:
        g = obj["grid"]
        grid = TimeGrid(float(g["t0"]), float(g["tf"]), float(g["dt"]))
        comp = obj.get("compliance", {})
        compliance = ComplianceParams(
            model=str(obj.get("model", comp.get("model", "I"))),
            w=float(comp.get("w", 0.3)),
            beta=float(comp.get("beta", 0.01)),
            gamma=float(comp.get("gamma", 0.0)),
            x0=float(comp.get("x0", 0.0)),
            y_f0=None if comp.get("y_f0") is None else float(comp["y_f0"]),
            y_nf0=None if comp.get("y_nf0") is None else float(comp["y_nf0"]),
            beta_iv=None if comp.get("beta_iv") is None else float(comp["beta_iv"]),
            average_over_omega=bool(comp.get("average_over_omega", False)),
        )
        pen = obj.get("penalty", {})
        penalty = PenaltyFunction(float(pen.get("early", 0.5)), float(pen.get("late", 1.5)))
        sol = obj.get("solver", {})
        solver = SolverConfig(
            step_size=float(sol.get("lambda", 0.01)),
            max_days=int(sol.get("max_days", 200)),
            gap_tolerance=float(sol.get("gap_tolerance", 1e-3)),
            eta_tolerance=float(sol.get("eta_tolerance", 1e-8)),
            residual_warn_fraction=float(sol.get("residual_warn_fraction", 0.005)),
            junction_max_iter=int(sol.get("junction_max_iter", 200)),
        )
        init_obj = obj.get("init_profile", {})
        window = init_obj.get("window")
        init = InitProfileConfig(
            mode=str(init_obj.get("mode", "uniform")),
            window=None if window is None else (float(window[0]), float(window[1])),
            seed=int(obj.get("seed", 0)),
        )
        cfg = RunConfig(
            grid=grid, compliance=compliance, penalty=penalty, solver=solver, init=init,
            default_epsilon=float(obj.get("default_epsilon_s", 0.0)),
            dump_curves=bool(obj.get("output", {}).get("dump_curves", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError([f"config: {exc}"]) from exc
    errors = cfg.check()
    if errors:
        raise ScenarioError(errors)
    if init.mode not in ("uniform", "random"):
        raise ScenarioError([f"config: unknown init_profile mode {init.mode!r}"])
    return cfg


def read_config(path) -> RunConfig:
    try:
        obj = json.loads(_FsPath(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError([f"config file {path}: {exc}"]) from exc
    return parse_config(obj)


def config_to_dict(cfg: RunConfig) -> dict:
    c = cfg.compliance
    return {
        "grid": {"t0": cfg.grid.t0, "tf": cfg.grid.tf, "dt": cfg.grid.dt},
        "model": c.model,
        "compliance": {
            "w": c.w, "beta": c.beta, "gamma": c.gamma, "x0": c.x0,
            "y_f0": c.y_f0, "y_nf0": c.y_nf0, "beta_iv": c.beta_iv,
            "average_over_omega": c.average_over_omega,
        },
        "penalty": {"early": cfg.penalty.early, "late": cfg.penalty.late},
        "solver": {
            "lambda": cfg.solver.step_size, "max_days": cfg.solver.max_days,
            "gap_tolerance": cfg.solver.gap_tolerance,
            "eta_tolerance": cfg.solver.eta_tolerance,
            "residual_warn_fraction": cfg.solver.residual_warn_fraction,
            "junction_max_iter": cfg.solver.junction_max_iter,
        },
        "init_profile": {"mode": cfg.init.mode,
                         "window": None if cfg.init.window is None else list(cfg.init.window)},
        "seed": cfg.init.seed,
        "default_epsilon_s": cfg.default_epsilon,
        "output": {"dump_curves": cfg.dump_curves},
    }


# ---------------------------------------------------------------------------
# bundle


@dataclass
class ScenarioBundle:
    network: Network
    config: RunConfig
    profile: DepartureProfile
    warnings: list = field(default_factory=list)


def build_profile(network: Network, cfg: RunConfig) -> DepartureProfile:
    if cfg.init.mode == "random":
        rng = np.random.default_rng(cfg.init.seed)
        return DepartureProfile.random(network, cfg.grid, rng, cfg.init.window)
    return DepartureProfile.uniform(network, cfg.grid, cfg.init.window)


def load_bundle(network_file, paths_file, demand_file, config_file,
                tolerances_file=None, vms_file=None) -> ScenarioBundle:
    """Load all scenario files into a validated, runnable bundle."""
    cfg = read_config(config_file)
    network, warnings = load_scenario(
        network_file, paths_file, demand_file,
        tolerances_file=tolerances_file, vms_file=vms_file,
        grid=cfg.grid, default_epsilon=cfg.default_epsilon,
    )
    warnings = list(warnings) + cfg.range_warnings()
    profile = build_profile(network, cfg)
    return ScenarioBundle(network=network, config=cfg, profile=profile, warnings=warnings)


# ---------------------------------------------------------------------------
# the built-in fig1 fixture: 7 links, 3 paths, one O-D, one sign


def fig1_network(demand: float = 360.0, t_arrival: float = 2100.0,
                 epsilon: float = 150.0, omega=((600.0, 3000.0),)) -> Network:
    """Diamond network with a sign at the exit of the entry link.

    All links are 500 m at 12.5 m/s free flow and 0.5 veh/s capacity, except
    the discouraged corridor entrance (link 2), capped at 0.3 veh/s so the
    recommended detour is worth taking.
    """

    def link(lid, a, b, cap=0.5):
        return Link(id=lid, from_node=a, to_node=b, length=500.0, vf=12.5,
                    capacity=cap, kjam=0.15, w=5.0)

    links = {
        "1": link("1", "a", "b"),
        "2": link("2", "b", "c", cap=0.3),
        "3": link("3", "b", "d"),
        "4": link("4", "c", "d"),
        "5": link("5", "c", "e"),
        "6": link("6", "d", "e"),
        "7": link("7", "e", "f"),
    }
    paths = {
        "p1": Path("p1", "od1", ("1", "2", "5", "7")),
        "p2": Path("p2", "od1", ("1", "2", "4", "6", "7")),
        "p3": Path("p3", "od1", ("1", "3", "6", "7")),
    }
    ods = {
        "od1": ODPair("od1", "a", "f", demand, t_arrival,
                      {"p1": epsilon, "p2": epsilon, "p3": epsilon}),
    }
    signs = [VmsSign(id="vms1", host_link="1", junction="b", from_link="2", to_link="3",
                     omega=normalize_intervals(omega))]
    return Network(links=links, paths=paths, ods=ods, signs=signs)


def fig1_config(**overrides) -> RunConfig:
    base = {
        "grid": {"t0": 0.0, "tf": 3600.0, "dt": 10.0},
        "model": "I",
        "compliance": {"w": 0.3, "beta": 0.01, "gamma": 0.0, "x0": 0.0},
        "penalty": {"early": 0.5, "late": 1.5},
        "solver": {"lambda": 0.0002, "max_days": 200, "gap_tolerance": 1e-3},
        "init_profile": {"mode": "uniform", "window": [900.0, 1800.0]},
        "seed": 0,
    }
    base.update(overrides)
    return parse_config(base)


def write_fig1_fixture(outdir, demand: float = 360.0) -> dict:
    """Write the fixture scenario files; returns the file map."""
    outdir = _FsPath(outdir)
    network = fig1_network(demand=demand)
    files = save_scenario_files(network, outdir)
    cfg = fig1_config()
    files["config"] = outdir / "config.json"
    files["config"].write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
    return files


# ---------------------------------------------------------------------------
# output writing


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_outputs(result: RunResult, outdir, config: RunConfig | None = None,
                  warnings=None) -> dict:
    """Write days/flows/costs/compliance CSVs plus summary.json and plot data."""
    outdir = _FsPath(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    network, grid = result.network, result.grid
    files = {}

    files["days"] = outdir / "days.csv"
    with open(files["days"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["day", "relative_gap", "total_cost", "converged"])
        for rec in result.days:
            done = result.converged and rec.day == result.days[-1].day
            wr.writerow([rec.day, _fmt(rec.gap), _fmt(rec.total_cost), str(done).lower()])

    files["flows"] = outdir / "flows.csv"
    with open(files["flows"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["day", "path", "bin", "rate"])
        for rec in result.days:
            for pid in network.path_ids:
                for k, r in enumerate(rec.profile.rate(pid)):
                    wr.writerow([rec.day, pid, k, _fmt(r)])

    files["costs"] = outdir / "costs.csv"
    with open(files["costs"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["day", "path", "bin", "psi", "phi"])
        for rec in result.days:
            for i, pid in enumerate(network.path_ids):
                for k in range(grid.n_bins):
                    wr.writerow([rec.day, pid, k, _fmt(rec.psi[i, k]), _fmt(rec.phi[i, k])])

    files["compliance"] = outdir / "compliance.csv"
    comp_cols = ["day", "od_id", "sign_id", "model", "s_bar", "mu_f", "mu_nf",
                 "sigma_f", "sigma_nf", "x", "y_f", "y_nf", "cr", "fset_share"]
    with open(files["compliance"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(comp_cols)
        for rec in result.days:
            for row in rec.compliance_trace:
                wr.writerow([rec.day, row["od"], row["sign"], row["model"],
                             _fmt(row.get("s_bar")), _fmt(row.get("mu_f")),
                             _fmt(row.get("mu_nf")), _fmt(row.get("sigma_f")),
                             _fmt(row.get("sigma_nf")), _fmt(row.get("x")),
                             _fmt(row.get("y_f")), _fmt(row.get("y_nf")),
                             _fmt(row["cr"]), _fmt(row.get("fset_share"))])

    files.update(emit_plot_data(result, outdir))

    last = result.days[-1]
    summary = {
        "days": len(result.days),
        "converged": result.converged,
        "final_gap": None if math.isnan(last.gap) else last.gap,
        "final_total_cost": last.total_cost,
        "final_cr": {f"{od}|{sign}": cr for (od, sign), cr in last.cr_used.items()},
        "residual_final_day": last.residual,
        "warnings": list(warnings or []),
    }
    if config is not None:
        summary["config"] = config_to_dict(config)
    files["summary"] = outdir / "summary.json"
    files["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return files


def emit_plot_data(result: RunResult, outdir) -> dict:
    """Tidy per-day series: savings, perception, compliance, path flow shares."""
    outdir = _FsPath(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    network, grid = result.network, result.grid
    files = {}

    files["plot_savings"] = outdir / "plot_savings.csv"
    files["plot_perception"] = outdir / "plot_perception.csv"
    files["plot_compliance"] = outdir / "plot_compliance.csv"
    savings, perception, compliance = [], [], []
    for rec in result.days:
        for row in rec.compliance_trace:
            key = (rec.day, row["od"], row["sign"])
            if row.get("s_bar") is not None:
                savings.append(key + (row["s_bar"],))
            if row.get("x") is not None:
                perception.append(key + (row["x"],))
            elif row.get("y_nf") is not None:
                perception.append(key + (row["y_nf"] - row["y_f"],))
            compliance.append(key + (row["cr"],))
    for fname, rows, col in (("plot_savings", savings, "saving_s"),
                             ("plot_perception", perception, "perception"),
                             ("plot_compliance", compliance, "cr")):
        with open(files[fname], "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["day", "od_id", "sign_id", col])
            for row in rows:
                wr.writerow([row[0], row[1], row[2], _fmt(row[3])])

    files["plot_flow_shares"] = outdir / "plot_flow_shares.csv"
    with open(files["plot_flow_shares"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["day", "od_id", "path", "share"])
        for rec in result.days:
            for od in network.ods:
                pids = network.od_paths(od)
                totals = {pid: float(rec.profile.rate(pid).sum()) * grid.dt for pid in pids}
                whole = sum(totals.values())
                for pid in pids:
                    share = totals[pid] / whole if whole > 0 else math.nan
                    wr.writerow([rec.day, od, pid, _fmt(share)])
    return files


def dump_curves(result_day_record, network, grid, outdir, dnl_result) -> dict:
    """Debug dump of the final day's cumulative curves and turning ratios."""
    outdir = _FsPath(outdir)
    files = {"curves": outdir / "curves.csv", "turning_ratios": outdir / "turning_ratios.csv"}
    with open(files["curves"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["link_id", "bin", "N_up", "N_down"])
        for a in network.links:
            for k in range(grid.n_bins + 1):
                wr.writerow([a, k, _fmt(dnl_result.up[a][k]), _fmt(dnl_result.down[a][k])])
    with open(files["turning_ratios"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["node", "in_link", "out", "bin", "ratio"])
        for node, per_in in dnl_result.turning_ratios.items():
            for a, per_out in per_in.items():
                for out, arr in per_out.items():
                    for k, r in enumerate(arr):
                        wr.writerow([node, a, out, k, _fmt(r)])
    return files


# ---------------------------------------------------------------------------
# orchestration


def run_bundle(bundle: ScenarioBundle, outdir=None) -> RunResult:
    cfg = bundle.config
    result = run_day_to_day(bundle.network, cfg.grid, bundle.profile,
                            cfg.compliance, cfg.penalty, cfg.solver)
    if outdir is not None:
        write_outputs(result, outdir, config=cfg, warnings=bundle.warnings)
        if cfg.dump_curves:
            from .dnl import run_dnl  # final-day reload for the debug dump
            last = result.days[-1]
            dr = run_dnl(bundle.network, cfg.grid, last.profile,
                         compliance_rates=last.cr_used)
            dump_curves(last, bundle.network, cfg.grid, outdir, dr)
    return result


# -- parameter sweeps ---------------------------------------------------------

SWEEP_PARAMS = ("beta", "w", "gamma", "x0", "y0", "lambda")


def _apply_sweep_value(cfg: RunConfig, param: str, value: float) -> RunConfig:
    c = cfg.compliance
    if param == "beta":
        return replace(cfg, compliance=replace(c, beta=value))
    if param == "w":
        return replace(cfg, compliance=replace(c, w=value))
    if param == "gamma":
        return replace(cfg, compliance=replace(c, gamma=value))
    if param == "x0":
        return replace(cfg, compliance=replace(c, x0=value))
    if param == "y0":
        return replace(cfg, compliance=replace(c, y_f0=value, y_nf0=value))
    if param == "lambda":
        return replace(cfg, solver=replace(cfg.solver, step_size=value))
    raise ScenarioError([f"sweep: unknown parameter {param!r} (choose from {SWEEP_PARAMS})"])


def _sweep_worker(args):
    files, param, value, outdir = args
    bundle = load_bundle(**files)
    bundle = ScenarioBundle(network=bundle.network,
                            config=_apply_sweep_value(bundle.config, param, value),
                            profile=bundle.profile, warnings=bundle.warnings)
    run_dir = None if outdir is None else _FsPath(outdir) / f"{param}_{value:g}"
    result = run_bundle(bundle, run_dir)
    last = result.days[-1]
    final_cr = max(last.cr_used.values()) if last.cr_used else math.nan
    return {
        "param": param, "value": value, "days": len(result.days),
        "converged": result.converged,
        "final_gap": last.gap, "final_cr": final_cr,
        "final_total_cost": last.total_cost,
    }


def run_sweep(files: dict, param: str, values, outdir=None, workers: int = 1) -> list:
    """Independent replicates over one parameter; returns one row per value."""
    jobs = [(files, param, float(v), outdir) for v in values]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_worker, jobs))
    else:
        rows = [_sweep_worker(job) for job in jobs]
    if outdir is not None:
        path = _FsPath(outdir) / "sweep.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["param", "value", "days", "converged", "final_gap",
                         "final_cr", "final_total_cost"])
            for row in rows:
                wr.writerow([row["param"], _fmt(row["value"]), row["days"],
                             str(row["converged"]).lower(), _fmt(row["final_gap"]),
                             _fmt(row["final_cr"]), _fmt(row["final_total_cost"])])
    return rows
