"""Day-to-day boundedly-rational adjustment of departure rates.

Each day the network is loaded with the current compliance rates, travel
costs are formed from path travel times plus a schedule-delay penalty, the
bounded-rationality cost operator caps every used alternative at the O-D
minimum plus its tolerance band, and the profile moves along a projected step:
clip(h - lambda * Phi + eta) with the per-O-D dual eta chosen by bisection so
demand is conserved.  Compliance perception advances from the same loading
result (simultaneous update).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .compliance import ComplianceParams, build_pair_contexts, initial_state, step_compliance
from .dnl import DnlError, DnlOptions, run_dnl
from .network import DepartureProfile, Network, TimeGrid


class DayToDayError(Exception):
    """The day loop failed; message names the day."""


@dataclass(frozen=True)
class PenaltyFunction:
    """Piecewise-linear arrival penalty: early and late weights per second."""

    early: float = 0.5
    late: float = 1.5

    def __post_init__(self):
        if self.early < 0 or self.late < 0:
            raise ValueError("penalty weights must be nonnegative")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.early * np.maximum(0.0, -x) + self.late * np.maximum(0.0, x)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class SolverConfig:
    step_size: float = 0.01  # lambda in the projected update
    max_days: int = 200
    gap_tolerance: float = 1e-3
    eta_tolerance: float = 1e-8  # relative demand mismatch accepted by the dual search
    eta_max_expand: int = 80
    residual_warn_fraction: float = 0.005
    junction_max_iter: int = 200

    def check(self):
        errors = []
        if self.step_size <= 0:
            errors.append(f"solver: step size {self.step_size} must be positive")
        for name in ("gap_tolerance", "eta_tolerance"):
            if getattr(self, name) <= 0:
                errors.append(f"solver: {name} must be positive")
        if self.max_days < 1:
            errors.append("solver: max_days must be at least 1")
        return errors


@dataclass
class DayRecord:
    day: int
    profile: DepartureProfile  # the departure rates loaded that day
    psi: np.ndarray  # travel cost per path x bin
    phi: np.ndarray  # bounded-rationality cost per path x bin
    min_cost: dict  # od -> v_ij
    eta: dict  # od -> dual value (None for zero demand)
    gap: float  # relative L2 gap vs. the previous day (nan on day 1)
    total_cost: float
    cr_used: dict  # (od, sign) -> compliance rate in effect
    compliance_trace: list  # per pair dicts for the CSV output
    residual: float
    warnings: list


@dataclass
class RunResult:
    days: list
    converged: bool
    network: Network
    grid: TimeGrid
    final_states: dict
    next_profile: DepartureProfile


# ---------------------------------------------------------------------------
# costs


def travel_cost(travel_time, depart_time, t_arrival, penalty: PenaltyFunction):
    """Generalized cost: travel time plus penalty on arrival-time deviation."""
    travel_time = np.asarray(travel_time, dtype=float)
    out = travel_time + penalty(depart_time + travel_time - t_arrival)
    return out if out.ndim else float(out)


def cost_table(result, network: Network, grid: TimeGrid, penalty: PenaltyFunction) -> np.ndarray:
    """Psi for every path (row order = network.path_ids) at bin midpoints."""
    mids = grid.mids()
    times = result.path_times()
    psi = np.empty((len(network.path_ids), grid.n_bins))
    for i, pid in enumerate(network.path_ids):
        t_a = network.ods[network.paths[pid].od].t_arrival
        psi[i] = travel_cost(times[pid], mids, t_a, penalty)
    return psi


def min_od_cost(psi: np.ndarray, rows) -> float:
    """Least cost over the O-D's paths and departure bins."""
    if len(rows) == 0:
        raise ValueError("O-D has no paths")
    return float(psi[list(rows)].min())


def br_cost(psi, v_ij: float, eps_p: float, eps_min: float):
    """Bounded-rationality cost: max(Psi, v + eps_p) - (eps_p - eps_min)."""
    if eps_min < 0 or eps_p < eps_min:
        raise ValueError("tolerances must satisfy eps_p >= eps_min >= 0")
    psi = np.asarray(psi, dtype=float)
    out = np.maximum(psi, v_ij + eps_p) - (eps_p - eps_min)
    return out if out.ndim else float(out)


def phi_table(psi: np.ndarray, network: Network, path_ids) -> tuple:
    """BR costs for all paths plus the per-O-D minimum costs."""
    phi = np.empty_like(psi)
    row = {pid: i for i, pid in enumerate(path_ids)}
    v = {}
    for od in network.ods:
        rows = [row[pid] for pid in network.od_paths(od)]
        v_ij = min_od_cost(psi, rows)
        v[od] = v_ij
        tol = network.ods[od].tolerances
        eps_min = min(tol[pid] for pid in network.od_paths(od))
        for pid in network.od_paths(od):
            phi[row[pid]] = br_cost(psi[row[pid]], v_ij, tol[pid], eps_min)
    return phi, v


# ---------------------------------------------------------------------------
# the projected update


@dataclass(frozen=True)
class EtaSolve:
    eta: float
    lo: float
    hi: float
    iterations: int


def solve_eta(h, phi, lam: float, demand: float, dt: float,
              rel_tol: float = 1e-8, max_expand: int = 80) -> EtaSolve | None:
    """Root of sum(clip(h - lam*phi + eta)) * dt = demand, by bisection.

    The residual is continuous and nondecreasing in eta, so the bracket is
    certified (g(lo) <= Q <= g(hi)) before bisection starts.  Returns None for
    zero demand (all rates map to zero).
    """
    if demand < 0:
        raise ValueError("demand must be nonnegative")
    if demand == 0:
        return None
    base = np.asarray(h, dtype=float).ravel() - lam * np.asarray(phi, dtype=float).ravel()

    def g(eta):
        return float(np.maximum(base + eta, 0.0).sum() * dt)

    lo = -float(lam * np.max(np.abs(phi))) - 1.0
    hi = float(np.max(h)) + float(lam * np.max(np.abs(phi))) + 1.0
    span = max(hi - lo, 1.0)
    for _ in range(max_expand):
        if g(lo) <= demand:
            break
        lo -= span
        span *= 2
    else:
        raise RuntimeError("eta bracket expansion failed (lower end)")
    span = max(hi - lo, 1.0)
    for _ in range(max_expand):
        if g(hi) >= demand:
            break
        hi += span
        span *= 2
    else:
        raise RuntimeError("eta bracket expansion failed (upper end)")
    lo0, hi0 = lo, hi
    tol = rel_tol * demand
    it = 0
    while it < 200:
        mid = 0.5 * (lo + hi)
        val = g(mid)
        if abs(val - demand) <= tol:
            return EtaSolve(eta=mid, lo=lo0, hi=hi0, iterations=it)
        if val < demand:
            lo = mid
        else:
            hi = mid
        it += 1
    return EtaSolve(eta=0.5 * (lo + hi), lo=lo0, hi=hi0, iterations=it)


def update_departures(profile: DepartureProfile, phi: np.ndarray, lam: float,
                      network: Network, solver: SolverConfig):
    """One projected step of the departure rates; returns (next profile, etas)."""
    nxt = profile.copy()
    etas = {}
    for od in network.ods:
        rows = [profile.index(pid) for pid in network.od_paths(od)]
        demand = network.ods[od].demand
        sol = solve_eta(profile.rates[rows], phi[rows], lam, demand, profile.grid.dt,
                        rel_tol=solver.eta_tolerance, max_expand=solver.eta_max_expand)
        if sol is None:
            etas[od] = None
            nxt.rates[rows] = 0.0
            continue
        etas[od] = sol.eta
        nxt.rates[rows] = np.maximum(profile.rates[rows] - lam * phi[rows] + sol.eta, 0.0)
    return nxt, etas


def relative_gap(now: DepartureProfile, prev: DepartureProfile) -> float:
    """L2 distance between consecutive profiles, normalized by the older one.

    Identical profiles give 0 even when both are empty; otherwise an empty
    reference profile yields nan (undefined).
    """
    diff = now.rates - prev.rates
    dt = prev.grid.dt
    num = math.sqrt(float((diff * diff).sum()) * dt)
    if num == 0.0:
        return 0.0
    den = math.sqrt(float((prev.rates * prev.rates).sum()) * dt)
    if den == 0.0:
        return math.nan
    return num / den


# ---------------------------------------------------------------------------
# the day loop


def run_day_to_day(network: Network, grid: TimeGrid, profile: DepartureProfile,
                   compliance: ComplianceParams, penalty: PenaltyFunction,
                   solver: SolverConfig, on_day=None) -> RunResult:
    """Couple loading, compliance learning and departure adjustment over days.

    Stops when both the relative flow gap and the largest day-over-day
    compliance drift fall below ``solver.gap_tolerance``, or at ``max_days``
    (a non-converged run is a valid outcome, not an error).
    """
    # pairs for O-Ds without demand have no drivers to divert; skip them
    contexts = [ctx for ctx in build_pair_contexts(network)
                if network.ods[ctx.od].demand > 0]
    states = {ctx.key: initial_state(compliance, ctx, network) for ctx in contexts}
    dnl_opts = DnlOptions(residual_warn_fraction=solver.residual_warn_fraction,
                          junction_max_iter=solver.junction_max_iter)
    days = []
    converged = False
    prev_profile = None
    prev_cr = None
    for day in range(1, solver.max_days + 1):
        cr_used = {key: st.cr for key, st in states.items()}
        try:
            result = run_dnl(network, grid, profile, compliance_rates=cr_used, options=dnl_opts)
        except DnlError as exc:
            raise DayToDayError(f"day {day}: {exc}") from exc
        psi = cost_table(result, network, grid, penalty)
        phi, v = phi_table(psi, network, network.path_ids)
        next_profile, etas = update_departures(profile, phi, solver.step_size, network, solver)

        traces = []
        next_states = {}
        for ctx in contexts:
            nxt, tr = step_compliance(states[ctx.key], compliance, result, ctx, grid)
            next_states[ctx.key] = nxt
            row = {"od": ctx.od, "sign": ctx.sign.id, "model": compliance.model,
                   "cr": cr_used[ctx.key]}
            row.update(tr)
            # realized share of the O-D's vehicles that took the recommendation
            od_total = sum(profile.rate(pid).sum() for pid in network.od_paths(ctx.od)) * grid.dt
            took = sum(float(result.up_by_path[ctx.sign.to_link][pid][-1])
                       for pid in ctx.fset if pid in result.up_by_path[ctx.sign.to_link])
            row["fset_share"] = took / od_total if od_total > 0 else math.nan
            traces.append(row)

        gap = math.nan if prev_profile is None else relative_gap(profile, prev_profile)
        total_cost = float((profile.rates * psi).sum() * grid.dt)
        days.append(DayRecord(
            day=day, profile=profile.copy(), psi=psi, phi=phi, min_cost=v, eta=etas,
            gap=gap, total_cost=total_cost, cr_used=cr_used, compliance_trace=traces,
            residual=result.total_residual, warnings=list(result.warnings),
        ))
        if on_day is not None:
            on_day(days[-1])

        drift = 0.0
        if prev_cr is not None:
            drift = max((abs(cr_used[k] - prev_cr[k]) for k in cr_used), default=0.0)
        if prev_profile is not None and not math.isnan(gap) \
                and gap < solver.gap_tolerance and drift < solver.gap_tolerance:
            converged = True
            break

        prev_profile = profile
        prev_cr = cr_used
        profile = next_profile
        states = next_states

    return RunResult(days=days, converged=converged, network=network, grid=grid,
                     final_states=states, next_profile=profile)
