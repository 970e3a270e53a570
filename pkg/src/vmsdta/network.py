"""Road network data model: links, junctions, paths, demands, VMS signs, time grid.

Loaders validate the whole object graph at once and report every violation,
each naming the offending entity.  Everything here is immutable after load and
safe to share read-only across threads.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path as _FsPath

import numpy as np

SINK = "__sink__"


class ScenarioError(Exception):
    """Scenario inputs violate the schema or an invariant.

    ``errors`` lists every violation found.
    """

    def __init__(self, errors):
        self.errors = [str(e) for e in errors]
        super().__init__("\n".join(self.errors) if self.errors else "invalid scenario")


def _require(cond, errors, msg):
    if not cond:
        errors.append(msg)


# ---------------------------------------------------------------------------
# time grid


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on the commuting period [t0, tf].

    Rates live on bins (length ``n_bins``); cumulative vehicle counts live on
    bin edges (length ``n_bins + 1``).  All times in seconds.
    """

    t0: float
    tf: float
    dt: float

    def __post_init__(self):
        errors = []
        _require(self.tf > self.t0, errors, f"time grid: tf ({self.tf}) must exceed t0 ({self.t0})")
        _require(self.dt > 0, errors, f"time grid: dt ({self.dt}) must be positive")
        if not errors:
            n = (self.tf - self.t0) / self.dt
            _require(
                abs(n - round(n)) <= 1e-9 * max(1.0, abs(n)),
                errors,
                f"time grid: horizon {self.tf - self.t0} is not an integer multiple of dt={self.dt}",
            )
        if errors:
            raise ScenarioError(errors)

    @property
    def n_bins(self) -> int:
        return int(round((self.tf - self.t0) / self.dt))

    def edges(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_bins + 1)

    def mids(self) -> np.ndarray:
        return self.t0 + self.dt * (np.arange(self.n_bins) + 0.5)


# ---------------------------------------------------------------------------
# active-set (omega) helpers


def normalize_intervals(intervals):
    """Sort and merge [start, end) intervals; drops empty ones."""
    ivals = sorted((float(s), float(e)) for s, e in intervals if float(e) > float(s))
    merged = []
    for s, e in ivals:
        if merged and s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))
    return tuple(merged)


def in_omega(t, omega) -> bool:
    """True if t lies in one of the [start, end) intervals."""
    return any(s <= t < e for s, e in omega)


def omega_length(omega) -> float:
    return sum(e - s for s, e in omega)


def omega_bin_overlap(grid: TimeGrid, omega) -> np.ndarray:
    """Seconds of overlap between each grid bin and the active set."""
    lo = grid.edges()[:-1]
    hi = grid.edges()[1:]
    weights = np.zeros(grid.n_bins)
    for s, e in omega:
        weights += np.clip(np.minimum(hi, e) - np.maximum(lo, s), 0.0, None)
    return weights


# ---------------------------------------------------------------------------
# entities


@dataclass(frozen=True)
class Link:
    id: str
    from_node: str
    to_node: str
    length: float  # m
    vf: float  # free-flow speed, m/s
    capacity: float  # veh/s
    kjam: float  # jam density, veh/m
    w: float  # backward wave speed, m/s

    @property
    def fft(self) -> float:
        """Free-flow traversal time, s."""
        return self.length / self.vf

    @property
    def storage(self) -> float:
        """Jam storage, veh."""
        return self.kjam * self.length

    @property
    def qmax(self) -> float:
        """Capacity of the triangular fundamental diagram, veh/s."""
        return self.vf * self.w * self.kjam / (self.vf + self.w)

    def check(self):
        errors = []
        for name in ("length", "vf", "capacity", "kjam", "w"):
            _require(getattr(self, name) > 0, errors, f"link {self.id}: {name} must be strictly positive")
        if not errors:
            _require(
                self.capacity <= self.qmax * (1 + 1e-9),
                errors,
                f"link {self.id}: capacity {self.capacity:g} exceeds the triangular-diagram "
                f"maximum {self.qmax:g}",
            )
            _require(self.w <= self.vf, errors, f"link {self.id}: backward wave speed must not exceed vf")
        return errors


@dataclass(frozen=True)
class Junction:
    node: str
    incoming: tuple
    outgoing: tuple


@dataclass(frozen=True)
class Path:
    id: str
    od: str
    links: tuple


@dataclass(frozen=True)
class ODPair:
    id: str
    origin: str
    destination: str
    demand: float  # Q, vehicles over the horizon
    t_arrival: float  # desired arrival time T_A, s
    tolerances: dict = field(default_factory=dict)  # path id -> epsilon, cost-seconds


@dataclass(frozen=True)
class VmsSign:
    id: str
    host_link: str  # sign location; diversion applies to flow exiting this link
    junction: str  # node where the diversion happens
    from_link: str  # discouraged downstream link
    to_link: str  # recommended downstream link
    omega: tuple  # union of disjoint [start, end) intervals, s

    def active(self, t: float) -> bool:
        return in_omega(t, self.omega)


# ---------------------------------------------------------------------------
# network container


@dataclass
class Network:
    links: dict
    paths: dict
    ods: dict
    signs: list = field(default_factory=list)
    junctions: dict = field(default_factory=dict)  # node -> Junction, derived if empty

    def __post_init__(self):
        self.nodes = set()
        self._out_links = {}
        self._in_links = {}
        for lk in self.links.values():
            self.nodes.add(lk.from_node)
            self.nodes.add(lk.to_node)
            self._out_links.setdefault(lk.from_node, []).append(lk.id)
            self._in_links.setdefault(lk.to_node, []).append(lk.id)
        if not self.junctions:
            self.junctions = {
                n: Junction(n, tuple(self._in_links.get(n, ())), tuple(self._out_links.get(n, ())))
                for n in sorted(self.nodes)
                if self._in_links.get(n) and self._out_links.get(n)
            }
        self._od_paths = {}
        for p in self.paths.values():
            self._od_paths.setdefault(p.od, []).append(p.id)
        # successor link along each path (SINK after the last link)
        self._next_link = {}
        for p in self.paths.values():
            seq = {}
            for i, a in enumerate(p.links):
                seq[a] = p.links[i + 1] if i + 1 < len(p.links) else SINK
            self._next_link[p.id] = seq

    # -- topology helpers ---------------------------------------------------

    def out_links(self, node):
        return tuple(self._out_links.get(node, ()))

    def in_links(self, node):
        return tuple(self._in_links.get(node, ()))

    def od_paths(self, od_id):
        return tuple(self._od_paths.get(od_id, ()))

    @property
    def path_ids(self):
        return tuple(self.paths)

    def node_sequence(self, path_id):
        p = self.paths[path_id]
        seq = [self.links[p.links[0]].from_node]
        seq += [self.links[a].to_node for a in p.links]
        return tuple(seq)

    def next_link(self, path_id, link_id):
        """Link following `link_id` on the path, or SINK after the last one."""
        return self._next_link[path_id][link_id]

    def tail_links(self, path_id, node):
        """Links of the path downstream of `node` (first occurrence)."""
        seq = self.node_sequence(path_id)
        if node not in seq:
            raise ValueError(f"node {node} does not lie on path {path_id}")
        return self.paths[path_id].links[seq.index(node):]

    def freeflow_partial(self, path_id, node) -> float:
        """Free-flow traversal time from `node` to the path's destination, s."""
        return sum(self.links[a].fft for a in self.tail_links(path_id, node))

    # -- validation -----------------------------------------------------------

    def validate(self, grid: TimeGrid | None = None):
        """Full invariant check; returns (errors, warnings)."""
        errors, warnings = [], []
        for lk in self.links.values():
            errors += lk.check()
        for jn in self.junctions.values():
            _require(jn.incoming and jn.outgoing, errors,
                     f"junction {jn.node}: needs at least one incoming and one outgoing link")
            for a in tuple(jn.incoming) + tuple(jn.outgoing):
                _require(a in self.links, errors, f"junction {jn.node}: unknown link {a}")
            for a in jn.incoming:
                if a in self.links:
                    _require(self.links[a].to_node == jn.node, errors,
                             f"junction {jn.node}: link {a} does not end there")
            for a in jn.outgoing:
                if a in self.links:
                    _require(self.links[a].from_node == jn.node, errors,
                             f"junction {jn.node}: link {a} does not start there")
        for od in self.ods.values():
            _require(od.demand >= 0, errors, f"O-D {od.id}: demand must be nonnegative")
            _require(bool(self.od_paths(od.id)), errors, f"O-D {od.id} has no paths")
            for pid, eps in od.tolerances.items():
                _require(pid in self.paths, errors, f"O-D {od.id}: tolerance for unknown path {pid}")
                _require(eps >= 0, errors, f"O-D {od.id}: tolerance for path {pid} must be nonnegative")
            for pid in self.od_paths(od.id):
                _require(pid in od.tolerances, errors,
                         f"O-D {od.id}: path {pid} missing from the tolerance map")
            if grid is not None:
                _require(od.t_arrival < grid.tf, errors,
                         f"O-D {od.id}: desired arrival {od.t_arrival} must precede tf={grid.tf}")
        for p in self.paths.values():
            _require(p.od in self.ods, errors, f"path {p.id}: unknown O-D {p.od}")
            _require(len(p.links) > 0, errors, f"path {p.id}: empty link sequence")
            unknown = [a for a in p.links if a not in self.links]
            for a in unknown:
                errors.append(f"path {p.id}: unknown link {a}")
            if unknown:
                continue
            _require(len(set(p.links)) == len(p.links), errors, f"path {p.id}: repeated links")
            for a, b in zip(p.links, p.links[1:]):
                _require(self.links[a].to_node == self.links[b].from_node, errors,
                         f"path {p.id}: links {a} and {b} do not share a node")
            if p.od in self.ods:
                od = self.ods[p.od]
                _require(self.links[p.links[0]].from_node == od.origin, errors,
                         f"path {p.id}: first link does not depart origin {od.origin}")
                _require(self.links[p.links[-1]].to_node == od.destination, errors,
                         f"path {p.id}: last link does not enter destination {od.destination}")
        for sg in self.signs:
            for name in ("host_link", "from_link", "to_link"):
                _require(getattr(sg, name) in self.links, errors, f"sign {sg.id}: unknown {name}")
            _require(sg.from_link != sg.to_link, errors,
                     f"sign {sg.id}: from_link and to_link must differ")
            if sg.host_link in self.links:
                _require(self.links[sg.host_link].to_node == sg.junction, errors,
                         f"sign {sg.id}: host link {sg.host_link} does not end at junction {sg.junction}")
            for name in ("from_link", "to_link"):
                a = getattr(sg, name)
                if a in self.links:
                    _require(self.links[a].from_node == sg.junction, errors,
                             f"sign {sg.id}: {name} {a} does not leave junction {sg.junction}")
            _require(omega_length(sg.omega) > 0, errors, f"sign {sg.id}: active set is empty")
            if grid is not None:
                for s, e in sg.omega:
                    _require(grid.t0 <= s < e <= grid.tf, errors,
                             f"sign {sg.id}: interval [{s}, {e}) outside the horizon")
        if grid is not None:
            for lk in self.links.values():
                if lk.vf > 0 and lk.w > 0 and lk.length > 0:
                    _require(lk.fft >= grid.dt - 1e-12, errors,
                             f"link {lk.id}: dt={grid.dt} exceeds free-flow traversal {lk.fft:g}s")
                    _require(lk.length / lk.w >= grid.dt - 1e-12, errors,
                             f"link {lk.id}: dt={grid.dt} exceeds backward wave traversal {lk.length / lk.w:g}s")
        # a path crossed by several signs is legal but worth flagging
        claimed = {}
        for sg in self.signs:
            for fset, nfset in paths_through_vms(self, sg).values():
                for pid in fset + nfset:
                    claimed.setdefault(pid, []).append(sg.id)
        for pid, sids in claimed.items():
            if len(sids) > 1:
                warnings.append(f"path {pid} passes multiple VMS signs ({', '.join(sids)})")
        return errors, warnings


def paths_through_vms(network: Network, sign: VmsSign):
    """Partition each O-D's paths by their movement at the sign's junction.

    Returns ``{od_id: (fset, nfset)}`` for O-Ds with at least one path taking
    the host link into from_link or to_link.  An O-D is *affected* iff both
    sets are nonempty; paths avoiding the host link belong to neither set.
    """
    out = {}
    for p in network.paths.values():
        for a, b in zip(p.links, p.links[1:]):
            if a != sign.host_link:
                continue
            fset, nfset = out.setdefault(p.od, ([], []))
            if b == sign.to_link:
                fset.append(p.id)
            elif b == sign.from_link:
                nfset.append(p.id)
    return {od: (tuple(f), tuple(nf)) for od, (f, nf) in out.items()}


def affected_ods(network: Network, sign: VmsSign):
    """O-Ds where diversion is possible: both F- and NF-sets nonempty."""
    return {od: (f, nf) for od, (f, nf) in paths_through_vms(network, sign).items() if f and nf}


# ---------------------------------------------------------------------------
# departure profiles


@dataclass
class DepartureProfile:
    """Per-path piecewise-constant departure rates (veh/s) on the grid bins."""

    grid: TimeGrid
    path_ids: tuple
    rates: np.ndarray  # shape (n_paths, n_bins)

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float)
        if self.rates.shape != (len(self.path_ids), self.grid.n_bins):
            raise ScenarioError([
                f"departure profile: rate array shape {self.rates.shape} does not match "
                f"{len(self.path_ids)} paths x {self.grid.n_bins} bins"
            ])
        self._index = {pid: i for i, pid in enumerate(self.path_ids)}

    def index(self, path_id) -> int:
        return self._index[path_id]

    def rate(self, path_id) -> np.ndarray:
        return self.rates[self._index[path_id]]

    def copy(self) -> "DepartureProfile":
        return DepartureProfile(self.grid, self.path_ids, self.rates.copy())

    def od_totals(self, network: Network):
        """Integral of departures per O-D, vehicles."""
        return {
            od: float(sum(self.rate(pid).sum() for pid in network.od_paths(od)) * self.grid.dt)
            for od in network.ods
        }

    def check_feasible(self, network: Network, rel_tol: float = 1e-6):
        errors = []
        if np.any(self.rates < 0):
            errors.append("departure profile: negative rates")
        for od, total in self.od_totals(network).items():
            q = network.ods[od].demand
            if abs(total - q) > rel_tol * max(q, 1.0):
                errors.append(f"departure profile: O-D {od} integral {total:g} != demand {q:g}")
        return errors

    @classmethod
    def zeros(cls, network: Network, grid: TimeGrid):
        return cls(grid, network.path_ids, np.zeros((len(network.path_ids), grid.n_bins)))

    @classmethod
    def uniform(cls, network: Network, grid: TimeGrid, window=None):
        """Split each O-D's demand equally across its paths over a departure
        window (default: [t0, T_A] per O-D)."""
        prof = cls.zeros(network, grid)
        for od in network.ods.values():
            pids = network.od_paths(od.id)
            if not pids or od.demand == 0:
                continue
            w0, w1 = window if window is not None else (grid.t0, min(od.t_arrival, grid.tf))
            w0 = max(w0, grid.t0)
            w1 = min(w1, grid.tf)
            if w1 <= w0:
                raise ScenarioError([f"O-D {od.id}: empty departure window [{w0}, {w1})"])
            overlap = omega_bin_overlap(grid, ((w0, w1),))
            base = od.demand / (len(pids) * (w1 - w0)) * (overlap / grid.dt)
            for pid in pids:
                prof.rates[prof.index(pid)] = base
        return prof

    @classmethod
    def random(cls, network: Network, grid: TimeGrid, rng, window=None):
        """Random nonnegative rates inside the window, scaled to meet demand."""
        prof = cls.uniform(network, grid, window)
        for od in network.ods.values():
            pids = network.od_paths(od.id)
            if not pids or od.demand == 0:
                continue
            for pid in pids:
                i = prof.index(pid)
                mask = prof.rates[i] > 0
                prof.rates[i, mask] *= rng.random(mask.sum())
            rows = [prof.index(pid) for pid in pids]
            total = prof.rates[rows].sum() * grid.dt
            if total > 0:
                prof.rates[rows] *= od.demand / total
        return prof


# ---------------------------------------------------------------------------
# file I/O


def read_network_json(path):
    obj = json.loads(_FsPath(path).read_text())
    links = {}
    for rec in obj.get("links", []):
        lk = Link(
            id=str(rec["id"]),
            from_node=str(rec["from"]),
            to_node=str(rec["to"]),
            length=float(rec["length_m"]),
            vf=float(rec["vf_mps"]),
            capacity=float(rec["cap_vps"]),
            kjam=float(rec["kjam_vpm"]),
            w=float(rec["w_mps"]),
        )
        links[lk.id] = lk
    junctions = {}
    for rec in obj.get("junctions", []):
        junctions[str(rec["node"])] = Junction(
            str(rec["node"]), tuple(map(str, rec["in"])), tuple(map(str, rec["out"]))
        )
    return links, junctions


def read_paths_json(path):
    obj = json.loads(_FsPath(path).read_text())
    return {str(r["id"]): Path(str(r["id"]), str(r["od"]), tuple(map(str, r["links"]))) for r in obj}


def read_demand_csv(path):
    ods = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            od = ODPair(
                id=str(row["od_id"]),
                origin=str(row["origin"]),
                destination=str(row["destination"]),
                demand=float(row["Q"]),
                t_arrival=float(row["T_A"]),
            )
            ods[od.id] = od
    return ods


def read_tolerances_csv(path):
    tol = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            tol.setdefault(str(row["od_id"]), {})[str(row["path_id"])] = float(row["epsilon_s"])
    return tol


def read_vms_json(path):
    obj = json.loads(_FsPath(path).read_text())
    if isinstance(obj, dict):
        obj = [obj]
    signs = []
    for rec in obj:
        signs.append(
            VmsSign(
                id=str(rec["id"]),
                host_link=str(rec["host_link"]),
                junction=str(rec["junction"]),
                from_link=str(rec["from_link"]),
                to_link=str(rec["to_link"]),
                omega=normalize_intervals(rec["omega"]),
            )
        )
    return signs


def load_scenario(network_file, paths_file, demand_file, tolerances_file=None,
                  vms_file=None, grid: TimeGrid | None = None, default_epsilon: float = 0.0):
    """Load and validate all scenario inputs into a single Network.

    Raises ScenarioError with the full violation list; returns
    ``(network, warnings)`` otherwise.  Missing tolerance rows fall back to
    ``default_epsilon``.
    """
    errors = []
    try:
        links, junctions = read_network_json(network_file)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ScenarioError([f"network file {network_file}: {exc}"]) from exc
    try:
        paths = read_paths_json(paths_file)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ScenarioError([f"paths file {paths_file}: {exc}"]) from exc
    try:
        ods = read_demand_csv(demand_file)
    except (OSError, KeyError, ValueError) as exc:
        raise ScenarioError([f"demand file {demand_file}: {exc}"]) from exc
    tol = {}
    if tolerances_file is not None:
        try:
            tol = read_tolerances_csv(tolerances_file)
        except (OSError, KeyError, ValueError) as exc:
            raise ScenarioError([f"tolerances file {tolerances_file}: {exc}"]) from exc
    signs = []
    if vms_file is not None:
        try:
            signs = read_vms_json(vms_file)
        except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
            raise ScenarioError([f"vms file {vms_file}: {exc}"]) from exc

    # attach tolerances, filling gaps with the configured default
    ods_full = {}
    for od in ods.values():
        eps = dict(tol.get(od.id, {}))
        for p in paths.values():
            if p.od == od.id and p.id not in eps:
                eps[p.id] = default_epsilon
        ods_full[od.id] = ODPair(od.id, od.origin, od.destination, od.demand, od.t_arrival, eps)

    network = Network(links=links, paths=paths, ods=ods_full, signs=signs, junctions=junctions)
    errs, warnings = network.validate(grid)
    errors += errs
    if errors:
        raise ScenarioError(errors)
    return network, warnings


# -- writers (round-trip formats for fixtures and golden tests) --------------


def write_network_json(network: Network, path):
    obj = {
        "links": [
            {
                "id": lk.id, "from": lk.from_node, "to": lk.to_node,
                "length_m": lk.length, "vf_mps": lk.vf, "cap_vps": lk.capacity,
                "kjam_vpm": lk.kjam, "w_mps": lk.w,
            }
            for lk in network.links.values()
        ],
        "nodes": sorted(network.nodes),
        "junctions": [
            {"node": jn.node, "in": list(jn.incoming), "out": list(jn.outgoing)}
            for jn in network.junctions.values()
        ],
    }
    _FsPath(path).write_text(json.dumps(obj, indent=2) + "\n")


def write_paths_json(network: Network, path):
    obj = [{"id": p.id, "od": p.od, "links": list(p.links)} for p in network.paths.values()]
    _FsPath(path).write_text(json.dumps(obj, indent=2) + "\n")


def write_demand_csv(network: Network, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["od_id", "origin", "destination", "Q", "T_A"])
        for od in network.ods.values():
            wr.writerow([od.id, od.origin, od.destination, repr(od.demand), repr(od.t_arrival)])


def write_tolerances_csv(network: Network, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["od_id", "path_id", "epsilon_s"])
        for od in network.ods.values():
            for pid in network.od_paths(od.id):
                wr.writerow([od.id, pid, repr(od.tolerances[pid])])


def write_vms_json(network: Network, path):
    obj = [
        {
            "id": sg.id, "host_link": sg.host_link, "junction": sg.junction,
            "from_link": sg.from_link, "to_link": sg.to_link,
            "omega": [list(iv) for iv in sg.omega],
        }
        for sg in network.signs
    ]
    _FsPath(path).write_text(json.dumps(obj, indent=2) + "\n")


def save_scenario_files(network: Network, outdir):
    """Write network/paths/demand/tolerances/vms files; returns their paths."""
    outdir = _FsPath(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = {
        "network": outdir / "network.json",
        "paths": outdir / "paths.json",
        "demand": outdir / "demand.csv",
        "tolerances": outdir / "tolerances.csv",
    }
    write_network_json(network, files["network"])
    write_paths_json(network, files["paths"])
    write_demand_csv(network, files["demand"])
    write_tolerances_csv(network, files["tolerances"])
    if network.signs:
        files["vms"] = outdir / "vms.json"
        write_vms_json(network, files["vms"])
    return files
