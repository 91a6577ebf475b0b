"""Radial distribution network model and instance ingestion.

A network instance is a rooted tree of buses over a discrete horizon of T
periods.  Every non-root bus carries the parameters of the line that
connects it to its parent (series resistance R, reactance X, apparent-power
limit S) plus a shunt susceptance B (and optional shunt conductance g), and
squared-voltage-magnitude bounds.  Flexible demand and production at each
bus is described by a FlexibilityProfile.  All quantities are per-unit.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

ROOT = 0


class InstanceError(ValueError):
    """Raised when an instance document violates the schema or an invariant."""


@dataclass(frozen=True)
class Bus:
    """One bus and, for non-root buses, the line to its parent."""

    id: int
    parent: int | None = None
    R: float = 0.0            # series resistance of line (id, parent)
    X: float = 0.0            # series reactance
    S: float = 0.0            # apparent-power limit of the line
    B: float = 0.0            # shunt susceptance at the bus
    g: float = 0.0            # shunt conductance at the bus
    v_min: float = 0.0        # bounds on squared voltage magnitude
    v_max: float = 0.0

    @property
    def is_root(self) -> bool:
        return self.parent is None


@dataclass(frozen=True)
class FlexibilityProfile:
    """Flexible consumption/production envelope of one bus.

    Consumption p_c(t) lives in [p_min(t), p_max(t)] and must deliver at
    least `energy` summed over the horizon; reactive consumption is tied to
    active by the fixed ratio tau.  Production p_p(t) lives in
    [0, prod_max(t)] with reactive part q_p(t) in
    [prod_ratio_min(t), prod_ratio_max(t)] * p_p(t).
    """

    bus: int
    p_min: tuple[float, ...]
    p_max: tuple[float, ...]
    energy: float
    tau: float
    prod_max: tuple[float, ...]
    prod_ratio_min: tuple[float, ...]
    prod_ratio_max: tuple[float, ...]


@dataclass(frozen=True)
class NetworkInstance:
    """Immutable radial-network instance; safe to share across workers."""

    buses: tuple[Bus, ...]
    profiles: tuple[FlexibilityProfile, ...]
    T: int
    v0: float
    k_loss: float
    cost: tuple[tuple[float, float], ...]   # per period (linear, quadratic) on root production
    aggregators: dict[int, int] = field(default_factory=dict)  # bus id -> aggregator id

    @property
    def root(self) -> Bus:
        return next(b for b in self.buses if b.is_root)

    @property
    def grid_buses(self) -> list[Bus]:
        """Non-root buses ordered by id."""
        return sorted((b for b in self.buses if not b.is_root), key=lambda b: b.id)

    @property
    def n_buses(self) -> int:
        return len(self.buses) - 1

    def bus(self, bus_id: int) -> Bus:
        return next(b for b in self.buses if b.id == bus_id)

    def profile(self, bus_id: int) -> FlexibilityProfile:
        return next(p for p in self.profiles if p.bus == bus_id)

    def aggregator_ids(self) -> list[int]:
        return sorted(set(self.aggregators.values()))

    def aggregator_buses(self, agg_id: int) -> list[int]:
        return sorted(n for n, a in self.aggregators.items() if a == agg_id)


def ancestor_map(instance: NetworkInstance) -> tuple[dict[int, int], dict[int, list[int]]]:
    """Parent map for non-root buses and children lists for every bus."""
    parent = {b.id: b.parent for b in instance.buses if not b.is_root}
    children: dict[int, list[int]] = {b.id: [] for b in instance.buses}
    for n, par in parent.items():
        children[par].append(n)
    for lst in children.values():
        lst.sort()
    return parent, children


# ---------------------------------------------------------------------------
# validation

def _validate(instance: NetworkInstance) -> NetworkInstance:
    roots = [b for b in instance.buses if b.is_root]
    if len(roots) != 1:
        raise InstanceError(f"expected exactly one root bus, found {len(roots)}")
    ids = [b.id for b in instance.buses]
    if len(set(ids)) != len(ids):
        raise InstanceError("duplicate bus ids")
    if instance.T < 1:
        raise InstanceError("horizon T must be >= 1")
    if len(instance.cost) != instance.T:
        raise InstanceError("root cost coefficients must cover every period")

    known = set(ids)
    for b in instance.buses:
        if b.is_root:
            continue
        if b.parent not in known:
            raise InstanceError(f"bus {b.id}: unknown parent {b.parent}")
        if b.R < 0 or b.X < 0:
            raise InstanceError(f"bus {b.id}: line R, X must be nonnegative")
        if b.S <= 0:
            raise InstanceError(f"bus {b.id}: flow limit S must be positive")
        if not (0 < b.v_min <= b.v_max):
            raise InstanceError(f"bus {b.id}: voltage bounds must satisfy 0 < v_min <= v_max")

    # acyclicity: walk every bus up to the root
    parent = {b.id: b.parent for b in instance.buses if not b.is_root}
    for n in parent:
        seen = {n}
        cur = n
        while cur != roots[0].id:
            cur = parent[cur]
            if cur in seen:
                raise InstanceError(f"cycle through bus {n}")
            seen.add(cur)

    prof_buses = sorted(p.bus for p in instance.profiles)
    grid_ids = sorted(b.id for b in instance.buses if not b.is_root)
    if prof_buses != grid_ids:
        raise InstanceError("profiles must cover exactly the non-root buses")
    for p in instance.profiles:
        if not (len(p.p_min) == len(p.p_max) == len(p.prod_max)
                == len(p.prod_ratio_min) == len(p.prod_ratio_max) == instance.T):
            raise InstanceError(f"bus {p.bus}: profile arrays must have length T={instance.T}")
        for t in range(instance.T):
            if p.p_min[t] > p.p_max[t]:
                raise InstanceError(f"bus {p.bus}: p_min > p_max at period {t}")
            if p.prod_max[t] < 0:
                raise InstanceError(f"bus {p.bus}: negative production cap at period {t}")
            if p.prod_ratio_min[t] > p.prod_ratio_max[t]:
                raise InstanceError(f"bus {p.bus}: production ratio bounds crossed at period {t}")
        if p.energy > sum(p.p_max) + 1e-12:
            raise InstanceError(
                f"bus {p.bus}: energy demand {p.energy} exceeds reachable "
                f"consumption {sum(p.p_max)}"
            )

    if sorted(instance.aggregators) != grid_ids:
        raise InstanceError("aggregator partition must cover exactly the non-root buses")
    return instance


def _default_partition(bus_ids: list[int]) -> dict[int, int]:
    # one aggregator per non-root bus
    return {n: i for i, n in enumerate(sorted(bus_ids))}


# ---------------------------------------------------------------------------
# JSON schema

def load_instance(source) -> NetworkInstance:
    """Load an instance from a JSON document (path, file object, or dict)."""
    if isinstance(source, dict):
        doc = source
    elif hasattr(source, "read"):
        doc = json.load(source)
    else:
        with open(source) as fh:
            doc = json.load(fh)

    try:
        T = int(doc["T"])
        v0 = float(doc["v0"])
        k_loss = float(doc["k_loss"])
        cost = tuple((float(c[0]), float(c[1])) for c in doc["cost"])
        buses = tuple(
            Bus(
                id=int(b["id"]),
                parent=None if b.get("parent") is None else int(b["parent"]),
                R=float(b.get("R", 0.0)),
                X=float(b.get("X", 0.0)),
                S=float(b.get("S", 0.0)),
                B=float(b.get("B", 0.0)),
                g=float(b.get("g", 0.0)),
                v_min=float(b.get("v_min", 0.0)),
                v_max=float(b.get("v_max", 0.0)),
            )
            for b in doc["buses"]
        )
        profiles = tuple(
            FlexibilityProfile(
                bus=int(p["bus"]),
                p_min=tuple(map(float, p["p_min"])),
                p_max=tuple(map(float, p["p_max"])),
                energy=float(p["energy"]),
                tau=float(p["tau"]),
                prod_max=tuple(map(float, p.get("prod_max", [0.0] * T))),
                prod_ratio_min=tuple(map(float, p.get("prod_ratio_min", [0.0] * T))),
                prod_ratio_max=tuple(map(float, p.get("prod_ratio_max", [0.0] * T))),
            )
            for p in doc["profiles"]
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise InstanceError(f"malformed instance document: {exc!r}") from exc

    grid_ids = [b.id for b in buses if not b.is_root]
    aggs = doc.get("aggregators")
    if aggs is None:
        partition = _default_partition(grid_ids)
    else:
        partition = {int(n): int(a) for n, a in aggs.items()}
    return _validate(NetworkInstance(buses, profiles, T, v0, k_loss, cost, partition))


def serialize_instance(instance: NetworkInstance) -> dict:
    """Dict form of an instance; load_instance(serialize_instance(i)) == i."""
    return {
        "T": instance.T,
        "v0": instance.v0,
        "k_loss": instance.k_loss,
        "cost": [list(c) for c in instance.cost],
        "buses": [
            {k: v for k, v in asdict(b).items() if not (k == "parent" and v is None)}
            for b in instance.buses
        ],
        "profiles": [
            {
                "bus": p.bus,
                "p_min": list(p.p_min),
                "p_max": list(p.p_max),
                "energy": p.energy,
                "tau": p.tau,
                "prod_max": list(p.prod_max),
                "prod_ratio_min": list(p.prod_ratio_min),
                "prod_ratio_max": list(p.prod_ratio_max),
            }
            for p in instance.profiles
        ],
        "aggregators": {str(n): a for n, a in sorted(instance.aggregators.items())},
    }


# ---------------------------------------------------------------------------
# CSV importer for the benchmark parameter-table layout

def import_table_csv(source, *, edges, T, v0, v_min, v_max, k_loss, cost,
                     prod_max=None, prod_ratio=None, aggregators=None) -> NetworkInstance:
    """Build an instance from a parameter table in the benchmark layout.

    Columns: n, S, R*1e3, X*1e3, B*1e3, p_min, p_max, E, tau, where p_min and
    p_max cells hold bracketed per-period lists.  The table does not carry
    topology, voltage bounds, production data, or cost data, so those come in
    as keyword arguments (``edges`` is a list of (parent, child) pairs,
    ``prod_max``/``prod_ratio`` map bus id to per-period arrays).
    """
    if hasattr(source, "read"):
        rows = list(csv.reader(source))
    else:
        with open(source, newline="") as fh:
            rows = list(csv.reader(fh))
    rows = [r for r in rows if r and not r[0].lstrip().startswith("#")]
    header = [c.strip().lower() for c in rows[0]]
    if header[0] != "n":
        raise InstanceError("first column of the parameter table must be 'n'")

    def _list_cell(cell: str) -> tuple[float, ...]:
        flat = cell.replace("[", "").replace("]", "").replace(";", ",")
        return tuple(float(v) for v in flat.split(",") if v.strip())

    parent = {child: par for par, child in edges}
    prod_max = prod_max or {}
    prod_ratio = prod_ratio or {}
    zero = tuple(0.0 for _ in range(T))

    buses = [Bus(id=ROOT)]
    profiles = []
    for r in rows[1:]:
        n = int(r[0])
        buses.append(Bus(
            id=n, parent=parent[n],
            S=float(r[1]), R=float(r[2]) * 1e-3, X=float(r[3]) * 1e-3,
            B=float(r[4]) * 1e-3, v_min=v_min, v_max=v_max,
        ))
        lo, hi = _list_cell(r[5]), _list_cell(r[6])
        rat = prod_ratio.get(n, (zero, zero))
        profiles.append(FlexibilityProfile(
            bus=n, p_min=lo, p_max=hi, energy=float(r[7]), tau=float(r[8]),
            prod_max=tuple(prod_max.get(n, zero)),
            prod_ratio_min=tuple(rat[0]), prod_ratio_max=tuple(rat[1]),
        ))

    grid_ids = [b.id for b in buses if not b.is_root]
    partition = dict(aggregators) if aggregators else _default_partition(grid_ids)
    return _validate(NetworkInstance(
        tuple(buses), tuple(profiles), T, v0, k_loss,
        tuple((float(a), float(b)) for a, b in cost), partition,
    ))


# ---------------------------------------------------------------------------
# bundled benchmark fixture and random instances

def fifteen_bus() -> NetworkInstance:
    """The bundled 15-bus (root + 14) two-period benchmark network."""
    from importlib.resources import files

    data = files("dlmpsim.fixtures").joinpath("fifteen_bus.json").read_text()
    return load_instance(json.loads(data))


def random_instance(n_buses: int, T: int = 2, seed: int = 0,
                    producers: int = 1) -> NetworkInstance:
    """Small random radial instance for tests and demos."""
    rng = np.random.default_rng(seed)
    buses = [Bus(id=ROOT)]
    for n in range(1, n_buses + 1):
        par = int(rng.integers(0, n))
        buses.append(Bus(
            id=n, parent=par,
            R=float(rng.uniform(0.005, 0.08)), X=float(rng.uniform(0.01, 0.12)),
            S=float(rng.uniform(0.6, 2.0)), B=float(rng.uniform(0.0, 0.002)),
            v_min=0.81, v_max=1.21,
        ))
    prod_buses = set(rng.choice(np.arange(1, n_buses + 1), size=min(producers, n_buses),
                                replace=False).tolist())
    profiles = []
    for n in range(1, n_buses + 1):
        hi = rng.uniform(0.05, 0.5, size=T)
        lo = hi * rng.uniform(0.1, 0.6, size=T)
        energy = float(rng.uniform(0.8, 0.99) * hi.sum())
        pm = rng.uniform(0.1, 0.4, size=T) if n in prod_buses else np.zeros(T)
        rhi = rng.uniform(0.0, 0.3, size=T) if n in prod_buses else np.zeros(T)
        profiles.append(FlexibilityProfile(
            bus=n, p_min=tuple(lo), p_max=tuple(hi), energy=energy,
            tau=float(rng.uniform(0.0, 0.5)),
            prod_max=tuple(pm), prod_ratio_min=tuple(-rhi), prod_ratio_max=tuple(rhi),
        ))
    cost = tuple((float(rng.uniform(1.0, 2.5)), float(rng.uniform(0.2, 1.0)))
                 for _ in range(T))
    ids = list(range(1, n_buses + 1))
    return _validate(NetworkInstance(
        tuple(buses), tuple(profiles), T, 1.0, 0.001, cost, _default_partition(ids),
    ))
