"""Discrete-time microservice mesh simulator.

Maps (CPU allocation, workload) to an end-to-end p95 latency figure plus
per-service utilization and CPU-throttling metrics. Each service is an
M/M/1-shaped station: latency grows as offered load approaches the
allocated capacity, with a hard saturation cap so reductions past
saturation cannot lower latency. Call edges are grouped either
sequentially (child latencies add) or in parallel (child latencies max),
and the end-to-end value is the critical-path aggregate from the root.

The p95 statistic is modeled analytically as the deterministic mesh
latency times a mean-one lognormal factor, so sigma=0 recovers the exact
analytic value and the model stays monotone in expectation: shrinking
any allocation never decreases the noise-free latency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

RHO_SAT = 0.99
DEFAULT_QUANTUM = 0.1
DEFAULT_FLOOR = 0.1
DEFAULT_THROTTLE_KNEE = 0.8
DEFAULT_THROTTLE_GAIN = 10.0
DEFAULT_INTERVAL_S = 120.0
# Calibrated so that random monotonic reductions measure a latency *decrease*
# (pure sampling noise) roughly 10% of the time; see the noise-calibration test.
DEFAULT_NOISE_SIGMA = 0.04

_SEED_MASK = 0xFFFFFFFFFFFFFFFF


class ScenarioError(ValueError):
    """Raised for malformed scenario definitions or scenario files."""


# ---------------------------------------------------------------------------
# allocation helpers


def quantize(value: float, quantum: float = DEFAULT_QUANTUM) -> float:
    """Snap to the nearest allocation step, halves rounding up."""
    return math.floor(value / quantum + 0.5 + 1e-9) * quantum


def quantize_up(value: float, quantum: float = DEFAULT_QUANTUM) -> float:
    """Snap to the next allocation step at or above ``value``."""
    return math.ceil(value / quantum - 1e-9) * quantum


def validate_allocation(
    x,
    n_services: int,
    floor: float = DEFAULT_FLOOR,
    quantum: float = DEFAULT_QUANTUM,
) -> np.ndarray:
    """Check an allocation vector: length, floor, and exact quantization."""
    x = np.asarray(x, dtype=float)
    if x.shape != (n_services,):
        raise ValueError(f"allocation has shape {x.shape}, expected ({n_services},)")
    for i, xi in enumerate(x):
        if not math.isfinite(xi):
            raise ValueError(f"allocation[{i}] is not finite")
        if xi < floor - 1e-12:
            raise ValueError(f"allocation[{i}]={xi} below floor {floor}")
        if xi != quantize(xi, quantum):
            raise ValueError(f"allocation[{i}]={xi} not on the {quantum}-core grid")
    return x


def ample_allocation(
    scenario: "Scenario",
    lam: float,
    headroom: float = 2.0,
    floor: float = DEFAULT_FLOOR,
    quantum: float = DEFAULT_QUANTUM,
) -> np.ndarray:
    """Generous starting allocation: ``headroom`` times each service's raw demand."""
    demand = lam * scenario.visit_vector * scenario.demand_vector
    return np.array([max(floor, quantize_up(headroom * d, quantum)) for d in demand])


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ServiceSpec:
    """Static parameters of one microservice."""

    name: str
    demand: float  # CPU-seconds of work per request
    base_latency_ms: float = 0.0
    visit_ratio: float = 1.0  # requests hitting this service per end-to-end request
    throttle_knee: float = DEFAULT_THROTTLE_KNEE  # load fraction where throttling starts
    throttle_gain: float = DEFAULT_THROTTLE_GAIN  # throttle-seconds per unit excess load

    def __post_init__(self):
        if self.demand <= 0:
            raise ScenarioError(f"service {self.name!r}: demand must be > 0")
        if self.base_latency_ms < 0:
            raise ScenarioError(f"service {self.name!r}: base_latency_ms must be >= 0")
        if self.visit_ratio < 0:
            raise ScenarioError(f"service {self.name!r}: visit_ratio must be >= 0")
        if not 0 < self.throttle_knee < 1:
            raise ScenarioError(f"service {self.name!r}: throttle_knee must be in (0,1)")
        if self.throttle_gain <= 0:
            raise ScenarioError(f"service {self.name!r}: throttle_gain must be > 0")


@dataclass(frozen=True)
class ChildGroup:
    """One group of downstream calls made by ``parent``.

    ``sequential`` children contribute the sum of their subtree latencies,
    ``parallel`` children contribute only the slowest subtree.
    """

    parent: int
    children: tuple[int, ...]
    mode: str  # "sequential" | "parallel"


@dataclass
class Scenario:
    """A simulated service mesh: specs, call graph, and noise model."""

    services: tuple[ServiceSpec, ...]
    edges: tuple[ChildGroup, ...] = ()
    root: int = 0
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    rng_seed: int = 0

    demand_vector: np.ndarray = field(init=False, repr=False, compare=False)
    visit_vector: np.ndarray = field(init=False, repr=False, compare=False)
    base_vector: np.ndarray = field(init=False, repr=False, compare=False)
    knee_vector: np.ndarray = field(init=False, repr=False, compare=False)
    gain_vector: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.services = tuple(self.services)
        self.edges = tuple(self.edges)
        n = len(self.services)
        if n < 1:
            raise ScenarioError("scenario needs at least one service")
        if not 0 <= self.root < n:
            raise ScenarioError(f"root index {self.root} out of range")
        if self.noise_sigma < 0:
            raise ScenarioError("noise_sigma must be >= 0")
        names = [s.name for s in self.services]
        if len(set(names)) != n:
            raise ScenarioError("service names must be unique")
        groups: dict[int, list[ChildGroup]] = {i: [] for i in range(n)}
        for g in self.edges:
            if not 0 <= g.parent < n:
                raise ScenarioError(f"edge parent index {g.parent} out of range")
            if not g.children:
                raise ScenarioError("edge group must list at least one child")
            for c in g.children:
                if not 0 <= c < n:
                    raise ScenarioError(f"edge child index {c} out of range")
            if g.mode not in ("sequential", "parallel"):
                raise ScenarioError(f"edge mode {g.mode!r} invalid")
            groups[g.parent].append(g)
        self._groups = groups
        self._check_graph()
        self.demand_vector = np.array([s.demand for s in self.services])
        self.visit_vector = np.array([s.visit_ratio for s in self.services])
        self.base_vector = np.array([s.base_latency_ms for s in self.services])
        self.knee_vector = np.array([s.throttle_knee for s in self.services])
        self.gain_vector = np.array([s.throttle_gain for s in self.services])

    def _check_graph(self):
        n = len(self.services)
        # cycle detection over the full edge set
        state = [0] * n  # 0 unvisited, 1 on stack, 2 done
        for start in range(n):
            if state[start]:
                continue
            stack = [(start, iter(self._child_indices(start)))]
            state[start] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[node] = 2
                    stack.pop()
                elif state[nxt] == 1:
                    raise ScenarioError("call graph contains a cycle")
                elif state[nxt] == 0:
                    state[nxt] = 1
                    stack.append((nxt, iter(self._child_indices(nxt))))
        # reachability from the root
        seen = {self.root}
        todo = [self.root]
        while todo:
            node = todo.pop()
            for c in self._child_indices(node):
                if c not in seen:
                    seen.add(c)
                    todo.append(c)
        if len(seen) != n:
            missing = [self.services[i].name for i in range(n) if i not in seen]
            raise ScenarioError(f"services unreachable from root: {missing}")

    def _child_indices(self, parent: int):
        for g in self._groups[parent]:
            yield from g.children

    @property
    def n_services(self) -> int:
        return len(self.services)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.services)

    def child_groups(self, parent: int) -> list[ChildGroup]:
        return self._groups[parent]

    def with_noise(self, sigma: float) -> "Scenario":
        return replace(self, noise_sigma=sigma)

    def index_of(self, name: str) -> int:
        for i, s in enumerate(self.services):
            if s.name == name:
                return i
        raise KeyError(name)


@dataclass(frozen=True)
class MetricsSample:
    """One interval's observation of the running mesh."""

    t: int
    r: float  # p95 end-to-end latency, ms
    u: tuple[float, ...]  # per-service utilization, fraction of allocation
    h: tuple[float, ...]  # per-service CPU throttling time, seconds per interval
    lam: float  # workload, requests per second

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("latency must be > 0")
        if len(self.u) != len(self.h):
            raise ValueError("u and h must have equal length")
        if any(not 0.0 <= ui <= 1.0 for ui in self.u):
            raise ValueError("utilization out of [0, 1]")
        if any(hi < 0.0 for hi in self.h):
            raise ValueError("throttle time must be >= 0")


# ---------------------------------------------------------------------------
# per-service model


def per_service_load(spec: ServiceSpec, x_i: float, lam: float) -> float:
    """Offered load fraction: demanded CPU over allocated CPU (may exceed 1)."""
    if x_i <= 0:
        raise ValueError("allocation must be > 0")
    if lam < 0:
        raise ValueError("workload must be >= 0")
    return lam * spec.visit_ratio * spec.demand / x_i


def per_service_latency(spec: ServiceSpec, rho_i: float) -> float:
    """Queueing latency in ms, strictly increasing in load up to saturation."""
    if rho_i < 0:
        raise ValueError("load must be >= 0")
    return spec.base_latency_ms + 1000.0 * spec.demand / (1.0 - min(rho_i, RHO_SAT))


def per_service_throttle(spec: ServiceSpec, rho_i: float, interval_s: float = DEFAULT_INTERVAL_S) -> float:
    """Throttle-seconds this interval; zero below the knee, capped at the interval."""
    if rho_i < 0:
        raise ValueError("load must be >= 0")
    raw = spec.throttle_gain * max(0.0, rho_i - spec.throttle_knee) * interval_s
    return min(raw, interval_s)


def end_to_end_latency(scenario: Scenario, per_service: "np.ndarray | list[float]") -> float:
    """Critical-path aggregate of per-service latencies from the root.

    Node value = own latency + sum over sequential child groups of their
    children's subtree values + for each parallel group, the max child
    subtree value.
    """
    lat = np.asarray(per_service, dtype=float)
    if lat.shape != (scenario.n_services,):
        raise ValueError("per_service latency vector has wrong length")
    memo: dict[int, float] = {}

    def value(node: int) -> float:
        if node in memo:
            return memo[node]
        total = float(lat[node])
        for g in scenario.child_groups(node):
            vals = [value(c) for c in g.children]
            total += sum(vals) if g.mode == "sequential" else max(vals)
        memo[node] = total
        return total

    return value(scenario.root)


def evaluate(
    scenario: Scenario,
    x,
    lam: float,
    interval_s: float = DEFAULT_INTERVAL_S,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Noise-free model evaluation: (end-to-end ms, utilizations, throttle times)."""
    x = np.asarray(x, dtype=float)
    rho = lam * scenario.visit_vector * scenario.demand_vector / x
    u = np.minimum(rho, 1.0)
    h = np.minimum(
        scenario.gain_vector * np.maximum(0.0, rho - scenario.knee_vector) * interval_s,
        interval_s,
    )
    lat = scenario.base_vector + 1000.0 * scenario.demand_vector / (1.0 - np.minimum(rho, RHO_SAT))
    r = end_to_end_latency(scenario, lat)
    return r, u, h


def step(
    scenario: Scenario,
    x,
    lam: float,
    t: int,
    interval_s: float = DEFAULT_INTERVAL_S,
) -> MetricsSample:
    """Simulate one interval; deterministic given (scenario seed, t, x, lam).

    The noise factor exp(sigma*z - sigma^2/2) has mean one, so sigma=0
    reproduces the analytic latency exactly.
    """
    if t < 0:
        raise ValueError("time step must be >= 0")
    r, u, h = evaluate(scenario, x, lam, interval_s)
    sigma = scenario.noise_sigma
    if sigma > 0:
        rng = np.random.default_rng([scenario.rng_seed & _SEED_MASK, int(t)])
        z = rng.standard_normal()
        r *= math.exp(sigma * z - 0.5 * sigma * sigma)
    return MetricsSample(
        t=int(t),
        r=float(r),
        u=tuple(float(v) for v in u),
        h=tuple(float(v) for v in h),
        lam=float(lam),
    )


# ---------------------------------------------------------------------------
# scenario files

_TOP_KEYS = {"services", "edges", "root", "noise_sigma", "seed"}
_SERVICE_KEYS = {"name", "demand", "base_latency_ms", "visit_ratio", "throttle_knee", "throttle_gain"}
_SERVICE_REQUIRED = {"name", "demand"}
_EDGE_KEYS = {"parent", "children", "mode"}


def parse_scenario(doc: dict) -> Scenario:
    """Build a Scenario from a parsed scenario document; unknown keys rejected."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    if "services" not in doc or not doc["services"]:
        raise ScenarioError("scenario must define services[]")
    if "root" not in doc:
        raise ScenarioError("scenario must name its root service")

    services = []
    for entry in doc["services"]:
        if not isinstance(entry, dict):
            raise ScenarioError("each service must be a mapping")
        bad = set(entry) - _SERVICE_KEYS
        if bad:
            raise ScenarioError(f"unknown service keys: {sorted(bad)}")
        missing = _SERVICE_REQUIRED - set(entry)
        if missing:
            raise ScenarioError(f"service missing keys: {sorted(missing)}")
        services.append(
            ServiceSpec(
                name=str(entry["name"]),
                demand=float(entry["demand"]),
                base_latency_ms=float(entry.get("base_latency_ms", 0.0)),
                visit_ratio=float(entry.get("visit_ratio", 1.0)),
                throttle_knee=float(entry.get("throttle_knee", DEFAULT_THROTTLE_KNEE)),
                throttle_gain=float(entry.get("throttle_gain", DEFAULT_THROTTLE_GAIN)),
            )
        )
    index = {s.name: i for i, s in enumerate(services)}
    if len(index) != len(services):
        raise ScenarioError("service names must be unique")

    def lookup(name) -> int:
        if name not in index:
            raise ScenarioError(f"unknown service name {name!r}")
        return index[name]

    edges = []
    for entry in doc.get("edges", []) or []:
        if not isinstance(entry, dict):
            raise ScenarioError("each edge must be a mapping")
        bad = set(entry) - _EDGE_KEYS
        if bad:
            raise ScenarioError(f"unknown edge keys: {sorted(bad)}")
        if not {"parent", "children", "mode"} <= set(entry):
            raise ScenarioError("edge needs parent, children, and mode")
        edges.append(
            ChildGroup(
                parent=lookup(entry["parent"]),
                children=tuple(lookup(c) for c in entry["children"]),
                mode=str(entry["mode"]),
            )
        )

    return Scenario(
        services=tuple(services),
        edges=tuple(edges),
        root=lookup(doc["root"]),
        noise_sigma=float(doc.get("noise_sigma", DEFAULT_NOISE_SIGMA)),
        rng_seed=int(doc.get("seed", 0)),
    )


def scenario_to_dict(scenario: Scenario) -> dict:
    """Inverse of parse_scenario; stable key order for hashing and round-trips."""
    return {
        "services": [
            {
                "name": s.name,
                "demand": s.demand,
                "base_latency_ms": s.base_latency_ms,
                "visit_ratio": s.visit_ratio,
                "throttle_knee": s.throttle_knee,
                "throttle_gain": s.throttle_gain,
            }
            for s in scenario.services
        ],
        "edges": [
            {
                "parent": scenario.services[g.parent].name,
                "children": [scenario.services[c].name for c in g.children],
                "mode": g.mode,
            }
            for g in scenario.edges
        ],
        "root": scenario.services[scenario.root].name,
        "noise_sigma": scenario.noise_sigma,
        "seed": scenario.rng_seed,
    }


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"{path}: {exc}") from exc
    try:
        return parse_scenario(doc)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(scenario_to_dict(scenario), fh, sort_keys=False)
