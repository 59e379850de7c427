"""Radial feeder model and DistFlow power flow.

Quantities are per-unit. Injections ``p``/``q`` are indexed by non-slack bus
(bus ids 1..n-1) and are consumption-positive. Per-line arrays follow the
order of ``RadialNetwork.lines``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

FORMAT_TAG = "convexvolt-network"
FORMAT_VERSION = 1


class NetworkError(ValueError):
    """Invalid network description."""


class NetworkFormatError(NetworkError):
    pass


class CycleError(NetworkError):
    pass


class PowerFlowDivergence(RuntimeError):
    """A squared voltage dropped to zero or below during the sweep."""


@dataclass(frozen=True)
class Bus:
    id: int
    parent: Optional[int]
    base_load_p: float = 0.0
    base_load_q: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float


@dataclass(frozen=True, eq=False)
class RadialNetwork:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    slack_voltage_sq: float = 1.0
    name: str = "network"
    # derived topology, filled in __post_init__
    order: np.ndarray = field(init=False, repr=False)
    parent: np.ndarray = field(init=False, repr=False)
    line_of_bus: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(sorted(self.buses, key=lambda b: b.id)))
        object.__setattr__(self, "lines", tuple(self.lines))
        _validate(self)
        n = len(self.buses)
        parent = np.full(n, -1, dtype=int)
        for bus in self.buses:
            if bus.parent is not None:
                parent[bus.id] = bus.parent
        line_of_bus = np.full(n, -1, dtype=int)
        for k, line in enumerate(self.lines):
            line_of_bus[line.to_bus] = k
        children: list[list[int]] = [[] for _ in range(n)]
        for j in range(1, n):
            children[parent[j]].append(j)
        order = [0]
        for j in order:
            order.extend(children[j])
        for arr in (parent, line_of_bus):
            arr.setflags(write=False)
        order_arr = np.array(order, dtype=int)
        order_arr.setflags(write=False)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "line_of_bus", line_of_bus)
        object.__setattr__(self, "order", order_arr)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_loads(self) -> int:
        """Number of non-slack buses, i.e. the length of p and q."""
        return len(self.buses) - 1

    @property
    def base_p(self) -> np.ndarray:
        return np.array([b.base_load_p for b in self.buses[1:]])

    @property
    def base_q(self) -> np.ndarray:
        return np.array([b.base_load_q for b in self.buses[1:]])

    def line_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(from, to, r, x) as arrays in line order."""
        frm = np.array([ln.from_bus for ln in self.lines], dtype=int)
        to = np.array([ln.to_bus for ln in self.lines], dtype=int)
        r = np.array([ln.r for ln in self.lines], dtype=float)
        x = np.array([ln.x for ln in self.lines], dtype=float)
        return frm, to, r, x


def _validate(net: RadialNetwork) -> None:
    buses, lines = net.buses, net.lines
    n = len(buses)
    if n < 1:
        raise NetworkError("network has no buses")
    ids = [b.id for b in buses]
    if len(set(ids)) != n:
        raise NetworkError("duplicate bus ids")
    if ids != list(range(n)):
        raise NetworkError("bus ids must form the range 0..n-1")
    slacks = [b.id for b in buses if b.parent is None]
    if len(slacks) != 1:
        raise NetworkError(f"expected exactly one slack bus, found {len(slacks)}")
    if slacks[0] != 0:
        raise NetworkError("slack bus must have id 0")
    if not net.slack_voltage_sq > 0:
        raise NetworkError("slack_voltage_sq must be positive")

    # union-find over lines catches cycles regardless of the parent fields
    root = list(range(n))

    def find(a: int) -> int:
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    for line in lines:
        if not (0 <= line.from_bus < n and 0 <= line.to_bus < n):
            raise NetworkError(f"line {line.from_bus}-{line.to_bus} references unknown bus")
        if line.r < 0 or line.x < 0 or (line.r == 0 and line.x == 0):
            raise NetworkError(f"line {line.from_bus}-{line.to_bus}: need r, x >= 0, not both 0")
        a, b = find(line.from_bus), find(line.to_bus)
        if a == b:
            raise CycleError(f"line {line.from_bus}-{line.to_bus} closes a cycle")
        root[a] = b

    for bus in buses:
        if bus.parent is not None and not 0 <= bus.parent < n:
            raise NetworkError(f"bus {bus.id} has unknown parent {bus.parent}")
    for bus in buses:
        seen = set()
        j = bus.id
        while buses[j].parent is not None:
            if j in seen:
                raise CycleError(f"parent chain from bus {bus.id} loops")
            seen.add(j)
            j = buses[j].parent

    if len(lines) != n - 1:
        raise NetworkError(f"{n} buses need {n - 1} lines, got {len(lines)}")
    fed = set()
    for line in lines:
        if buses[line.to_bus].parent != line.from_bus:
            raise NetworkError(
                f"line {line.from_bus}-{line.to_bus} disagrees with parent of bus {line.to_bus}"
            )
        fed.add(line.to_bus)
    if fed != set(range(1, n)):
        raise NetworkError("every non-slack bus needs exactly one feeding line")


# ---------------------------------------------------------------------------
# file I/O


def load_network(path) -> RadialNetwork:
    """Read a network from the line-oriented text format or its JSON twin."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return _from_json(text)
    return _from_text(text, default_name=Path(path).stem)


def save_network(net: RadialNetwork, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "text")
    if fmt == "json":
        path.write_text(network_to_json(net))
    elif fmt == "text":
        path.write_text(network_to_text(net))
    else:
        raise ValueError(f"unknown network format {fmt!r}")


def network_to_text(net: RadialNetwork) -> str:
    out = [
        f"{FORMAT_TAG} {FORMAT_VERSION}",
        f"name {net.name}",
        f"buses {net.n_buses}",
        f"slack_voltage_sq {net.slack_voltage_sq!r}",
    ]
    for b in net.buses:
        parent = "-" if b.parent is None else str(b.parent)
        out.append(f"bus {b.id} {parent} {b.base_load_p!r} {b.base_load_q!r}")
    for ln in net.lines:
        out.append(f"line {ln.from_bus} {ln.to_bus} {ln.r!r} {ln.x!r}")
    return "\n".join(out) + "\n"


def network_to_json(net: RadialNetwork) -> str:
    doc = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "name": net.name,
        "n_buses": net.n_buses,
        "slack_voltage_sq": net.slack_voltage_sq,
        "buses": [
            {"id": b.id, "parent": b.parent, "base_load_p": b.base_load_p,
             "base_load_q": b.base_load_q}
            for b in net.buses
        ],
        "lines": [
            {"from_bus": ln.from_bus, "to_bus": ln.to_bus, "r": ln.r, "x": ln.x}
            for ln in net.lines
        ],
    }
    return json.dumps(doc, indent=1) + "\n"


def _from_json(text: str) -> RadialNetwork:
    try:
        doc = json.loads(text)
        buses = [
            Bus(int(b["id"]), None if b["parent"] is None else int(b["parent"]),
                float(b.get("base_load_p", 0.0)), float(b.get("base_load_q", 0.0)))
            for b in doc["buses"]
        ]
        lines = [
            Line(int(ln["from_bus"]), int(ln["to_bus"]), float(ln["r"]), float(ln["x"]))
            for ln in doc["lines"]
        ]
        slack = float(doc.get("slack_voltage_sq", 1.0))
        name = str(doc.get("name", "network"))
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"bad network JSON: {exc}") from exc
    if "n_buses" in doc and doc["n_buses"] != len(buses):
        raise NetworkFormatError(f"header declares {doc['n_buses']} buses, found {len(buses)}")
    return RadialNetwork(buses, lines, slack, name)


def _from_text(text: str, default_name: str = "network") -> RadialNetwork:
    n_declared = None
    slack = 1.0
    name = default_name
    buses: list[Bus] = []
    lines: list[Line] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        row = raw.split("#", 1)[0].split()
        if not row:
            continue
        key, args = row[0], row[1:]
        try:
            if key == FORMAT_TAG:
                if int(args[0]) != FORMAT_VERSION:
                    raise NetworkFormatError(f"unsupported version {args[0]}")
            elif key == "name":
                name = " ".join(args)
            elif key == "buses":
                n_declared = int(args[0])
            elif key == "slack_voltage_sq":
                slack = float(args[0])
            elif key == "bus":
                bid, parent, p, q = args
                buses.append(Bus(int(bid), None if parent == "-" else int(parent),
                                 float(p), float(q)))
            elif key == "line":
                a, b, r, x = args
                lines.append(Line(int(a), int(b), float(r), float(x)))
            else:
                raise NetworkFormatError(f"unknown record {key!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, NetworkFormatError):
                raise NetworkFormatError(f"line {lineno}: {exc}") from None
            raise NetworkFormatError(f"line {lineno}: cannot parse {raw.strip()!r}") from exc
    if n_declared is None:
        raise NetworkFormatError("missing 'buses' header")
    if n_declared != len(buses):
        raise NetworkFormatError(f"header declares {n_declared} buses, found {len(buses)}")
    return RadialNetwork(buses, lines, slack, name)


# ---------------------------------------------------------------------------
# power flow


@dataclass
class PowerFlowSolution:
    v: np.ndarray
    flow_p: np.ndarray
    flow_q: np.ndarray
    l: np.ndarray  # noqa: E741 - matches the branch-flow symbol
    converged: bool
    iterations: int
    max_residual: float = float("nan")


@dataclass
class ResidualReport:
    power_p: float  # sending-end real power balance
    power_q: float  # sending-end reactive power balance
    voltage: float  # voltage drop along each line
    current: float  # squared current definition
    relaxation_slack: np.ndarray  # l - (P^2 + Q^2) / v_from per line

    @property
    def max_residual(self) -> float:
        return max(self.power_p, self.power_q, self.voltage, self.current)

    def relaxation_holds(self, tol: float = 1e-8) -> bool:
        return bool(np.all(self.relaxation_slack >= -tol))


def _check_injections(net: RadialNetwork, p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    m = net.n_loads
    if p.shape != (m,) or q.shape != (m,):
        raise ValueError(f"p and q need shape ({m},), got {p.shape} and {q.shape}")
    return p, q


def solve_distflow(net: RadialNetwork, p, q, tol: float = 1e-8,
                   max_iter: int = 100) -> PowerFlowSolution:
    """Backward/forward sweep on the DistFlow equations.

    The squared currents are lagged by one iteration: the backward pass uses
    the previous ``l`` to accumulate line flows, the forward pass propagates
    squared voltages, then ``l`` is refreshed from the new flows. Stops once
    the largest change in both ``v`` and ``l`` falls below ``tol``; the
    returned ``l`` is the one the returned flows were built from.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p, q = _check_injections(net, p, q)
    n = net.n_buses
    parent, order, line_of = net.parent, net.order, net.line_of_bus
    _, _, r_line, x_line = net.line_arrays()
    # per-bus copies of the feeding line's impedance (index 0 unused)
    r = np.zeros(n)
    x = np.zeros(n)
    r[1:] = r_line[line_of[1:]]
    x[1:] = x_line[line_of[1:]]
    z2 = r * r + x * x
    p_bus = np.concatenate(([0.0], p))
    q_bus = np.concatenate(([0.0], q))

    v = np.full(n, float(net.slack_voltage_sq))
    l_bus = np.zeros(n)
    P = np.zeros(n)
    Q = np.zeros(n)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        P[:] = p_bus + r * l_bus
        Q[:] = q_bus + x * l_bus
        for j in order[:0:-1]:
            i = parent[j]
            if i != 0:
                P[i] += P[j]
                Q[i] += Q[j]
        v_new = v.copy()
        for j in order[1:]:
            i = parent[j]
            v_new[j] = v_new[i] - 2.0 * (r[j] * P[j] + x[j] * Q[j]) + z2[j] * l_bus[j]
            if v_new[j] <= 0:
                raise PowerFlowDivergence(f"v at bus {j} became {v_new[j]:.3g} at iteration {it}")
        l_new = l_bus.copy()
        l_new[1:] = (P[1:] ** 2 + Q[1:] ** 2) / v_new[parent[1:]]
        delta = np.max(np.abs(v_new - v)) if n > 1 else 0.0
        delta_l = np.max(np.abs(l_new - l_bus)) if n > 1 else 0.0
        v = v_new
        if delta < tol and delta_l < tol:
            converged = True
            break
        l_bus = l_new

    m = len(net.lines)
    flow_p = np.empty(m)
    flow_q = np.empty(m)
    l_out = np.empty(m)
    flow_p[line_of[1:]] = P[1:]
    flow_q[line_of[1:]] = Q[1:]
    l_out[line_of[1:]] = l_bus[1:]
    sol = PowerFlowSolution(v=v, flow_p=flow_p, flow_q=flow_q, l=l_out,
                            converged=converged, iterations=it)
    sol.max_residual = verify_solution(net, p, q, sol).max_residual
    return sol


def verify_solution(net: RadialNetwork, p, q, sol: PowerFlowSolution) -> ResidualReport:
    """Largest absolute violation of each DistFlow equation family."""
    p, q = _check_injections(net, p, q)
    m = len(net.lines)
    if sol.v.shape != (net.n_buses,) or any(a.shape != (m,) for a in (sol.flow_p, sol.flow_q, sol.l)):
        raise ValueError("solution dimensions do not match the network")
    frm, to, r, x = net.line_arrays()
    P, Q, l_ = sol.flow_p, sol.flow_q, sol.l
    # downstream sums of flows leaving each receiving bus
    down_p = np.zeros(net.n_buses)
    down_q = np.zeros(net.n_buses)
    np.add.at(down_p, frm, P)
    np.add.at(down_q, frm, Q)
    res_p = P - (down_p[to] + r * l_ + p[to - 1])
    res_q = Q - (down_q[to] + x * l_ + q[to - 1])
    res_v = sol.v[to] - (sol.v[frm] - 2 * (r * P + x * Q) + (r * r + x * x) * l_)
    cone = (P * P + Q * Q) / sol.v[frm]
    res_l = l_ - cone

    def worst(a):
        return float(np.max(np.abs(a))) if a.size else 0.0

    return ResidualReport(worst(res_p), worst(res_q), worst(res_v), worst(res_l),
                          relaxation_slack=res_l)


def voltage_magnitudes(sol: PowerFlowSolution) -> np.ndarray:
    v = np.asarray(sol.v if isinstance(sol, PowerFlowSolution) else sol, dtype=float)
    if np.any(v < 0):
        raise ValueError("negative squared voltage")
    return np.sqrt(v)
