"""Feeder representation, JSON ingestion and lateral reduction.

A feeder is a three-phase primary network (node 0 is the substation) plus
single- and two-phase service branches that each serve one load.  The
power-flow math only ever runs on the *reduced* network, in which every
loaded service branch has been folded into an equivalent load on its
primary node.

All quantities are per-unit on a per-phase base: ``base_voltage`` is the
line-to-neutral voltage and ``base_power`` the per-phase apparent power, so
the impedance base is ``base_voltage**2 / base_power``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONNECTION_CLASSES = ("single", "two", "three")


class FeederError(ValueError):
    """Raised for malformed or inconsistent feeder descriptions."""


@dataclass(frozen=True)
class LineSection:
    id: str
    from_node: int
    to_node: int
    z: np.ndarray  # 3x3 complex, pu


@dataclass(frozen=True)
class ServiceBranch:
    id: str
    kind: str  # "single" | "two"
    node: int | None  # upstream primary node
    z: complex | np.ndarray  # scalar (single) or 2x2 block (two), pu
    upstream_branch: str | None = None


@dataclass(frozen=True)
class Load:
    id: str
    conn_class: str
    node: int | None = None
    branch: str | None = None
    phase: str | None = None  # optional ground-truth label carried by fixtures


@dataclass(frozen=True)
class FeederModel:
    node_ids: tuple[str, ...]
    lines: tuple[LineSection, ...]
    service_branches: tuple[ServiceBranch, ...]
    loads: tuple[Load, ...]
    base_voltage: float
    base_power: float

    @property
    def n_nodes(self) -> int:
        """N, the number of non-substation nodes."""
        return len(self.node_ids) - 1

    @property
    def z_base(self) -> float:
        return self.base_voltage**2 / self.base_power

    def branch(self, branch_id: str) -> ServiceBranch:
        for b in self.service_branches:
            if b.id == branch_id:
                return b
        raise KeyError(branch_id)

    def has_cycle(self) -> bool:
        # connected graph with more edges than a spanning tree
        pairs = {frozenset((ln.from_node, ln.to_node)) for ln in self.lines}
        return len(pairs) > len(self.node_ids) - 1

    def truth(self) -> dict[str, str]:
        """Ground-truth phase labels embedded in the fixture, if any."""
        return {ld.id: ld.phase for ld in self.loads if ld.phase is not None}


@dataclass(frozen=True)
class ReducedLoad:
    id: str
    node: int
    conn_class: str
    branch_kind: str | None = None
    branch_z: complex | None = None  # z for single, z_sum for two-phase
    phase: str | None = None

    @property
    def is_secondary(self) -> bool:
        return self.branch_kind is not None


@dataclass(frozen=True)
class ReducedNetwork:
    node_ids: tuple[str, ...]
    lines: tuple[LineSection, ...]
    loads: tuple[ReducedLoad, ...]
    base_voltage: float
    base_power: float

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids) - 1

    @property
    def load_ids(self) -> tuple[str, ...]:
        return tuple(ld.id for ld in self.loads)

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(ld.conn_class for ld in self.loads)

    def subset(self, load_ids) -> ReducedNetwork:
        """Network restricted to the given loads (kept in network order)."""
        wanted = set(load_ids)
        unknown = wanted - set(self.load_ids)
        if unknown:
            raise FeederError(f"unknown load id(s): {sorted(unknown)}")
        loads = tuple(ld for ld in self.loads if ld.id in wanted)
        return ReducedNetwork(self.node_ids, self.lines, loads,
                              self.base_voltage, self.base_power)

    def truth(self) -> dict[str, str]:
        return {ld.id: ld.phase for ld in self.loads if ld.phase is not None}


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Phase-ordered nodal admittance matrix, ``3(N+1)`` square.

    Index ``p * (N + 1) + n`` addresses phase ``p`` of node ``n``.
    """

    Y: np.ndarray
    n_nodes: int = field(default=0)

    def block(self, i: int, j: int) -> np.ndarray:
        n = self.n_nodes + 1
        return self.Y[i * n:(i + 1) * n, j * n:(j + 1) * n]


# --------------------------------------------------------------------------
# parsing

def _complex(value, where: str) -> complex:
    if isinstance(value, (int, float)):
        out = complex(value)
    elif isinstance(value, (list, tuple)) and len(value) == 2:
        try:
            out = complex(float(value[0]), float(value[1]))
        except (TypeError, ValueError):
            raise FeederError(f"{where}: expected [re, im] numbers") from None
    else:
        raise FeederError(f"{where}: expected [re, im] pair, got {value!r}")
    if not np.isfinite(out.real) or not np.isfinite(out.imag):
        raise FeederError(f"{where}: nonfinite impedance")
    return out


def _complex_matrix(value, shape: int, where: str) -> np.ndarray:
    if not isinstance(value, (list, tuple)) or len(value) != shape:
        raise FeederError(f"{where}: expected {shape}x{shape} matrix of [re, im] pairs")
    out = np.empty((shape, shape), dtype=complex)
    for r, row in enumerate(value):
        if not isinstance(row, (list, tuple)) or len(row) != shape:
            raise FeederError(f"{where}: row {r} must have {shape} entries")
        for c, entry in enumerate(row):
            out[r, c] = _complex(entry, f"{where}[{r}][{c}]")
    return out


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict):
        raise FeederError(f"{where}: expected an object")
    if key not in obj:
        raise FeederError(f"{where}: missing field '{key}'")
    return obj[key]


def _impedance(entry: dict, shape: int | None, z_base: float, where: str):
    """Read ``z_ohm`` (converted) or ``z_pu`` (as is)."""
    if "z_ohm" in entry:
        raw, scale = entry["z_ohm"], 1.0 / z_base
        key = "z_ohm"
    elif "z_pu" in entry:
        raw, scale = entry["z_pu"], 1.0
        key = "z_pu"
    else:
        raise FeederError(f"{where}: missing field 'z_ohm'")
    if shape is None:
        return _complex(raw, f"{where}.{key}") * scale
    return _complex_matrix(raw, shape, f"{where}.{key}") * scale


def parse_feeder(text: str) -> FeederModel:
    """Parse and validate a feeder JSON document.

    Impedances given as ``z_ohm`` are converted to per-unit using the
    declared bases; ``z_pu`` is accepted verbatim.  The substation is the
    node named by the optional top-level ``"substation"`` field, otherwise
    the first entry of ``"nodes"``.

    Raises
    ------
    FeederError
        On schema violations, unknown or duplicate ids, nonfinite
        impedances, or a disconnected line graph.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FeederError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FeederError("feeder document must be a JSON object")

    base_v = _require(doc, "base_voltage_v", "feeder")
    base_s = _require(doc, "base_power_va", "feeder")
    for name, val in (("base_voltage_v", base_v), ("base_power_va", base_s)):
        if not isinstance(val, (int, float)) or not np.isfinite(val) or val <= 0:
            raise FeederError(f"feeder.{name}: must be a positive number")
    base_v, base_s = float(base_v), float(base_s)
    z_base = base_v**2 / base_s

    raw_nodes = _require(doc, "nodes", "feeder")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise FeederError("feeder.nodes: must be a non-empty list")
    node_ids = [str(_require(n, "id", f"nodes[{k}]")) for k, n in enumerate(raw_nodes)]
    if len(set(node_ids)) != len(node_ids):
        dup = sorted({n for n in node_ids if node_ids.count(n) > 1})
        raise FeederError(f"duplicate node id(s): {dup}")
    sub = str(doc.get("substation", node_ids[0]))
    if sub not in node_ids:
        raise FeederError(f"feeder.substation: unknown node '{sub}'")
    node_ids.remove(sub)
    node_ids.insert(0, sub)
    index = {nid: k for k, nid in enumerate(node_ids)}

    lines = []
    for k, entry in enumerate(doc.get("lines", [])):
        where = f"lines[{k}]"
        f = str(_require(entry, "from", where))
        t = str(_require(entry, "to", where))
        for end in (f, t):
            if end not in index:
                raise FeederError(f"{where}: unknown node '{end}'")
        if f == t:
            raise FeederError(f"{where}: line connects node '{f}' to itself")
        z = _impedance(entry, 3, z_base, where)
        lines.append(LineSection(str(entry.get("id", f"line{k}")), index[f], index[t], z))
    line_ids = [ln.id for ln in lines]
    if len(set(line_ids)) != len(line_ids):
        raise FeederError("duplicate line id")

    branches = []
    for k, entry in enumerate(doc.get("service_branches", [])):
        where = f"service_branches[{k}]"
        bid = str(_require(entry, "id", where))
        kind = _require(entry, "kind", where)
        if kind not in ("single", "two"):
            raise FeederError(f"{where}.kind: must be 'single' or 'two'")
        node = upstream = None
        if "node" in entry:
            if str(entry["node"]) not in index:
                raise FeederError(f"{where}: unknown node '{entry['node']}'")
            node = index[str(entry["node"])]
        elif "branch" in entry:
            upstream = str(entry["branch"])
        else:
            raise FeederError(f"{where}: missing field 'node'")
        z = _impedance(entry, None if kind == "single" else 2, z_base, where)
        branches.append(ServiceBranch(bid, kind, node, z, upstream))
    branch_ids = [b.id for b in branches]
    if len(set(branch_ids)) != len(branch_ids):
        raise FeederError("duplicate service branch id")
    for b in branches:
        if b.upstream_branch is not None and b.upstream_branch not in branch_ids:
            raise FeederError(f"service branch '{b.id}': unknown branch '{b.upstream_branch}'")
    kinds = {b.id: b.kind for b in branches}

    loads = []
    for k, entry in enumerate(_require(doc, "loads", "feeder")):
        where = f"loads[{k}]"
        lid = str(_require(entry, "id", where))
        cls = _require(entry, "class", where)
        if cls not in CONNECTION_CLASSES:
            raise FeederError(f"{where}.class: must be one of {CONNECTION_CLASSES}")
        has_node, has_branch = "node" in entry, "branch" in entry
        if has_node == has_branch:
            raise FeederError(f"{where}: exactly one of 'node' or 'branch' is required")
        phase = entry.get("phase")
        if phase is not None:
            phase = str(phase).upper()
            from .connection import phase_index  # local: avoid import cycle
            phase_index(cls, phase)
        if has_node:
            if str(entry["node"]) not in index:
                raise FeederError(f"{where}: unknown node '{entry['node']}'")
            if index[str(entry["node"])] == 0:
                raise FeederError(f"{where}: loads cannot attach to the substation")
            loads.append(Load(lid, cls, node=index[str(entry["node"])], phase=phase))
        else:
            bid = str(entry["branch"])
            if bid not in kinds:
                raise FeederError(f"{where}: unknown branch '{bid}'")
            if kinds[bid] != cls:
                raise FeederError(
                    f"{where}: class '{cls}' does not match {kinds[bid]}-phase branch '{bid}'")
            loads.append(Load(lid, cls, branch=bid, phase=phase))
    load_ids = [ld.id for ld in loads]
    if len(set(load_ids)) != len(load_ids):
        dup = sorted({x for x in load_ids if load_ids.count(x) > 1})
        raise FeederError(f"duplicate load id(s): {dup}")

    _check_connected(len(node_ids), lines, node_ids)
    return FeederModel(tuple(node_ids), tuple(lines), tuple(branches), tuple(loads),
                       base_v, base_s)


def _check_connected(n_total: int, lines, node_ids) -> None:
    adj = [[] for _ in range(n_total)]
    for ln in lines:
        adj[ln.from_node].append(ln.to_node)
        adj[ln.to_node].append(ln.from_node)
    seen = {0}
    queue = deque([0])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    if len(seen) != n_total:
        missing = [node_ids[k] for k in range(n_total) if k not in seen]
        raise FeederError(f"disconnected graph: unreachable node(s) {missing}")


def load_feeder(path) -> FeederModel:
    return parse_feeder(Path(path).read_text())


# --------------------------------------------------------------------------
# reduction of loaded laterals

def _current_and_angle(S, v_mag):
    v_mag = np.asarray(v_mag, dtype=float)
    if np.any(v_mag <= 0):
        raise ValueError("voltage magnitude must be positive")
    S = np.asarray(S, dtype=complex)
    return np.abs(S) / v_mag, np.angle(S)


def reduce_single_phase_branch(z, S, v_mag):
    """Fold a single-phase lateral into its upstream primary port.

    Works elementwise on arrays, so whole time series reduce in one call.

    Parameters
    ----------
    z : complex
        Lateral impedance, pu.
    S : complex or array
        Metered injection at the load end, pu.
    v_mag : float or array
        Metered voltage magnitude at the load end, pu.

    Returns
    -------
    v_eq, S_eq
        Voltage magnitude and injection seen at the primary port.
    """
    i_mag, phi = _current_and_angle(S, v_mag)
    v_eq = np.abs(v_mag - z * i_mag * np.exp(-1j * phi))
    S_eq = S - z * i_mag**2
    return v_eq, S_eq


def reduce_two_phase_branch(z_block, S, v12_mag):
    """Fold a two-phase lateral into its upstream primary port.

    ``z_block`` is the 2x2 lateral impedance; only the loop combination
    ``z12 + z21 - z11 - z22`` matters.
    """
    zb = np.asarray(z_block, dtype=complex)
    z_sum = zb[0, 1] + zb[1, 0] - zb[0, 0] - zb[1, 1]
    return _reduce_two_phase(z_sum, S, v12_mag)


def _reduce_two_phase(z_sum, S, v12_mag):
    i_mag, phi = _current_and_angle(S, v12_mag)
    v_eq = np.abs(v12_mag + z_sum * i_mag * np.exp(-1j * phi))
    S_eq = S + z_sum * i_mag**2
    return v_eq, S_eq


def loop_impedance(branch: ServiceBranch) -> complex:
    """Scalar used by the reduction: z itself, or z_sum for two-phase."""
    if branch.kind == "single":
        return complex(branch.z)
    zb = branch.z
    return complex(zb[0, 1] + zb[1, 0] - zb[0, 0] - zb[1, 1])


def reduce_measurement(load: ReducedLoad, v_mag, S):
    """Apply a reduced load's lateral transform to metered samples."""
    if load.branch_kind is None:
        return np.asarray(v_mag, dtype=float), np.asarray(S, dtype=complex)
    if load.branch_kind == "single":
        return reduce_single_phase_branch(load.branch_z, S, v_mag)
    return _reduce_two_phase(load.branch_z, S, v_mag)


def reduce_network(model: FeederModel, drop_branches=()) -> ReducedNetwork:
    """Replace every loaded service branch by an equivalent primary load.

    ``drop_branches`` lists branches the model should pretend do not exist:
    their loads are attached straight to the upstream node with no lateral
    transform, as when a secondary is missing from the utility's records.
    """
    drop = set(drop_branches)
    by_id = {b.id: b for b in model.service_branches}
    unknown = drop - set(by_id)
    if unknown:
        raise FeederError(f"unknown service branch(es): {sorted(unknown)}")
    for b in model.service_branches:
        if b.upstream_branch is not None:
            raise FeederError(
                f"service branch '{b.id}' hangs off branch '{b.upstream_branch}': "
                "branch chain depth > 1 is not supported")
    served = {}
    for ld in model.loads:
        if ld.branch is not None:
            if ld.branch in served:
                raise FeederError(
                    f"service branch '{ld.branch}' serves more than one load "
                    f"('{served[ld.branch]}', '{ld.id}')")
            served[ld.branch] = ld.id

    loads = []
    for ld in model.loads:
        if ld.branch is None:
            loads.append(ReducedLoad(ld.id, ld.node, ld.conn_class, phase=ld.phase))
            continue
        b = by_id[ld.branch]
        if b.id in drop:
            loads.append(ReducedLoad(ld.id, b.node, ld.conn_class, phase=ld.phase))
        else:
            loads.append(ReducedLoad(ld.id, b.node, ld.conn_class, b.kind,
                                     loop_impedance(b), ld.phase))
    return ReducedNetwork(model.node_ids, model.lines, tuple(loads),
                          model.base_voltage, model.base_power)


def as_reduced(net) -> ReducedNetwork:
    return reduce_network(net) if isinstance(net, FeederModel) else net


# --------------------------------------------------------------------------
# admittance

def assemble_admittance(net) -> AdmittanceMatrix:
    """Nodal admittance from the 3x3 series blocks; no shunt terms."""
    net = as_reduced(net)
    n = net.n_nodes + 1
    Y = np.zeros((3 * n, 3 * n), dtype=complex)
    for ln in net.lines:
        try:
            if np.linalg.cond(ln.z) > 1.0 / np.finfo(float).eps:
                raise np.linalg.LinAlgError
            y = np.linalg.inv(ln.z)
        except np.linalg.LinAlgError:
            raise FeederError(f"line '{ln.id}': singular impedance block") from None
        f, t = ln.from_node, ln.to_node
        for p in range(3):
            for q in range(3):
                Y[p * n + f, q * n + f] += y[p, q]
                Y[p * n + t, q * n + t] += y[p, q]
                Y[p * n + f, q * n + t] -= y[p, q]
                Y[p * n + t, q * n + f] -= y[p, q]
    return AdmittanceMatrix(Y, net.n_nodes)
