"""Radial distribution networks and the direct load-flow relations.

A network is a tree of impedance branches rooted at the reference bus.  Two
matrices summarize it: BIBC (bus injection to branch current), a 0/1 path
membership matrix, and DLF (direct load flow), the shared-path impedance
sums.  Branch currents follow from injections as BIBC @ i, bus voltages as
v_ref - DLF @ i, with positive injection meaning load consumption.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError, TopologyError, ValidationError


def branch_id(parent, child) -> str:
    """Canonical branch identifier, oriented from parent to child."""
    return f"{parent}-{child}"


@dataclass(frozen=True)
class RadialNetwork:
    """Tree of buses and series impedances, per phase.

    Bus and branch order is fixed at construction: ``non_ref_buses`` lists
    the buses in breadth-first order from the reference, and branch ``k``
    is the branch entering ``non_ref_buses[k]`` from its parent.  Every
    matrix and vector in this package uses that shared ordering.
    """

    reference: str
    non_ref_buses: tuple
    parent: dict = field(repr=False)
    z: np.ndarray = field(repr=False)  # impedance of the branch into bus k, per unit
    phase: str = "1"

    @classmethod
    def from_branches(cls, reference, branches, phase="1") -> "RadialNetwork":
        """Build and validate a network from (from_bus, to_bus, z) triples.

        Raises TopologyError when the edges do not form a tree covering all
        buses from the reference, naming the offending bus or branch.
        """
        reference = str(reference)
        adjacency: dict[str, list[tuple[str, complex]]] = {reference: []}
        edge_count = 0
        for u, v, z in branches:
            u, v, z = str(u), str(v), complex(z)
            if z.real < 0:
                raise ValidationError(f"branch {u}-{v} has negative resistance {z.real}")
            adjacency.setdefault(u, []).append((v, z))
            adjacency.setdefault(v, []).append((u, z))
            edge_count += 1

        order: list[str] = []
        parent: dict[str, str] = {}
        z_in: dict[str, complex] = {}
        seen = {reference}
        queue = [reference]
        while queue:
            bus = queue.pop(0)
            for nxt, z in adjacency[bus]:
                if nxt == parent.get(bus):
                    continue
                if nxt in seen:
                    raise TopologyError(f"branch {bus}-{nxt} closes a cycle")
                seen.add(nxt)
                parent[nxt] = bus
                z_in[nxt] = z
                order.append(nxt)
                queue.append(nxt)

        unreached = set(adjacency) - seen
        if unreached:
            raise TopologyError(f"bus {sorted(unreached)[0]} is not reachable from the reference")
        if edge_count != len(order):
            raise TopologyError("branch count does not match bus count minus one")

        z_arr = np.array([z_in[b] for b in order], dtype=complex)
        return cls(reference=reference, non_ref_buses=tuple(order), parent=parent,
                   z=z_arr, phase=phase)

    @property
    def n(self) -> int:
        """Number of non-reference buses (equals the branch count)."""
        return len(self.non_ref_buses)

    @property
    def buses(self) -> tuple:
        return (self.reference,) + self.non_ref_buses

    @property
    def branch_ids(self) -> tuple:
        return tuple(branch_id(self.parent[b], b) for b in self.non_ref_buses)

    def bus_index(self, bus) -> int:
        try:
            return self.non_ref_buses.index(str(bus))
        except ValueError:
            raise KeyError(f"unknown non-reference bus {bus!r}") from None

    def branch_index(self, bid) -> int:
        try:
            return self.branch_ids.index(str(bid))
        except ValueError:
            raise KeyError(f"unknown branch {bid!r}") from None

    def path_to(self, bus) -> list:
        """Bus ids on the path reference -> bus, excluding the reference."""
        path = []
        b = str(bus)
        while b != self.reference:
            path.append(b)
            b = self.parent[b]
        path.reverse()
        return path

    def root_branches(self) -> tuple:
        """Branches leaving the reference bus (usually the feeder head)."""
        return tuple(branch_id(self.reference, b) for b in self.non_ref_buses
                     if self.parent[b] == self.reference)

    def subtree(self, root, members) -> "RadialNetwork":
        """Induced subnetwork rooted at ``root`` containing exactly ``members``.

        Each member's parent must be the root or another member, so the
        members hang below the root as a connected subtree.
        """
        members = [str(m) for m in members]
        member_set = set(members)
        root = str(root)
        branches = []
        for m in members:
            p = self.parent.get(m)
            if p is None:
                raise TopologyError(f"bus {m} not in network or is the reference")
            if p != root and p not in member_set:
                raise TopologyError(
                    f"bus {m} does not hang below {root}: parent {p} is outside the subarea")
            branches.append((p, m, self.z[self.bus_index(m)]))
        return RadialNetwork.from_branches(root, branches, phase=self.phase)


@dataclass(frozen=True)
class BibcMatrix:
    """0/1 path-membership matrix: entry (b, j) = 1 iff branch b lies on the
    path from the reference to bus j.  Branch currents = entries @ injections."""

    entries: np.ndarray
    branch_ids: tuple
    bus_ids: tuple


@dataclass(frozen=True)
class DlfMatrix:
    """Shared-path impedance sums: entry (k, j) is the summed impedance of
    branches common to the reference->k and reference->j paths."""

    entries: np.ndarray
    bus_ids: tuple


@dataclass(frozen=True)
class FlowSolution:
    """Branch currents and non-reference bus voltages of one flow solve."""

    branch_currents: np.ndarray
    bus_voltages: np.ndarray
    branch_ids: tuple = ()
    bus_ids: tuple = ()


def build_bibc(network: RadialNetwork) -> BibcMatrix:
    """Path-membership matrix of the tree.

    Column j is the column of j's parent plus a unit at j's own branch, which
    makes the matrix upper triangular with unit diagonal in the network's
    topological ordering.
    """
    n = network.n
    entries = np.zeros((n, n), dtype=complex)
    index = {b: k for k, b in enumerate(network.non_ref_buses)}
    for j, bus in enumerate(network.non_ref_buses):
        p = network.parent[bus]
        if p != network.reference:
            entries[:, j] = entries[:, index[p]]
        entries[j, j] = 1.0
    return BibcMatrix(entries=entries, branch_ids=network.branch_ids,
                      bus_ids=network.non_ref_buses)


def build_dlf(network: RadialNetwork, bibc: BibcMatrix | None = None) -> DlfMatrix:
    """Shared-path impedance matrix, computed as BIBC^T diag(z) BIBC."""
    if bibc is None:
        bibc = build_bibc(network)
    weighted = network.z[:, None] * bibc.entries
    entries = bibc.entries.T @ weighted
    return DlfMatrix(entries=entries, bus_ids=network.non_ref_buses)


def direct_load_flow(bibc: BibcMatrix, dlf: DlfMatrix, i_inj, v_ref) -> FlowSolution:
    """Forward solve: currents BIBC @ i, voltages v_ref - DLF @ i.

    Positive injection is current drawn by load, so it produces a voltage
    drop below v_ref.
    """
    i_inj = np.asarray(i_inj, dtype=complex)
    if i_inj.shape != (bibc.entries.shape[1],):
        raise ShapeError(
            f"injection vector has shape {i_inj.shape}, expected ({bibc.entries.shape[1]},)")
    branch_currents = bibc.entries @ i_inj
    bus_voltages = complex(v_ref) - dlf.entries @ i_inj
    return FlowSolution(branch_currents=branch_currents, bus_voltages=bus_voltages,
                        branch_ids=bibc.branch_ids, bus_ids=dlf.bus_ids)


def subarea_forward_solve(bibc_j: BibcMatrix, dlf_j: DlfMatrix, i_updated,
                          v_boundary) -> FlowSolution:
    """Forward solve of a subarea rooted at its boundary bus.

    Identical relation to ``direct_load_flow`` with the boundary voltage
    acting as the local reference.
    """
    return direct_load_flow(bibc_j, dlf_j, i_updated, v_boundary)


# ---------------------------------------------------------------------------
# Network file format (JSON)

FORMAT_VERSION = 1


def network_to_dict(networks, base_voltage: float, base_power: float) -> dict:
    """Serialize one network per phase into the network-file schema.

    Impedances are written in ohms using the declared bases.
    """
    if isinstance(networks, RadialNetwork):
        networks = {networks.phase: networks}
    z_base = base_voltage ** 2 / base_power
    buses = []
    branches = []
    for phase, net in networks.items():
        buses.append({"id": net.reference, "phase": phase, "is_reference": True})
        for b in net.non_ref_buses:
            buses.append({"id": b, "phase": phase, "is_reference": False})
        for k, b in enumerate(net.non_ref_buses):
            z = net.z[k] * z_base
            branches.append({"from": net.parent[b], "to": b, "phase": phase,
                             "r": z.real, "x": z.imag, "unit": "ohm"})
    return {
        "format_version": FORMAT_VERSION,
        "base": {"voltage": base_voltage, "power": base_power},
        "buses": buses,
        "branches": branches,
    }


def networks_from_dict(doc: dict) -> dict:
    """Parse the network-file schema into {phase: RadialNetwork} (per unit)."""
    try:
        base = doc["base"]
        z_base = float(base["voltage"]) ** 2 / float(base["power"])
        bus_records = doc["buses"]
        branch_records = doc["branches"]
    except KeyError as exc:
        raise DataError(f"network file missing field {exc}") from None

    phases = sorted({str(b.get("phase", "1")) for b in bus_records})
    networks = {}
    for phase in phases:
        refs = [b["id"] for b in bus_records
                if str(b.get("phase", "1")) == phase and b.get("is_reference")]
        if len(refs) != 1:
            raise DataError(f"phase {phase} must have exactly one reference bus, got {len(refs)}")
        branches = []
        for rec in branch_records:
            if str(rec.get("phase", "1")) != phase:
                continue
            z = complex(float(rec["r"]), float(rec["x"]))
            unit = rec.get("unit", "pu")
            if unit == "ohm":
                z = z / z_base
            elif unit != "pu":
                raise DataError(f"unknown impedance unit {unit!r}")
            branches.append((rec["from"], rec["to"], z))
        networks[phase] = RadialNetwork.from_branches(refs[0], branches, phase=phase)
    declared = {str(b["id"]) for b in bus_records}
    built = set()
    for net in networks.values():
        built.update(net.buses)
    missing = declared - built
    if missing:
        raise TopologyError(f"bus {sorted(missing)[0]} declared but not connected")
    return networks


def save_network(path, networks, base_voltage: float, base_power: float) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(networks, base_voltage, base_power), fh, indent=2)


def load_network(path) -> dict:
    """Load a network file, returning {phase: RadialNetwork}."""
    with open(path) as fh:
        doc = json.load(fh)
    return networks_from_dict(doc)
