"""Measurement model: observation matrix, frames, noise blocks, bad data.

The measurement vector stacks three segments in a fixed order: pseudo
injected currents (low accuracy, one row per pseudo bus), metered branch
currents, and metered bus voltages.  The observation matrix stacks the
matching rows: selected identity rows, selected BIBC rows, and negated
selected DLF rows.  Voltage readings are stored relative to the reference
voltage (reading - v_ref) so the negated DLF rows apply without an affine
offset.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import pandas as pd

from .augmented import AugmentedCovariance
from .errors import DataError, PlanError, ObservabilityError, ShapeError, ValidationError
from .network import BibcMatrix, DlfMatrix, FlowSolution, RadialNetwork, build_bibc, build_dlf


def _resolve_sd(sd, device_id) -> float:
    value = sd.get(str(device_id)) if isinstance(sd, Mapping) else sd
    if value is None:
        raise PlanError(f"no standard deviation configured for {device_id!r}")
    value = float(value)
    if value <= 0.0:
        raise ValidationError(f"standard deviation for {device_id!r} must be positive")
    return value


@dataclass(frozen=True)
class MeteringPlan:
    """Which devices exist and how noisy they are.

    ``voltage_meters`` lists metered non-reference buses; a voltage meter on
    the reference bus is recorded via ``reference_metered`` and supplies the
    per-step reference voltage instead of a measurement row.  Device order is
    the network order, shared with every assembled vector.
    """

    reference: str
    voltage_meters: tuple
    current_meters: tuple
    pseudo_buses: tuple
    meter_sd: float | Mapping = 0.01
    pseudo_sd: float | Mapping = 0.1
    reference_metered: bool = False

    @classmethod
    def for_network(cls, network: RadialNetwork, voltage_meters=(), current_meters=(),
                    pseudo_buses=None, meter_sd=0.01, pseudo_sd=0.1) -> "MeteringPlan":
        """Build a plan against a network, validating ids and observability."""
        v_set = {str(b) for b in voltage_meters}
        reference_metered = network.reference in v_set
        v_set.discard(network.reference)
        unknown = v_set - set(network.non_ref_buses)
        if unknown:
            raise PlanError(f"voltage meter on unknown bus {sorted(unknown)[0]!r}")
        c_set = {str(b) for b in current_meters}
        unknown = c_set - set(network.branch_ids)
        if unknown:
            raise PlanError(f"current meter on unknown branch {sorted(unknown)[0]!r}")
        if pseudo_buses is None:
            p_list = list(network.non_ref_buses)
        else:
            p_set = {str(b) for b in pseudo_buses}
            unknown = p_set - set(network.non_ref_buses)
            if unknown:
                raise PlanError(f"pseudo data for unknown bus {sorted(unknown)[0]!r}")
            p_list = [b for b in network.non_ref_buses if b in p_set]
        plan = cls(
            reference=network.reference,
            voltage_meters=tuple(b for b in network.non_ref_buses if b in v_set),
            current_meters=tuple(b for b in network.branch_ids if b in c_set),
            pseudo_buses=tuple(p_list),
            meter_sd=meter_sd,
            pseudo_sd=pseudo_sd,
            reference_metered=reference_metered,
        )
        # Observability check: full column rank is required up front.
        build_observation_matrix(plan, *_matrices(network))
        return plan

    @property
    def n_rows(self) -> int:
        return len(self.pseudo_buses) + len(self.current_meters) + len(self.voltage_meters)


def _matrices(network: RadialNetwork):
    bibc = build_bibc(network)
    return bibc, build_dlf(network, bibc)


@dataclass(frozen=True)
class ObservationMatrix:
    """Stacked measurement map with row bookkeeping.

    ``rows`` holds (segment, device_id) pairs in vector order; segments are
    'pseudo', 'current', 'voltage'.  ``monitored_rows`` indexes the metered
    rows (currents and voltages), the only ones bad-data detection watches.
    """

    h: np.ndarray
    bus_ids: tuple
    rows: tuple

    @property
    def monitored_rows(self) -> np.ndarray:
        return np.array([i for i, (seg, _) in enumerate(self.rows) if seg != "pseudo"],
                        dtype=int)

    def segment_slice(self, segment: str) -> slice:
        idx = [i for i, (seg, _) in enumerate(self.rows) if seg == segment]
        if not idx:
            return slice(0, 0)
        return slice(idx[0], idx[-1] + 1)


def build_observation_matrix(plan: MeteringPlan, bibc: BibcMatrix,
                             dlf: DlfMatrix) -> ObservationMatrix:
    """Stack identity, BIBC and negated DLF rows per the metering plan."""
    bus_ids = bibc.bus_ids
    bus_pos = {b: i for i, b in enumerate(bus_ids)}
    branch_pos = {b: i for i, b in enumerate(bibc.branch_ids)}
    n = len(bus_ids)

    rows = []
    blocks = []
    for bus in plan.pseudo_buses:
        if bus not in bus_pos:
            raise PlanError(f"pseudo bus {bus!r} not in network")
        row = np.zeros(n, dtype=complex)
        row[bus_pos[bus]] = 1.0
        blocks.append(row)
        rows.append(("pseudo", bus))
    for branch in plan.current_meters:
        if branch not in branch_pos:
            raise PlanError(f"metered branch {branch!r} not in network")
        blocks.append(bibc.entries[branch_pos[branch]])
        rows.append(("current", branch))
    for bus in plan.voltage_meters:
        if bus not in bus_pos:
            raise PlanError(f"metered bus {bus!r} not in network")
        blocks.append(-dlf.entries[bus_pos[bus]])
        rows.append(("voltage", bus))

    h = np.vstack(blocks) if blocks else np.zeros((0, n), dtype=complex)
    if np.linalg.matrix_rank(h) < n:
        raise ObservabilityError(
            f"observation matrix rank {np.linalg.matrix_rank(h)} < {n} states")
    return ObservationMatrix(h=h, bus_ids=bus_ids, rows=tuple(rows))


@dataclass(frozen=True)
class MeasurementFrame:
    """One time step of assembled measurements, in vector order."""

    pseudo_i_inj: np.ndarray
    metered_i_branch: np.ndarray
    metered_v: np.ndarray  # stored as reading - v_ref
    timestamp: int

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.pseudo_i_inj, self.metered_i_branch, self.metered_v])


def assemble_frame(plan: MeteringPlan, pseudo, readings: Mapping, v_ref,
                   timestamp: int = 0) -> MeasurementFrame:
    """Assemble one measurement frame from pseudo data and meter readings.

    ``readings`` maps device id to a complex reading; magnitude-only devices
    must be resolved with ``synthesize_angle`` before assembly.  Voltage
    readings are shifted by -v_ref here.
    """
    pseudo = np.asarray(pseudo, dtype=complex)
    if pseudo.shape != (len(plan.pseudo_buses),):
        raise ShapeError(
            f"pseudo vector has shape {pseudo.shape}, plan expects ({len(plan.pseudo_buses)},)")
    currents = []
    for branch in plan.current_meters:
        if branch not in readings:
            raise DataError(f"missing reading for current meter {branch!r}")
        currents.append(complex(readings[branch]))
    voltages = []
    for bus in plan.voltage_meters:
        if bus not in readings:
            raise DataError(f"missing reading for voltage meter {bus!r}")
        voltages.append(complex(readings[bus]) - complex(v_ref))
    return MeasurementFrame(
        pseudo_i_inj=pseudo,
        metered_i_branch=np.array(currents, dtype=complex),
        metered_v=np.array(voltages, dtype=complex),
        timestamp=int(timestamp),
    )


def build_r(plan: MeteringPlan, pseudo_cov: AugmentedCovariance | None = None
            ) -> AugmentedCovariance:
    """Block-diagonal measurement noise covariance.

    The three segments are independent: a pseudo block (large variance, or a
    full estimated covariance with its pseudocovariance when supplied), and
    diagonal branch-current and voltage blocks at meter accuracy.
    """
    n_p = len(plan.pseudo_buses)
    n_total = plan.n_rows
    gamma = np.zeros((n_total, n_total), dtype=complex)
    c = np.zeros((n_total, n_total), dtype=complex)
    if pseudo_cov is not None:
        if pseudo_cov.n != n_p:
            raise ShapeError(f"pseudo covariance has dimension {pseudo_cov.n}, expected {n_p}")
        gamma[:n_p, :n_p] = pseudo_cov.gamma
        c[:n_p, :n_p] = pseudo_cov.c
    else:
        for i, bus in enumerate(plan.pseudo_buses):
            gamma[i, i] = _resolve_sd(plan.pseudo_sd, bus) ** 2
    offset = n_p
    for device in plan.current_meters + plan.voltage_meters:
        gamma[offset, offset] = _resolve_sd(plan.meter_sd, device) ** 2
        offset += 1
    return AugmentedCovariance(gamma, c)


@dataclass(frozen=True)
class BadDataReport:
    """Per-row, per-step flags of the innovation band test.

    A row is flagged when the innovation magnitude exceeds ``multiplier``
    times that row's standard deviation (root mean square of the complex
    innovation, estimated from history).
    """

    flags: np.ndarray  # (steps, rows) bool
    sd_band: np.ndarray
    multiplier: float

    @property
    def any_flagged(self) -> bool:
        return bool(self.flags.any())

    @property
    def flagged_count(self) -> int:
        return int(self.flags.sum())


def detect_bad_data(innovations, sd_band, k: float = 5.0) -> BadDataReport:
    """Flag innovation components outside the +-k*SD band.

    ``innovations`` is (steps, rows) complex (a single step may be passed as
    a vector).  ``sd_band`` must be strictly positive per row.
    """
    inn = np.atleast_2d(np.asarray(innovations, dtype=complex))
    sd = np.asarray(sd_band, dtype=float)
    if sd.ndim == 0:
        sd = np.full(inn.shape[1], float(sd))
    if sd.shape != (inn.shape[1],):
        raise ShapeError(f"sd_band shape {sd.shape} does not match {inn.shape[1]} rows")
    if np.any(sd <= 0.0):
        raise ValidationError("sd_band entries must be strictly positive")
    flags = np.abs(inn) > k * sd[None, :]
    return BadDataReport(flags=flags, sd_band=sd, multiplier=float(k))


class InnovationBandTracker:
    """Trailing-window RMS of innovation magnitudes per monitored row.

    Mirrors the use of historical measurement data for the band: the SD used
    at step t comes from the window of magnitudes seen before t.  Returns
    None until ``min_history`` samples have accumulated.
    """

    def __init__(self, rows: int, window: int = 1440, min_history: int = 30):
        self.window = int(window)
        self.min_history = int(min_history)
        self._buffer = np.zeros((self.window, rows))
        self._count = 0
        self._pos = 0

    def current_sd(self) -> np.ndarray | None:
        if self._count < self.min_history:
            return None
        filled = self._buffer if self._count >= self.window else self._buffer[:self._count]
        return np.sqrt(np.mean(filled ** 2, axis=0))

    def push(self, innovation_row: np.ndarray) -> None:
        self._buffer[self._pos] = np.abs(innovation_row)
        self._pos = (self._pos + 1) % self.window
        self._count += 1


def synthesize_angle(magnitude_reading: float, pseudo_solution: FlowSolution,
                     location, diagnostics: list | None = None) -> complex:
    """Give a magnitude-only reading the angle of the pseudo-flow quantity.

    ``location`` is a bus id (voltage angle) or branch id (current angle)
    resolved against the solution's id maps.  A zero pseudo quantity has no
    angle; the reading is returned at angle zero and a note is appended to
    ``diagnostics``.
    """
    location = str(location)
    value = None
    if pseudo_solution.bus_ids and location in pseudo_solution.bus_ids:
        value = pseudo_solution.bus_voltages[pseudo_solution.bus_ids.index(location)]
    elif pseudo_solution.branch_ids and location in pseudo_solution.branch_ids:
        value = pseudo_solution.branch_currents[pseudo_solution.branch_ids.index(location)]
    else:
        raise PlanError(f"location {location!r} not found in pseudo solution")
    if value == 0:
        if diagnostics is not None:
            diagnostics.append(f"zero pseudo quantity at {location}; used angle 0")
        return complex(float(magnitude_reading), 0.0)
    return float(magnitude_reading) * value / abs(value)


# ---------------------------------------------------------------------------
# Meter and injection time-series files (CSV, long format)


@dataclass
class MeterChannel:
    kind: str  # 'V' or 'I'
    magnitude: np.ndarray
    angle_deg: np.ndarray | None  # None: magnitude-only device

    def complex_series(self) -> np.ndarray:
        if self.angle_deg is None:
            raise DataError("magnitude-only channel has no angle")
        return self.magnitude * np.exp(1j * np.deg2rad(self.angle_deg))


@dataclass
class MeterStream:
    """All meter channels of a scenario, indexed by device id."""

    channels: dict

    @property
    def length(self) -> int:
        return 0 if not self.channels else len(next(iter(self.channels.values())).magnitude)

    def reading(self, device, t: int) -> complex:
        ch = self.channels[str(device)]
        if ch.angle_deg is None:
            raise DataError(f"device {device!r} is magnitude-only; synthesize an angle first")
        return complex(ch.magnitude[t] * np.exp(1j * np.deg2rad(ch.angle_deg[t])))

    def is_magnitude_only(self, device) -> bool:
        return self.channels[str(device)].angle_deg is None


def write_meter_csv(path, stream: MeterStream, header_comment: str | None = None) -> None:
    records = []
    for device, ch in stream.channels.items():
        for t in range(len(ch.magnitude)):
            angle = "" if ch.angle_deg is None else ch.angle_deg[t]
            records.append((t, device, ch.kind, ch.magnitude[t], angle))
    frame = pd.DataFrame(records,
                         columns=["timestamp", "device_id", "kind", "magnitude", "angle_deg"])
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        frame.to_csv(fh, index=False)


def read_meter_csv(path) -> MeterStream:
    frame = pd.read_csv(path, comment="#", dtype={"device_id": str})
    channels = {}
    for device, group in frame.groupby("device_id", sort=False):
        group = group.sort_values("timestamp")
        kinds = group["kind"].unique()
        if len(kinds) != 1:
            raise DataError(f"device {device!r} has mixed kinds {list(kinds)}")
        angles = group["angle_deg"].to_numpy(dtype=float)
        angle = None if np.isnan(angles).all() else angles
        if angle is not None and np.isnan(angles).any():
            raise DataError(f"device {device!r} mixes angled and magnitude-only rows")
        channels[str(device)] = MeterChannel(kind=str(kinds[0]),
                                             magnitude=group["magnitude"].to_numpy(dtype=float),
                                             angle_deg=angle)
    return MeterStream(channels=channels)


@dataclass
class PseudoHistory:
    """Per-bus pseudo injected-current series plus calibration data.

    ``values`` holds the pseudo measurements used in the estimation day.
    ``calib_diff`` holds consecutive-day difference samples of the same
    quantity, used to estimate the pseudo noise covariance.
    ``increment_calib`` is a historical measured day (temporary metering
    campaign accuracy); its one-step increments calibrate the process noise
    of the random-walk state model.
    """

    bus_ids: tuple
    values: np.ndarray  # (T, n) complex
    calib_diff: np.ndarray | None = None
    increment_calib: np.ndarray | None = None


def align_bus_columns(network: RadialNetwork, bus_ids, array: np.ndarray) -> np.ndarray:
    """Reorder the columns of a per-bus array to the network's bus ordering."""
    ids = tuple(str(b) for b in bus_ids)
    if ids == network.non_ref_buses:
        return array
    pos = {b: k for k, b in enumerate(ids)}
    missing = [b for b in network.non_ref_buses if b not in pos]
    if missing:
        raise DataError(f"per-bus data missing bus {missing[0]!r}")
    order = [pos[b] for b in network.non_ref_buses]
    return array[:, order]


def aligned_pseudo(network: RadialNetwork, pseudo_history: PseudoHistory) -> "PseudoHistory":
    """Pseudo history with all arrays in the network's bus ordering."""
    return PseudoHistory(
        bus_ids=network.non_ref_buses,
        values=align_bus_columns(network, pseudo_history.bus_ids, pseudo_history.values),
        calib_diff=None if pseudo_history.calib_diff is None else
        align_bus_columns(network, pseudo_history.bus_ids, pseudo_history.calib_diff),
        increment_calib=None if pseudo_history.increment_calib is None else
        align_bus_columns(network, pseudo_history.bus_ids, pseudo_history.increment_calib),
    )


def prepare_meter_arrays(network: RadialNetwork, plan: MeteringPlan, stream: "MeterStream",
                         T: int, pseudo_injections: np.ndarray, diagnostics: dict):
    """Per-step reference voltage and meter readings as dense arrays.

    Magnitude-only devices get their angles from a flow solve of the raw
    pseudo data (computed here, once, as part of the offline stage).
    Voltage columns are already shifted by -v_ref; currents come first,
    then voltages, matching the observation-matrix row order.
    """
    bibc = build_bibc(network)
    dlf = build_dlf(network, bibc)
    need_synth = [d for d in (plan.current_meters + plan.voltage_meters +
                              ((network.reference,) if plan.reference_metered else ()))
                  if d in stream.channels and stream.is_magnitude_only(d)]
    pseudo_flows = None
    if need_synth:
        from .network import direct_load_flow
        pseudo_flows = [direct_load_flow(bibc, dlf, pseudo_injections[t], 1.0)
                        for t in range(T)]
        diagnostics["angle_synthesized_devices"] = sorted(need_synth)

    def series(device, kind):
        device = str(device)
        if device not in stream.channels:
            raise DataError(f"meter stream has no channel for {device!r}")
        ch = stream.channels[device]
        if ch.kind != kind:
            raise DataError(f"channel {device!r} has kind {ch.kind!r}, plan wants {kind!r}")
        if len(ch.magnitude) < T:
            raise DataError(f"channel {device!r} has {len(ch.magnitude)} samples, need {T}")
        if ch.angle_deg is not None:
            return ch.magnitude[:T] * np.exp(1j * np.deg2rad(ch.angle_deg[:T]))
        notes: list = []
        values = np.array([synthesize_angle(ch.magnitude[t], pseudo_flows[t], device,
                                            diagnostics=notes)
                           for t in range(T)])
        if notes:
            diagnostics.setdefault("angle_synthesis_notes", []).extend(notes[:5])
        return values

    if plan.reference_metered:
        ref_ch = stream.channels.get(network.reference)
        if ref_ch is None:
            raise DataError(f"plan meters the reference bus {network.reference!r} "
                            "but the stream has no such channel")
        if ref_ch.angle_deg is None:
            # The reference is the angle datum; a magnitude-only reading sits at angle 0.
            v_ref = ref_ch.magnitude[:T].astype(complex)
        else:
            v_ref = ref_ch.magnitude[:T] * np.exp(1j * np.deg2rad(ref_ch.angle_deg[:T]))
    else:
        v_ref = np.ones(T, dtype=complex)

    meter_rows = []
    for branch in plan.current_meters:
        meter_rows.append(series(branch, "I"))
    for bus in plan.voltage_meters:
        meter_rows.append(series(bus, "V") - v_ref)
    y_meters = np.column_stack(meter_rows) if meter_rows else np.zeros((T, 0), dtype=complex)
    return v_ref, y_meters


def write_injection_csv(path, bus_ids, values: np.ndarray, kind: str = "I",
                        header_comment: str | None = None) -> None:
    records = []
    for j, bus in enumerate(bus_ids):
        mags = np.abs(values[:, j])
        angs = np.rad2deg(np.angle(values[:, j]))
        for t in range(values.shape[0]):
            records.append((t, bus, kind, mags[t], angs[t]))
    frame = pd.DataFrame(records,
                         columns=["timestamp", "device_id", "kind", "magnitude", "angle_deg"])
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        frame.to_csv(fh, index=False)


def read_injection_csv(path, bus_ids=None) -> tuple:
    """Read an injection series file; returns (bus_ids, (T, n) complex array)."""
    frame = pd.read_csv(path, comment="#", dtype={"device_id": str})
    ids = list(dict.fromkeys(frame["device_id"])) if bus_ids is None else [str(b) for b in bus_ids]
    series = []
    for bus in ids:
        group = frame[frame["device_id"] == bus].sort_values("timestamp")
        if group.empty:
            raise DataError(f"no rows for bus {bus!r} in {path}")
        values = group["magnitude"].to_numpy() * np.exp(
            1j * np.deg2rad(group["angle_deg"].to_numpy()))
        series.append(values)
    return tuple(ids), np.column_stack(series)
