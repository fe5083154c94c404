"""Hierarchical multi-layer estimation.

The network is split into a main area (containing the reference bus) and
subareas attached at boundary buses.  Offline, matrices and per-step pseudo
scaling factors are prepared.  In real time, each step runs the filter on
the main area with scaling-factor-updated pseudo data, computes boundary
voltages from the estimated states, and then solves each subarea with a
forward flow seeded by its boundary voltage and its share of the estimated
boundary current.  Subareas within one layer are independent given those
inputs and may be solved concurrently; deeper layers repeat the handoff.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ackf
from .augmented import AugmentedCovariance, estimate_noise_covariance
from .errors import (DataError, DegenerateScalingError, PlanError, ShapeError,
                     TopologyError, ValidationError)
from .measurement import (BadDataReport, InnovationBandTracker, MeteringPlan, MeterStream,
                          ObservationMatrix, PseudoHistory, _resolve_sd, aligned_pseudo,
                          build_observation_matrix, build_r, detect_bad_data,
                          prepare_meter_arrays)
from .network import (BibcMatrix, DlfMatrix, RadialNetwork, build_bibc, build_dlf,
                      subarea_forward_solve)

PARTITION_FORMAT_VERSION = 1

# Variance floor keeping exactly-known (zero-load) rows from producing a
# singular innovation covariance.
VARIANCE_FLOOR = 1e-12

BAD_DATA_INFLATION = 1e6


# ---------------------------------------------------------------------------
# Partition


@dataclass(frozen=True)
class Subarea:
    id: str
    boundary: str
    members: tuple
    network: RadialNetwork = field(repr=False)


@dataclass(frozen=True)
class Partition:
    """Main area plus subareas with a derived layer schedule.

    Layer 1 is the main area; a subarea whose boundary is a main bus sits in
    layer 2; a subarea whose boundary belongs to another subarea sits one
    layer below its parent.
    """

    full: RadialNetwork
    main: RadialNetwork
    subareas: tuple
    layer_of: dict
    parent_of: dict  # subarea id -> parent subarea id, or None for the main area

    @property
    def layer_schedule(self) -> list:
        if not self.subareas:
            return []
        depth = max(self.layer_of.values())
        return [[s.id for s in self.subareas if self.layer_of[s.id] == layer]
                for layer in range(2, depth + 1)]

    def subarea(self, sid: str) -> Subarea:
        for s in self.subareas:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def children_of(self, sid) -> list:
        return [s for s in self.subareas if self.parent_of[s.id] == sid]


def build_partition(network: RadialNetwork, subarea_specs) -> Partition:
    """Validate subarea membership and derive the layer schedule.

    Subareas must be vertex disjoint; boundaries must be non-reference buses
    of the parent area; the main area plus all members must cover the
    network and remain contiguous.
    """
    specs = [{"id": str(s["id"]), "boundary": str(s["boundary"]),
              "members": tuple(str(m) for m in s["members"])} for s in subarea_specs]
    seen_ids = set()
    member_of = {}
    for s in specs:
        if s["id"] in seen_ids:
            raise ValidationError(f"duplicate subarea id {s['id']!r}")
        seen_ids.add(s["id"])
        if not s["members"]:
            raise ValidationError(f"subarea {s['id']!r} has no members")
        for m in s["members"]:
            if m in member_of:
                raise ValidationError(
                    f"bus {m!r} belongs to both {member_of[m]!r} and {s['id']!r}")
            member_of[m] = s["id"]
        if s["boundary"] == network.reference:
            raise ValidationError(f"subarea {s['id']!r} cannot attach at the reference bus")
        if s["boundary"] in s["members"]:
            raise ValidationError(f"subarea {s['id']!r} contains its own boundary")

    all_members = set(member_of)
    main_buses = [b for b in network.non_ref_buses if b not in all_members]
    for b in main_buses:
        p = network.parent[b]
        if p != network.reference and p not in main_buses:
            raise TopologyError(f"main-area bus {b!r} hangs below subarea bus {p!r}")

    parent_of = {}
    layer_of = {}
    for s in specs:
        b = s["boundary"]
        if b in main_buses:
            parent_of[s["id"]] = None
        elif b in member_of:
            parent_of[s["id"]] = member_of[b]
        else:
            raise ValidationError(f"boundary {b!r} of subarea {s['id']!r} is not in the network "
                                  "main area or any subarea")
    # Layer assignment; a cycle in the nesting leaves ids unresolved.
    pending = {s["id"] for s in specs}
    while pending:
        progressed = False
        for s in specs:
            sid = s["id"]
            if sid not in pending:
                continue
            parent = parent_of[sid]
            if parent is None:
                layer_of[sid] = 2
            elif parent in layer_of:
                layer_of[sid] = layer_of[parent] + 1
            else:
                continue
            pending.discard(sid)
            progressed = True
        if not progressed:
            raise ValidationError(f"cyclic subarea nesting involving {sorted(pending)}")

    subareas = tuple(
        Subarea(id=s["id"], boundary=s["boundary"], members=s["members"],
                network=network.subtree(s["boundary"], s["members"]))
        for s in specs)

    main_branches = [(network.parent[b], b, network.z[network.bus_index(b)])
                     for b in main_buses]
    main = RadialNetwork.from_branches(network.reference, main_branches, phase=network.phase) \
        if main_buses else RadialNetwork.from_branches(network.reference, [], phase=network.phase)
    return Partition(full=network, main=main, subareas=subareas,
                     layer_of=layer_of, parent_of=parent_of)


def partition_to_dict(partition: Partition) -> dict:
    return {
        "format_version": PARTITION_FORMAT_VERSION,
        "subareas": [{"id": s.id, "boundary": s.boundary, "members": list(s.members)}
                     for s in partition.subareas],
    }


def load_partition(path, network: RadialNetwork) -> Partition:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        specs = doc["subareas"]
    except KeyError:
        raise DataError("partition file missing 'subareas'") from None
    return build_partition(network, specs)


def save_partition(path, partition: Partition) -> None:
    with open(path, "w") as fh:
        json.dump(partition_to_dict(partition), fh, indent=2)


# ---------------------------------------------------------------------------
# Pseudo scaling factors


@dataclass(frozen=True)
class ScalingFactors:
    """Per-unit share of the aggregate pseudo current at one sample."""

    sf: np.ndarray
    unit_ids: tuple
    t: int
    mode: str = "complex"


def compute_scaling_factors(pseudo_injections: np.ndarray, t: int, mode: str = "complex",
                            unit_ids=None) -> ScalingFactors:
    """Share of each unit in the aggregate pseudo current at sample t.

    ``complex`` mode keeps the complex ratio so that multiplying the factors
    back into a complex total is exact; ``magnitude`` mode uses magnitude
    shares.  A near-zero aggregate (below 1e-9) cannot be disaggregated.
    """
    series = np.asarray(pseudo_injections, dtype=complex)
    if series.ndim == 1:  # a single sample
        series = series[None, :]
    if series.ndim != 2:
        raise ShapeError("pseudo_injections must be (T, units)")
    row = series[t]
    if unit_ids is None:
        unit_ids = tuple(str(i) for i in range(row.shape[0]))
    if row.shape[0] == 0:
        raise ValidationError("need at least one unit")
    if mode == "complex":
        total = row.sum()
        if abs(total) < 1e-9:
            raise DegenerateScalingError(f"aggregate pseudo current {abs(total):.2e} at t={t}")
        sf = row / total
    elif mode == "magnitude":
        mags = np.abs(row)
        total = mags.sum()
        if total < 1e-9:
            raise DegenerateScalingError(f"aggregate pseudo magnitude {total:.2e} at t={t}")
        sf = (mags / total).astype(complex)
    else:
        raise ValidationError(f"unknown scaling-factor mode {mode!r}")
    return ScalingFactors(sf=sf, unit_ids=tuple(unit_ids), t=int(t), mode=mode)


def update_pseudo_injections(sf: ScalingFactors, measured_total) -> np.ndarray:
    """Disaggregate a measured total over the units by their factors."""
    return sf.sf * complex(measured_total)


def _factors_or_equal_shares(series, t, mode, unit_ids) -> tuple:
    """Scaling factors, falling back to equal shares on a degenerate total.
    Returns (factors, degenerate_flag)."""
    try:
        return compute_scaling_factors(series, t, mode=mode, unit_ids=unit_ids), False
    except DegenerateScalingError:
        n = series.shape[1]
        return ScalingFactors(sf=np.full(n, 1.0 / n, dtype=complex),
                              unit_ids=tuple(unit_ids), t=int(t), mode=mode), True


# ---------------------------------------------------------------------------
# Estimation runs


@dataclass
class LayerEstimate:
    """Per-step handoff from one layer to the next."""

    state: ackf.FilterState
    boundary_voltages: dict
    totals: dict


@dataclass
class EstimationRun:
    """Per-step voltage (and injection) estimates plus run diagnostics."""

    bus_ids: tuple
    voltages: np.ndarray
    injections: np.ndarray
    offline_seconds: float
    realtime_seconds: float
    bad_data: BadDataReport | None
    diagnostics: dict


def _floored(cov: AugmentedCovariance, floor: float = VARIANCE_FLOOR) -> AugmentedCovariance:
    return AugmentedCovariance(cov.gamma + floor * np.eye(cov.n), cov.c)


def _inflate_rows(r: AugmentedCovariance, rows) -> AugmentedCovariance:
    gamma = r.gamma.copy()
    for row in rows:
        gamma[row, row] = gamma[row, row] * BAD_DATA_INFLATION
    return AugmentedCovariance(gamma, r.c)


@dataclass
class _FilterSetup:
    network: RadialNetwork
    plan: MeteringPlan
    h: ObservationMatrix
    dlf: DlfMatrix
    model: ackf.StateSpaceModel
    x0: np.ndarray
    p0: AugmentedCovariance
    v_ref: np.ndarray
    y_meters: np.ndarray
    state_pseudo_cols: np.ndarray  # state index -> column in the pseudo value array


def _prepare_filter(network: RadialNetwork, plan: MeteringPlan, pseudo_values: np.ndarray,
                    calib_diff: np.ndarray | None, stream: MeterStream, T: int,
                    diagnostics: dict, joseph: bool = False,
                    increment_calib: np.ndarray | None = None) -> _FilterSetup:
    """Offline stage shared by the single-layer run and the main layer.

    ``pseudo_values`` columns follow ``network.non_ref_buses``.  The pseudo
    noise covariance (and with it the initial state covariance) is estimated
    from consecutive-day differences when available, else taken from the
    declared pseudo accuracy.  The process noise comes from the increments
    of a historical measured day when one is supplied; falling back to the
    pseudo-data increments overstates it by the pseudo noise.
    """
    if pseudo_values.shape[1] != network.n:
        raise ShapeError(f"pseudo values have {pseudo_values.shape[1]} columns, "
                         f"network has {network.n} non-reference buses")
    if pseudo_values.shape[0] < T:
        raise DataError(f"pseudo history covers {pseudo_values.shape[0]} steps, need {T}")
    bibc = build_bibc(network)
    dlf = build_dlf(network, bibc)
    h = build_observation_matrix(plan, bibc, dlf)

    bus_col = {b: k for k, b in enumerate(network.non_ref_buses)}
    pseudo_cols = np.array([bus_col[b] for b in plan.pseudo_buses], dtype=int)

    if calib_diff is not None:
        # The difference of two equally noisy days carries twice the one-day
        # error variance; halve to get the single-day pseudo covariance.
        day_pair = estimate_noise_covariance(calib_diff[:, pseudo_cols]).scaled(0.5)
        pseudo_cov = _floored(day_pair)
    else:
        pseudo_cov = None
    r = build_r(plan, pseudo_cov=pseudo_cov)

    increments = np.diff(increment_calib if increment_calib is not None else pseudo_values,
                         axis=0)
    q = _floored(estimate_noise_covariance(increments))

    x0 = pseudo_values[0].copy()
    if pseudo_cov is not None and len(plan.pseudo_buses) == network.n:
        p0 = pseudo_cov
    else:
        variances = np.full(network.n, 1.0)
        for bus in plan.pseudo_buses:
            variances[bus_col[bus]] = _resolve_sd(plan.pseudo_sd, bus) ** 2
        p0 = AugmentedCovariance.from_variances(variances)

    model = ackf.StateSpaceModel(h=h.h, q=q, r=r, f=None, joseph=joseph)
    v_ref, y_meters = prepare_meter_arrays(network, plan, stream, T, pseudo_values, diagnostics)
    return _FilterSetup(network=network, plan=plan, h=h, dlf=dlf, model=model, x0=x0, p0=p0,
                        v_ref=v_ref, y_meters=y_meters, state_pseudo_cols=pseudo_cols)


class _FilterLoop:
    """Real-time loop: predict, innovation band check, update."""

    def __init__(self, setup: _FilterSetup, bad_data_k: float = 5.0,
                 band_window: int = 1440, band_min_history: int = 30):
        self.setup = setup
        self.k = float(bad_data_k)
        self.monitored = setup.h.monitored_rows
        self.tracker = InnovationBandTracker(len(self.monitored), window=band_window,
                                             min_history=band_min_history)
        self.state = ackf.init(setup.x0, setup.p0)
        self.flags = []
        self.regularized_steps = 0

    def step(self, y_pseudo: np.ndarray, t: int) -> ackf.FilterState:
        setup = self.setup
        y = np.concatenate([y_pseudo, setup.y_meters[t]])
        self.state = ackf.predict(self.state, setup.model)
        nu = ackf.innovation(self.state, y, setup.model)
        r_t = setup.model.r
        row_flags = np.zeros(len(self.monitored), dtype=bool)
        if len(self.monitored):
            nu_m = nu[self.monitored]
            sd = self.tracker.current_sd()
            if sd is not None:
                report = detect_bad_data(nu_m, sd, k=self.k)
                row_flags = report.flags[0]
                if row_flags.any():
                    r_t = _inflate_rows(r_t, self.monitored[row_flags])
                    # Keep the band history clean: flagged samples enter at the
                    # current band level instead of their outlier magnitude.
                    nu_m = nu_m.copy()
                    nu_m[row_flags] = sd[row_flags]
            self.tracker.push(nu_m)
        self.flags.append(row_flags)
        g = ackf.gain(self.state, setup.model, r=r_t)
        if g.regularized:
            self.regularized_steps += 1
        self.state = ackf.update(self.state, y, setup.model, r=r_t, gain_blocks=g)
        return self.state

    def bad_data_report(self) -> BadDataReport:
        flags = np.array(self.flags, dtype=bool) if self.flags else \
            np.zeros((0, len(self.monitored)), dtype=bool)
        sd = self.tracker.current_sd()
        if sd is None:
            sd = np.full(len(self.monitored), np.nan)
        return BadDataReport(flags=flags, sd_band=sd, multiplier=self.k)


def run_single_layer(network: RadialNetwork, plan: MeteringPlan,
                     pseudo_history: PseudoHistory, meter_stream: MeterStream, T: int,
                     bad_data_k: float = 5.0, band_window: int = 1440,
                     band_min_history: int = 30, joseph: bool = False) -> EstimationRun:
    """Filter the full injected-current state vector each step.

    Serves as the accuracy and runtime baseline for the layered estimator.
    """
    t0 = time.perf_counter()
    diagnostics: dict = {}
    history = aligned_pseudo(network, pseudo_history)
    values = history.values
    setup = _prepare_filter(network, plan, values, history.calib_diff,
                            meter_stream, T, diagnostics, joseph=joseph,
                            increment_calib=history.increment_calib)
    loop = _FilterLoop(setup, bad_data_k=bad_data_k, band_window=band_window,
                       band_min_history=band_min_history)
    voltages = np.empty((T, network.n), dtype=complex)
    injections = np.empty((T, network.n), dtype=complex)
    t1 = time.perf_counter()
    for t in range(T):
        state = loop.step(values[t, setup.state_pseudo_cols], t)
        injections[t] = state.x_hat
        voltages[t] = setup.v_ref[t] - setup.dlf.entries @ state.x_hat
    t2 = time.perf_counter()
    diagnostics["regularized_steps"] = loop.regularized_steps
    return EstimationRun(bus_ids=network.non_ref_buses, voltages=voltages,
                         injections=injections, offline_seconds=t1 - t0,
                         realtime_seconds=t2 - t1, bad_data=loop.bad_data_report(),
                         diagnostics=diagnostics)


@dataclass
class _SubareaSetup:
    subarea: Subarea
    bibc: BibcMatrix
    dlf: DlfMatrix
    unit_pseudo: np.ndarray          # (T, members) pseudo per member unit
    member_cols_full: np.ndarray     # member index -> column in full-network arrays
    child_at: dict                   # member bus id -> child subarea id


def _aggregate_pseudo(partition: Partition, pseudo_full: np.ndarray) -> dict:
    """Bottom-up aggregate pseudo series per subarea (children folded in)."""
    full_col = {b: k for k, b in enumerate(partition.full.non_ref_buses)}
    order = sorted(partition.subareas, key=lambda s: -partition.layer_of[s.id])
    agg: dict[str, np.ndarray] = {}
    boundary_of = {s.boundary: s.id for s in partition.subareas}
    for s in order:
        total = np.zeros(pseudo_full.shape[0], dtype=complex)
        for m in s.members:
            child = boundary_of.get(m)
            if child is not None and partition.parent_of[child] == s.id:
                total = total + agg[child]
            else:
                total = total + pseudo_full[:, full_col[m]]
        agg[s.id] = total
    return agg


def run_multilayer(network: RadialNetwork, partition: Partition, plan: MeteringPlan,
                   pseudo_history: PseudoHistory, meter_stream: MeterStream, T: int,
                   sf_mode: str = "complex", workers: int | None = None,
                   bad_data_k: float = 5.0, band_window: int = 1440,
                   band_min_history: int = 30, joseph: bool = False) -> EstimationRun:
    """Layered pipeline: filter the main area, then solve subareas outward.

    With an empty subarea list this is exactly the single-layer run.
    """
    if (partition.full.non_ref_buses != network.non_ref_buses
            or partition.full.reference != network.reference):
        raise ValidationError("partition was built for a different network")
    if not partition.subareas:
        return run_single_layer(network, plan, pseudo_history, meter_stream, T,
                                bad_data_k=bad_data_k, band_window=band_window,
                                band_min_history=band_min_history, joseph=joseph)

    t0 = time.perf_counter()
    diagnostics: dict = {}
    history = aligned_pseudo(network, pseudo_history)
    pseudo_full = history.values
    full_col = {b: k for k, b in enumerate(network.non_ref_buses)}
    main = partition.main
    boundary_of = {s.boundary: s.id for s in partition.subareas}

    # Boundary buses act purely as their subarea aggregate; a direct load
    # there would be silently absorbed, so reject it.
    for s in partition.subareas:
        col = full_col[s.boundary]
        if np.abs(pseudo_full[:, col]).max() > 1e-9:
            raise ValidationError(
                f"boundary bus {s.boundary!r} carries pseudo load; move it into the subarea")

    agg_pseudo = _aggregate_pseudo(partition, pseudo_full)

    def fold_to_main(array: np.ndarray) -> np.ndarray:
        """Aggregate a per-bus series onto the main-layer units: subarea
        sums at boundaries, the bus's own column elsewhere."""
        out = np.empty((array.shape[0], main.n), dtype=complex)
        for k, bus in enumerate(main.non_ref_buses):
            sid = boundary_of.get(bus)
            if sid is not None and partition.parent_of[sid] is None:
                cols = [full_col[m] for m in _all_member_buses(partition, sid)]
                out[:, k] = array[:, cols].sum(axis=1)
            else:
                out[:, k] = array[:, full_col[bus]]
        return out

    main_units = fold_to_main(pseudo_full)
    calib_main = None if history.calib_diff is None else fold_to_main(history.calib_diff)
    increments_main = None if history.increment_calib is None \
        else fold_to_main(history.increment_calib)

    main_plan = _restrict_plan(plan, partition, diagnostics)
    setup = _prepare_filter(main, main_plan, main_units, calib_main, meter_stream, T,
                            diagnostics, joseph=joseph, increment_calib=increments_main)

    head_branches = main.root_branches()
    missing = [b for b in head_branches if b not in main_plan.current_meters]
    if missing:
        raise PlanError(f"layered estimation needs a current meter on feeder-head branch "
                        f"{missing[0]!r}")
    head_idx = [main_plan.current_meters.index(b) for b in head_branches]

    subarea_setups: dict[str, _SubareaSetup] = {}
    for s in partition.subareas:
        bibc_s = build_bibc(s.network)
        dlf_s = build_dlf(s.network, bibc_s)
        unit = np.empty((pseudo_full.shape[0], s.network.n), dtype=complex)
        child_at = {}
        for k, bus in enumerate(s.network.non_ref_buses):
            child = boundary_of.get(bus)
            if child is not None and partition.parent_of[child] == s.id:
                unit[:, k] = agg_pseudo[child]
                child_at[bus] = child
            else:
                unit[:, k] = pseudo_full[:, full_col[bus]]
        subarea_setups[s.id] = _SubareaSetup(
            subarea=s, bibc=bibc_s, dlf=dlf_s, unit_pseudo=unit,
            member_cols_full=np.array([full_col[b] for b in s.network.non_ref_buses], dtype=int),
            child_at=child_at)

    loop = _FilterLoop(setup, bad_data_k=bad_data_k, band_window=band_window,
                       band_min_history=band_min_history)
    voltages = np.empty((T, network.n), dtype=complex)
    injections = np.zeros((T, network.n), dtype=complex)
    main_cols = np.array([full_col[b] for b in main.non_ref_buses], dtype=int)
    main_state_of_boundary = {s.id: main.bus_index(s.boundary)
                              for s in partition.subareas if partition.parent_of[s.id] is None}

    sf_dev = 0.0
    conservation_dev = 0.0
    degenerate_steps = 0
    executor = ThreadPoolExecutor(max_workers=workers) if workers else None

    def solve_subarea(sid: str, total: complex, v_boundary: complex, t: int, results: dict):
        ss = subarea_setups[sid]
        sf, degenerate = _factors_or_equal_shares(ss.unit_pseudo, t, sf_mode,
                                                  ss.subarea.network.non_ref_buses)
        updated = update_pseudo_injections(sf, total)
        flow = subarea_forward_solve(ss.bibc, ss.dlf, updated, v_boundary)
        results[sid] = (ss, sf, updated, flow, degenerate)

    t1 = time.perf_counter()
    try:
        for t in range(T):
            sf_main, degenerate = _factors_or_equal_shares(main_units, t, sf_mode,
                                                           main.non_ref_buses)
            degenerate_steps += degenerate
            total_meas = sum(setup.y_meters[t, i] for i in head_idx)
            y_pseudo = update_pseudo_injections(sf_main, total_meas)
            sf_dev = max(sf_dev, abs(sf_main.sf.sum() - 1.0))
            conservation_dev = max(conservation_dev, abs(y_pseudo.sum() - total_meas))

            state = loop.step(y_pseudo, t)
            v_main = setup.v_ref[t] - setup.dlf.entries @ state.x_hat
            voltages[t, main_cols] = v_main
            injections[t, main_cols] = state.x_hat
            for s in partition.subareas:
                injections[t, full_col[s.boundary]] = 0.0

            handoff = LayerEstimate(
                state=state,
                boundary_voltages={sid: v_main[main.bus_index(partition.subarea(sid).boundary)]
                                   for sid in main_state_of_boundary},
                totals={sid: state.x_hat[idx]
                        for sid, idx in main_state_of_boundary.items()})

            for layer_ids in partition.layer_schedule:
                due = [sid for sid in layer_ids if sid in handoff.totals]
                results: dict = {}
                if executor is not None and len(due) > 1:
                    futures = [executor.submit(solve_subarea, sid, handoff.totals[sid],
                                               handoff.boundary_voltages[sid], t, results)
                               for sid in due]
                    for f in futures:
                        f.result()
                else:
                    for sid in due:
                        solve_subarea(sid, handoff.totals[sid],
                                      handoff.boundary_voltages[sid], t, results)
                next_totals = dict(handoff.totals)
                next_voltages = dict(handoff.boundary_voltages)
                for sid in due:
                    ss, sf, updated, flow, degenerate = results[sid]
                    degenerate_steps += degenerate
                    sf_dev = max(sf_dev, abs(sf.sf.sum() - 1.0))
                    conservation_dev = max(conservation_dev,
                                           abs(updated.sum() - handoff.totals[sid]))
                    voltages[t, ss.member_cols_full] = flow.bus_voltages
                    injections[t, ss.member_cols_full] = updated
                    for bus, child in ss.child_at.items():
                        b_idx = ss.subarea.network.bus_index(bus)
                        next_totals[child] = flow.branch_currents[b_idx]
                        next_voltages[child] = flow.bus_voltages[b_idx]
                        injections[t, full_col[bus]] = 0.0
                handoff = LayerEstimate(state=state, boundary_voltages=next_voltages,
                                        totals=next_totals)
    finally:
        if executor is not None:
            executor.shutdown()
    t2 = time.perf_counter()

    diagnostics["regularized_steps"] = loop.regularized_steps
    diagnostics["scaling_factor_sum_max_dev"] = sf_dev
    diagnostics["conservation_max_dev"] = conservation_dev
    if degenerate_steps:
        diagnostics["degenerate_scaling_steps"] = degenerate_steps
    return EstimationRun(bus_ids=network.non_ref_buses, voltages=voltages,
                         injections=injections, offline_seconds=t1 - t0,
                         realtime_seconds=t2 - t1, bad_data=loop.bad_data_report(),
                         diagnostics=diagnostics)


def _all_member_buses(partition: Partition, sid: str) -> list:
    """All load buses aggregated by a subarea, nested children included."""
    s = partition.subarea(sid)
    boundary_of = {c.boundary: c.id for c in partition.subareas}
    out = []
    for m in s.members:
        child = boundary_of.get(m)
        if child is not None and partition.parent_of[child] == sid:
            out.extend(_all_member_buses(partition, child))
        else:
            out.append(m)
    return out


def _restrict_plan(plan: MeteringPlan, partition: Partition, diagnostics: dict) -> MeteringPlan:
    """Keep only devices that live on the main network.

    Pseudo rows cover every main state (their values come from the
    scaling-factor update); a boundary unit's declared accuracy is the root
    sum of squares of its member accuracies.
    """
    main = partition.main
    main_buses = set(main.non_ref_buses)
    main_branches = set(main.branch_ids)
    v_keep = [b for b in plan.voltage_meters if b in main_buses]
    c_keep = [b for b in plan.current_meters if b in main_branches]
    dropped = [d for d in plan.voltage_meters if d not in main_buses] + \
              [d for d in plan.current_meters if d not in main_branches]
    if dropped:
        diagnostics["meters_outside_main_area"] = dropped
    if plan.reference_metered:
        v_keep = [main.reference] + v_keep
    boundary_of = {s.boundary: s.id for s in partition.subareas
                   if partition.parent_of[s.id] is None}
    pseudo_sd = {}
    for bus in main.non_ref_buses:
        if bus in boundary_of:
            members = _all_member_buses(partition, boundary_of[bus])
            pseudo_sd[bus] = float(np.sqrt(sum(_resolve_sd(plan.pseudo_sd, m) ** 2
                                               for m in members)))
        else:
            pseudo_sd[bus] = _resolve_sd(plan.pseudo_sd, bus)
    return MeteringPlan.for_network(main, voltage_meters=v_keep, current_meters=c_keep,
                                    meter_sd=plan.meter_sd, pseudo_sd=pseudo_sd)
