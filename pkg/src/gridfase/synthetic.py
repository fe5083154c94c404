"""Synthetic load, PV and meter data with the statistical structure the
estimators assume: per-customer complex load currents whose one-minute
increments are white, previous-day pseudo data correlated with the truth
day, improper (real-dominated) pseudo measurement noise, and circular
meter noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .measurement import MeterChannel, MeterStream, MeteringPlan, PseudoHistory, _resolve_sd
from .network import RadialNetwork, build_bibc, build_dlf

MINUTES_PER_DAY = 1440

# Split of pseudo-noise power between real and imaginary parts; loads are
# active-power dominated, which makes the noise improper.
PSEUDO_REAL_FRAC = 0.81


@dataclass(frozen=True)
class PvParams:
    """Midday-peaked generation shape plus slow multiplicative cloud noise.

    Each system's window is jittered per customer (orientation spread), so
    the fleet's ramps do not move in lockstep.
    """

    capacity_frac_low: float = 0.3
    capacity_frac_high: float = 0.8
    start_minute: int = 360
    end_minute: int = 1080
    window_jitter_minutes: float = 60.0
    cloud_walk_sd: float = 0.005
    cloud_bound: float = 0.4


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce a scenario from one seed."""

    seed: int = 0
    areas: int = 5
    customers_per_area: int = 20
    T: int = 1440
    increment_sd: float = 0.0001
    imag_increment_frac: float = 0.3
    pv_penetration: float = 0.2
    pv: PvParams = field(default_factory=PvParams)
    day_correlation: float = 0.8
    meter_sd: float = 0.05
    pseudo_sd: float = 0.1
    junction_pseudo_sd: float = 1e-4
    walk_min: float = 0.1
    walk_max: float = 2.0
    initial_mag_low: float = 0.15
    initial_mag_high: float = 0.55
    initial_angle_low: float = 0.05
    initial_angle_high: float = 0.35
    topology: str = "bus-per-area"  # or "lateral"
    spine_r: float = 0.01
    spine_x: float = 0.02
    lateral_r: float = 0.000125
    lateral_x: float = 0.00025
    nested_area: int | None = None  # lateral topology: area whose lateral is split
    nested_at: int = 10             # member position of the split junction
    base_voltage: float = 400.0
    base_power: float = 100e3

    def __post_init__(self):
        if not 0.0 <= self.pv_penetration <= 1.0:
            raise ValidationError("pv_penetration must be in [0, 1]")
        for name in ("increment_sd", "meter_sd", "pseudo_sd"):
            if getattr(self, name) < 0.0:
                raise ValidationError(f"{name} must be non-negative")
        if not 0.0 < self.day_correlation < 1.0:
            raise ValidationError("day_correlation must be in (0, 1)")
        if self.topology not in ("bus-per-area", "lateral"):
            raise ValidationError(f"unknown topology {self.topology!r}")

    def with_overrides(self, **kwargs) -> "ScenarioConfig":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class FeederLayout:
    """Network plus the customer-to-bus map and area bookkeeping."""

    network: RadialNetwork
    customer_bus: tuple        # bus id per customer
    area_of_bus: dict          # bus id -> area label (load buses only)
    junction_buses: tuple      # buses that carry no load by construction
    subarea_spec: tuple        # dicts: {id, boundary, members} for partitioning


def build_feeder(config: ScenarioConfig) -> FeederLayout:
    """Construct the scenario feeder.

    ``bus-per-area``: a chain of area buses, each aggregating all customers
    of its area (the classic small-feeder case).  ``lateral``: a spine of
    junction buses, each feeding a lateral chain with one customer per bus;
    one lateral may carry a nested split junction for a deeper layer.
    """
    spine_z = complex(config.spine_r, config.spine_x)
    lateral_z = complex(config.lateral_r, config.lateral_x)
    branches = []
    customer_bus = []
    area_of_bus = {}
    junctions = []
    subareas = []

    if config.topology == "bus-per-area":
        previous = "1"
        for k in range(1, config.areas + 1):
            bus = str(k + 1)
            branches.append((previous, bus, spine_z))
            area_of_bus[bus] = f"area{k}"
            customer_bus.extend([bus] * config.customers_per_area)
            previous = bus
    else:
        previous = "1"
        for k in range(1, config.areas + 1):
            boundary = f"s{k}"
            branches.append((previous, boundary, spine_z))
            junctions.append(boundary)
            previous = boundary
            members = []
            upstream = boundary
            for j in range(1, config.customers_per_area + 1):
                bus = f"a{k}-{j}"
                branches.append((upstream, bus, lateral_z))
                members.append(bus)
                area_of_bus[bus] = f"area{k}"
                customer_bus.append(bus)
                upstream = bus
                if config.nested_area == k and j == config.nested_at:
                    split = f"a{k}x"
                    branches.append((upstream, split, lateral_z))
                    members.append(split)
                    junctions.append(split)
                    upstream = split
            if config.nested_area == k:
                split = f"a{k}x"
                at = members.index(split)
                subareas.append({"id": f"sub{k}", "boundary": boundary,
                                 "members": members[:at + 1]})
                subareas.append({"id": f"sub{k}n", "boundary": split,
                                 "members": members[at + 1:]})
            else:
                subareas.append({"id": f"sub{k}", "boundary": boundary, "members": members})

    network = RadialNetwork.from_branches("1", branches, phase="1")
    return FeederLayout(network=network, customer_bus=tuple(customer_bus),
                        area_of_bus=area_of_bus, junction_buses=tuple(junctions),
                        subarea_spec=tuple(subareas))


@dataclass
class TruthRun:
    """Ground truth plus everything an estimator is allowed to see."""

    config: ScenarioConfig
    layout: FeederLayout
    customers: np.ndarray          # (T, n_customers) true injected currents
    injections: np.ndarray         # (T, n_buses) aggregated per network bus
    bus_voltages: np.ndarray       # (T, n_buses) true voltages
    branch_currents: np.ndarray    # (T, n_branches)
    v_ref: np.ndarray              # (T,) reference-bus voltage
    pseudo_day: np.ndarray         # (T, n_customers) previous-day profile (clean)
    pseudo_measured: np.ndarray    # (T, n_buses) pseudo data incl. billing noise
    calib_diff: np.ndarray         # (T, n_buses) consecutive-day differences
    increment_calib: np.ndarray    # (T, n_buses) historical measured day (clean)

    @property
    def network(self) -> RadialNetwork:
        return self.layout.network

    def pseudo_history(self) -> PseudoHistory:
        return PseudoHistory(bus_ids=self.network.non_ref_buses,
                             values=self.pseudo_measured, calib_diff=self.calib_diff,
                             increment_calib=self.increment_calib)

    def metering_plan(self, voltage_meters=None, current_meters=None) -> MeteringPlan:
        """Default plan: feeder-head voltage and current only."""
        net = self.network
        if voltage_meters is None:
            voltage_meters = [net.reference]
        if current_meters is None:
            current_meters = list(net.root_branches())
        pseudo_sd = {b: (self.config.junction_pseudo_sd
                         if b in self.layout.junction_buses else self.config.pseudo_sd)
                     for b in net.non_ref_buses}
        return MeteringPlan.for_network(net, voltage_meters=voltage_meters,
                                        current_meters=current_meters,
                                        meter_sd=self.config.meter_sd, pseudo_sd=pseudo_sd)


def _reflect_magnitude(values: np.ndarray, low: float, high: float) -> np.ndarray:
    mag = np.abs(values)
    over = mag > high
    if over.any():
        values = np.where(over, values * (2 * high - mag) / mag, values)
        mag = np.abs(values)
    under = mag < low
    if under.any():
        values = np.where(under, values * (2 * low - mag) / np.maximum(mag, 1e-12), values)
    return values


def _load_walk(rng, start: np.ndarray, T: int, config: ScenarioConfig) -> np.ndarray:
    n = start.shape[0]
    out = np.empty((T, n), dtype=complex)
    current = start.copy()
    sd_re = config.increment_sd
    sd_im = config.increment_sd * config.imag_increment_frac
    for t in range(T):
        w = rng.normal(0.0, sd_re, n) + 1j * rng.normal(0.0, sd_im, n)
        current = _reflect_magnitude(current + w, config.walk_min, config.walk_max)
        out[t] = current
    return out


def _pv_shapes(capacities: np.ndarray, T: int, pv: PvParams,
               starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Deterministic per-customer generation shapes (T, n_pv)."""
    minutes = (np.arange(T) % MINUTES_PER_DAY)[:, None]
    width = np.maximum(ends - starts, 1.0)[None, :]
    phase = (minutes - starts[None, :]) / width
    shape = np.where((phase >= 0.0) & (phase <= 1.0), np.sin(np.pi * phase), 0.0)
    return capacities[None, :] * shape


def _pv_term(rng, shapes: np.ndarray, pv: PvParams) -> np.ndarray:
    """Negative real injection: the deterministic shape times a cloud factor
    that follows a slow bounded walk (so generation increments stay white)."""
    T, n = shapes.shape
    cloud = np.empty((T, n))
    level = np.zeros(n)
    for t in range(T):
        level = level + rng.normal(0.0, pv.cloud_walk_sd, n)
        level = np.clip(level, -pv.cloud_bound, pv.cloud_bound)
        cloud[t] = level
    return -(shapes * (1.0 + cloud)).astype(complex)


def _mix_days(truth: np.ndarray, independent: np.ndarray, correlation: float,
              shared: np.ndarray = 0.0) -> np.ndarray:
    """Correlated previous-day surrogate, rescaled to the same marginal SD.

    ``shared`` is the deterministic component both days have in common (the
    expected generation shape); only the stochastic anomaly is mixed and
    rescaled, so the shared part carries over unchanged.
    """
    c = correlation
    raw = c * (truth - shared) + (1.0 - c) * (independent - shared)
    mean = raw.mean(axis=0, keepdims=True)
    return shared + mean + (raw - mean) / np.sqrt(c ** 2 + (1.0 - c) ** 2)


def _pseudo_noise(rng, shape, sd: float) -> np.ndarray:
    sd_re = np.sqrt(PSEUDO_REAL_FRAC) * sd
    sd_im = np.sqrt(1.0 - PSEUDO_REAL_FRAC) * sd
    return rng.normal(0.0, sd_re, shape) + 1j * rng.normal(0.0, sd_im, shape)


def generate_profiles(config: ScenarioConfig) -> TruthRun:
    """Generate one scenario: truth day, previous-day pseudo data, and the
    consecutive-day calibration differences, all reproducible from the seed."""
    layout = build_feeder(config)
    net = layout.network
    n_cust = len(layout.customer_bus)
    seeds = np.random.SeedSequence(config.seed).spawn(8)
    rng_start, rng_truth, rng_ind, rng_h1, rng_h2, rng_pv, rng_noise, _ = \
        [np.random.default_rng(s) for s in seeds]

    mags = rng_start.uniform(config.initial_mag_low, config.initial_mag_high, n_cust)
    angles = rng_start.uniform(config.initial_angle_low, config.initial_angle_high, n_cust)
    start = mags * np.exp(-1j * angles)  # lagging power factor

    # PV adoption is stratified per area (uniform uptake across the feeder).
    per_area = int(round(config.pv_penetration * config.customers_per_area))
    pv_lists = []
    for k in range(config.areas):
        base = k * config.customers_per_area
        if per_area:
            picks = rng_pv.choice(config.customers_per_area, size=per_area, replace=False)
            pv_lists.append(base + np.sort(picks))
    pv_idx = np.concatenate(pv_lists).astype(int) if pv_lists else np.array([], int)
    n_pv = len(pv_idx)
    capacities = rng_pv.uniform(config.pv.capacity_frac_low, config.pv.capacity_frac_high,
                                n_pv) * mags[pv_idx] if n_pv else np.zeros(0)
    jitter = config.pv.window_jitter_minutes
    pv_starts = config.pv.start_minute + rng_pv.uniform(-jitter, jitter, n_pv)
    pv_ends = config.pv.end_minute + rng_pv.uniform(-jitter, jitter, n_pv)
    shapes = _pv_shapes(capacities, config.T, config.pv, pv_starts, pv_ends) if n_pv else None

    def one_day(rng, T):
        day = _load_walk(rng, start, T, config)
        if n_pv:
            day[:, pv_idx] += _pv_term(rng, shapes, config.pv)
        return day

    # Expected generation, shared by every day of the same customer.
    pv_expected = np.zeros((config.T, n_cust), dtype=complex)
    if n_pv:
        pv_expected[:, pv_idx] = -shapes

    truth = one_day(rng_truth, config.T)
    independent = one_day(rng_ind, config.T)
    pseudo_day = _mix_days(truth, independent, config.day_correlation, shared=pv_expected)

    hist1 = one_day(rng_h1, config.T)
    hist2 = _mix_days(hist1, one_day(rng_h2, config.T), config.day_correlation,
                      shared=pv_expected)

    # Aggregate customers onto their buses; junctions stay identically zero.
    n_buses = net.n
    col = {b: k for k, b in enumerate(net.non_ref_buses)}
    agg = np.zeros((n_cust, n_buses))
    for i, bus in enumerate(layout.customer_bus):
        agg[i, col[bus]] = 1.0
    injections = truth @ agg
    pseudo_bus = pseudo_day @ agg
    calib_clean = (hist2 - hist1) @ agg

    loaded = np.zeros(n_buses)
    loaded[[col[b] for b in set(layout.customer_bus)]] = 1.0
    noise_now = _pseudo_noise(rng_noise, pseudo_bus.shape, config.pseudo_sd) * loaded
    noise_h1 = _pseudo_noise(rng_noise, pseudo_bus.shape, config.pseudo_sd) * loaded
    noise_h2 = _pseudo_noise(rng_noise, pseudo_bus.shape, config.pseudo_sd) * loaded
    pseudo_measured = pseudo_bus + noise_now
    calib_diff = calib_clean + noise_h2 - noise_h1

    bibc = build_bibc(net)
    dlf = build_dlf(net, bibc)
    v_ref = np.ones(config.T, dtype=complex)
    branch_currents = injections @ bibc.entries.T
    bus_voltages = v_ref[:, None] - injections @ dlf.entries.T

    return TruthRun(config=config, layout=layout, customers=truth, injections=injections,
                    bus_voltages=bus_voltages, branch_currents=branch_currents, v_ref=v_ref,
                    pseudo_day=pseudo_day, pseudo_measured=pseudo_measured,
                    calib_diff=calib_diff, increment_calib=hist1 @ agg)


@dataclass(frozen=True)
class SpikeSpec:
    """A bad-data spike: at ``step``, ``device`` reads ``sds`` standard
    deviations away from the truth."""

    step: int
    device: str
    sds: float


def corrupt_measurements(truth: TruthRun, plan: MeteringPlan, seed: int,
                         spikes=(), magnitude_only=()) -> MeterStream:
    """Meter readings: truth plus circular complex noise, optional spikes.

    The reference-bus voltage meter is the network datum and is emitted
    noise-free.  Devices listed in ``magnitude_only`` are written without
    angles.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    net = truth.network
    magnitude_only = {str(d) for d in magnitude_only}
    channels: dict[str, MeterChannel] = {}

    def noisy(series: np.ndarray, sd: float) -> np.ndarray:
        noise = rng.normal(0.0, sd / np.sqrt(2.0), series.shape) \
            + 1j * rng.normal(0.0, sd / np.sqrt(2.0), series.shape)
        return series + noise

    readings: dict[str, np.ndarray] = {}
    if plan.reference_metered:
        readings[net.reference] = truth.v_ref.copy()
    for bus in plan.voltage_meters:
        series = truth.bus_voltages[:, net.bus_index(bus)]
        readings[bus] = noisy(series, _resolve_sd(plan.meter_sd, bus))
    for branch in plan.current_meters:
        series = truth.branch_currents[:, net.branch_index(branch)]
        readings[branch] = noisy(series, _resolve_sd(plan.meter_sd, branch))

    for spike in spikes:
        device = str(spike.device)
        if device not in readings:
            raise ValidationError(f"spike on unmetered device {device!r}")
        sd = _resolve_sd(plan.meter_sd, device)
        phase = np.exp(1j * rng.uniform(0.0, 2.0 * np.pi))
        readings[device][spike.step] += spike.sds * sd * phase

    for device, series in readings.items():
        kind = "I" if device in plan.current_meters else "V"
        if device in magnitude_only:
            channels[device] = MeterChannel(kind=kind, magnitude=np.abs(series), angle_deg=None)
        else:
            channels[device] = MeterChannel(kind=kind, magnitude=np.abs(series),
                                            angle_deg=np.rad2deg(np.angle(series)))
    return MeterStream(channels=channels)


def aggregate_subarea(profiles: np.ndarray, membership) -> dict:
    """Sum member columns per group; ``membership`` maps group id -> column
    indices.  An empty group is an error."""
    out = {}
    for group, idx in membership.items():
        idx = list(idx)
        if not idx:
            raise ValidationError(f"subarea {group!r} has no members")
        out[str(group)] = profiles[:, idx].sum(axis=1)
    return out
