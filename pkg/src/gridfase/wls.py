"""Snapshot weighted least squares on the same linear measurement model.

The model is strictly linear in the complex injections, so the weighted
problem solves in one factorization; ``max_iterations`` exists only for
interface parity with iterative implementations and is reported as used.
The per-snapshot runner sees exactly the same measurement vectors as the
filter, which makes the temporal refinement the only difference measured.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ObservabilityError, ValidationError
from .measurement import (MeteringPlan, MeterStream, ObservationMatrix, PseudoHistory,
                          _resolve_sd, aligned_pseudo, build_observation_matrix,
                          prepare_meter_arrays)
from .network import RadialNetwork, build_bibc, build_dlf


@dataclass(frozen=True)
class WlsConfig:
    """Per-row weights (1/variance) and an iteration cap kept at 1."""

    weights: np.ndarray
    max_iterations: int = 1

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w <= 0.0) or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be strictly positive and finite")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_plan(cls, plan: MeteringPlan) -> "WlsConfig":
        """Default weights from declared device accuracy: 1/sd^2 per row."""
        sds = [_resolve_sd(plan.pseudo_sd, b) for b in plan.pseudo_buses]
        sds += [_resolve_sd(plan.meter_sd, d) for d in plan.current_meters]
        sds += [_resolve_sd(plan.meter_sd, d) for d in plan.voltage_meters]
        return cls(weights=1.0 / np.asarray(sds, dtype=float) ** 2)


def wls_estimate(h: ObservationMatrix, y, config: WlsConfig) -> np.ndarray:
    """Minimize sum_r w_r |y_r - (H x)_r|^2 over complex x.

    Solved by scaling rows with sqrt(w) and taking a least-squares
    factorization; weight scaling by any positive constant leaves the
    estimate unchanged.
    """
    y = np.asarray(y, dtype=complex)
    matrix = h.h
    if y.shape != (matrix.shape[0],):
        raise ValidationError(f"y has shape {y.shape}, H has {matrix.shape[0]} rows")
    if config.weights.shape != (matrix.shape[0],):
        raise ValidationError(
            f"weights have shape {config.weights.shape}, H has {matrix.shape[0]} rows")
    scale = np.sqrt(config.weights)
    a = matrix * scale[:, None]
    b = y * scale
    solution, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < matrix.shape[1]:
        raise ObservabilityError(f"weighted H has rank {rank} < {matrix.shape[1]} states")
    return solution


def run_wls_snapshot(network: RadialNetwork, plan: MeteringPlan,
                     pseudo_history: PseudoHistory, meter_stream: MeterStream, T: int):
    """Per-step WLS over the same frames the filter consumes.

    Returns an EstimationRun; no information crosses time steps.
    """
    from .layering import EstimationRun  # runner result type lives with the orchestrators

    t0 = time.perf_counter()
    diagnostics: dict = {"iterations": 1}
    values = aligned_pseudo(network, pseudo_history).values
    bibc = build_bibc(network)
    dlf = build_dlf(network, bibc)
    h = build_observation_matrix(plan, bibc, dlf)
    config = WlsConfig.from_plan(plan)
    v_ref, y_meters = prepare_meter_arrays(network, plan, meter_stream, T, values, diagnostics)
    bus_col = {b: k for k, b in enumerate(network.non_ref_buses)}
    pseudo_cols = np.array([bus_col[b] for b in plan.pseudo_buses], dtype=int)

    voltages = np.empty((T, network.n), dtype=complex)
    injections = np.empty((T, network.n), dtype=complex)
    t1 = time.perf_counter()
    for t in range(T):
        y = np.concatenate([values[t, pseudo_cols], y_meters[t]])
        x = wls_estimate(h, y, config)
        injections[t] = x
        voltages[t] = v_ref[t] - dlf.entries @ x
    t2 = time.perf_counter()
    return EstimationRun(bus_ids=network.non_ref_buses, voltages=voltages,
                         injections=injections, offline_seconds=t1 - t0,
                         realtime_seconds=t2 - t1, bad_data=None, diagnostics=diagnostics)
