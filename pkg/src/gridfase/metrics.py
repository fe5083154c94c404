"""Error metrics and the estimator comparison harness.

Voltage magnitude errors are reported in percent of the true magnitude,
angle errors in degrees (wrapped), and the SD columns are standard
deviations of the signed errors.  All statistics pool every time step of
every bus in an area.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .errors import ShapeError

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class AreaErrors:
    amve_pct: float
    mmve_pct: float
    aave_deg: float
    mave_deg: float
    sd_pu: float
    sd_deg: float


@dataclass
class ErrorReport:
    """Per-area error statistics plus run timing."""

    areas: dict
    wall_time_s: float = 0.0
    offline_time_s: float = 0.0
    iterations: int = 1

    def area(self, name: str) -> AreaErrors:
        return self.areas[name]

    def worst(self, metric: str = "mmve_pct") -> float:
        return max(getattr(a, metric) for a in self.areas.values())


def _wrap_degrees(values: np.ndarray) -> np.ndarray:
    wrapped = (values + 180.0) % 360.0 - 180.0
    return np.where(wrapped == -180.0, 180.0, wrapped)


def compute_metrics(estimates: np.ndarray, truth: np.ndarray, area_map=None,
                    bus_ids=None, wall_time_s: float = 0.0, offline_time_s: float = 0.0,
                    iterations: int = 1) -> ErrorReport:
    """Pool per-step errors by area.

    ``estimates`` and ``truth`` are (T, buses) complex voltages in the same
    bus order.  ``area_map`` maps bus id to an area label; without it, all
    buses form one area named 'all'.
    """
    est = np.asarray(estimates, dtype=complex)
    tru = np.asarray(truth, dtype=complex)
    if est.shape != tru.shape:
        raise ShapeError(f"estimates {est.shape} and truth {tru.shape} differ")
    n = est.shape[1]
    if bus_ids is None:
        bus_ids = tuple(str(i) for i in range(n))
    if len(bus_ids) != n:
        raise ShapeError(f"{len(bus_ids)} bus ids for {n} columns")

    if area_map is None:
        groups = {"all": list(range(n))}
    else:
        groups = {}
        for k, bus in enumerate(bus_ids):
            area = area_map.get(str(bus))
            if area is None:
                continue
            groups.setdefault(str(area), []).append(k)

    mag_err = np.abs(est) - np.abs(tru)
    rel_pct = 100.0 * np.abs(mag_err) / np.abs(tru)
    ang_err = _wrap_degrees(np.rad2deg(np.angle(est) - np.angle(tru)))

    areas = {}
    for area, cols in sorted(groups.items()):
        m = mag_err[:, cols]
        r = rel_pct[:, cols]
        a = ang_err[:, cols]
        areas[area] = AreaErrors(
            amve_pct=float(r.mean()),
            mmve_pct=float(r.max()),
            aave_deg=float(np.abs(a).mean()),
            mave_deg=float(np.abs(a).max()),
            sd_pu=float(m.std()),
            sd_deg=float(a.std()),
        )
    return ErrorReport(areas=areas, wall_time_s=float(wall_time_s),
                       offline_time_s=float(offline_time_s), iterations=int(iterations))


def per_step_errors(estimates: np.ndarray, truth: np.ndarray, bus_ids,
                    estimator: str = "") -> pd.DataFrame:
    """Long-format per-step errors for external plotting."""
    est = np.asarray(estimates, dtype=complex)
    tru = np.asarray(truth, dtype=complex)
    if est.shape != tru.shape:
        raise ShapeError(f"estimates {est.shape} and truth {tru.shape} differ")
    T, n = est.shape
    steps = np.repeat(np.arange(T), n)
    buses = np.tile(np.asarray([str(b) for b in bus_ids]), T)
    mag_err = (np.abs(est) - np.abs(tru)).ravel()
    ang_err = _wrap_degrees(np.rad2deg(np.angle(est) - np.angle(tru))).ravel()
    frame = pd.DataFrame({
        "step": steps,
        "bus": buses,
        "mag_err_pu": mag_err,
        "ang_err_deg": ang_err,
    })
    if estimator:
        frame.insert(0, "estimator", estimator)
    return frame


@dataclass
class BenchmarkResult:
    report: ErrorReport | None
    realtime_median_s: float = float("nan")
    offline_median_s: float = float("nan")
    error: str | None = None


@dataclass
class BenchmarkReport:
    """Per-estimator error reports with median wall times."""

    results: dict
    repetitions: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"format_version": REPORT_FORMAT_VERSION, "repetitions": self.repetitions,
               "metadata": self.metadata, "estimators": {}}
        for name, res in self.results.items():
            entry = {
                "realtime_median_s": res.realtime_median_s,
                "offline_median_s": res.offline_median_s,
                "error": res.error,
            }
            if res.report is not None:
                entry["wall_time_s"] = res.report.wall_time_s
                entry["offline_time_s"] = res.report.offline_time_s
                entry["iterations"] = res.report.iterations
                entry["areas"] = {a: asdict(v) for a, v in res.report.areas.items()}
            out["estimators"][name] = entry
        return out


def run_benchmark(estimators: dict, truth_voltages: np.ndarray, bus_ids, area_map=None,
                  repetitions: int = 1, metadata: dict | None = None) -> BenchmarkReport:
    """Run each estimator on identical inputs and compare.

    ``estimators`` maps a name to a zero-argument callable returning an
    EstimationRun.  Repetitions rerun the estimator for timing stability;
    metrics come from the final run.  A failing estimator is recorded and
    the benchmark continues.
    """
    results = {}
    for name, runner in estimators.items():
        realtimes, offlines = [], []
        run = None
        error = None
        try:
            for _ in range(max(1, int(repetitions))):
                run = runner()
                realtimes.append(run.realtime_seconds)
                offlines.append(run.offline_seconds)
        except Exception as exc:  # noqa: BLE001 - benchmark isolates failures
            error = f"{type(exc).__name__}: {exc}"
        if run is None:
            results[name] = BenchmarkResult(report=None, error=error)
            continue
        report = compute_metrics(run.voltages, truth_voltages, area_map=area_map,
                                 bus_ids=bus_ids, wall_time_s=float(np.median(realtimes)),
                                 offline_time_s=float(np.median(offlines)))
        results[name] = BenchmarkResult(report=report,
                                        realtime_median_s=float(np.median(realtimes)),
                                        offline_median_s=float(np.median(offlines)),
                                        error=error)
    return BenchmarkReport(results=results, repetitions=int(repetitions),
                           metadata=metadata or {})


def write_report(path, report: BenchmarkReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)


def format_report_table(report: BenchmarkReport) -> str:
    """Human-readable comparison table."""
    lines = []
    header = f"{'estimator':<18}{'area':<10}{'AMVE%':>9}{'MMVE%':>9}{'AAVEdeg':>9}" \
             f"{'MAVEdeg':>9}{'SDpu':>10}{'SDdeg':>9}{'rt_s':>9}"
    lines.append(header)
    lines.append("-" * len(header))
    for name, res in report.results.items():
        if res.report is None:
            lines.append(f"{name:<18}FAILED: {res.error}")
            continue
        for area, err in res.report.areas.items():
            lines.append(
                f"{name:<18}{area:<10}{err.amve_pct:>9.4f}{err.mmve_pct:>9.4f}"
                f"{err.aave_deg:>9.4f}{err.mave_deg:>9.4f}{err.sd_pu:>10.6f}"
                f"{err.sd_deg:>9.4f}{res.realtime_median_s:>9.3f}")
    return "\n".join(lines)
