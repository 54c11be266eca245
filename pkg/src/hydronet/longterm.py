"""Continuous-record workflow: segment, parameterize, predict, concatenate.

A long flow/concentration record is cut into storm events by hysteresis
thresholding, each event is fitted to the five-parameter loading form,
the surrogate predicts outlet concentration per event, and the per-event
discharge series are stitched back into one continuous effluent record
with an overall removal ratio.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.special import digamma

from .loading import DEFAULT_GEOMETRY, StormParams, TankGeometry, gamma_hydrograph, hydrograph_q

FIT_EPS_K = 1e-6   # offset in the log(k - 1 + eps) fit coordinate
LM_MAX_ITER = 200
LM_STEP_TOL = 1e-8


@dataclass(frozen=True)
class TimeSeriesRecord:
    """Uniformly sampled flow (m^3/min) and concentration (kg/m^3) series."""

    t: np.ndarray
    q: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if not (len(self.t) == len(self.q) == len(self.c)):
            raise ValueError("record columns must have equal length")
        if len(self.t) < 2:
            raise ValueError("record needs at least two samples")
        steps = np.diff(self.t)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-9):
            raise ValueError("record time grid must be uniform")
        if np.any(self.q < 0) or np.any(self.c < 0):
            raise ValueError("flow and concentration must be non-negative")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])


def read_record_csv(path) -> TimeSeriesRecord:
    data = np.genfromtxt(path, delimiter=",", names=True)
    for col in ("t_seconds", "q_m3_per_min", "c_kg_per_m3"):
        if col not in (data.dtype.names or ()):
            raise ValueError(f"record CSV is missing column {col!r}")
    return TimeSeriesRecord(np.asarray(data["t_seconds"], dtype=np.float64),
                            np.asarray(data["q_m3_per_min"], dtype=np.float64),
                            np.asarray(data["c_kg_per_m3"], dtype=np.float64))


def write_record_csv(path, record: TimeSeriesRecord) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t_seconds", "q_m3_per_min", "c_kg_per_m3"])
        for t, q, c in zip(record.t, record.q, record.c):
            w.writerow([repr(float(t)), repr(float(q)), repr(float(c))])


@dataclass(frozen=True)
class EventSegment:
    """Half-open index window [start, end) of one storm event."""

    start: int
    end: int
    t: np.ndarray
    q: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError("event segment must have start < end")


def segment_events(record: TimeSeriesRecord, q_on: float, q_off: float,
                   min_gap_s: float) -> list:
    """Hysteresis segmentation with gap merging.

    An event opens when flow reaches q_on and closes only after flow stays
    below q_off for at least min_gap_s; shorter dry spells stay inside the
    event, which is how back-to-back storms merge into one extended event.
    """
    if q_off > q_on:
        raise ValueError("need q_off <= q_on")
    if q_off <= 0:
        raise ValueError("thresholds must be positive")
    gap_steps = max(1, math.ceil(min_gap_s / record.dt - 1e-9))
    q = record.q
    n = len(q)
    segments = []
    i = 0
    while i < n:
        if q[i] < q_on:
            i += 1
            continue
        start = i
        last_wet = i
        dry = 0
        j = i
        while j < n:
            if q[j] >= q_off:
                last_wet = j
                dry = 0
            else:
                dry += 1
                if dry >= gap_steps:
                    break
            j += 1
        end = last_wet + 1
        segments.append(EventSegment(start, end, record.t[start:end].copy(),
                                     record.q[start:end].copy(), record.c[start:end].copy()))
        i = j + 1
    return segments


@dataclass(frozen=True)
class EventFit:
    """Fitted loading parameters and fit residuals for one event."""

    params: StormParams
    rmse_q: float
    rmse_c: float
    converged: bool


def _flow_model(u: np.ndarray, t_min: np.ndarray) -> np.ndarray:
    lam, k, theta = math.exp(u[0]), math.exp(u[1]) + 1.0 - FIT_EPS_K, math.exp(u[2])
    return np.asarray(gamma_hydrograph(lam, max(k, 1e-9), theta, t_min))


def _flow_jacobian(u: np.ndarray, t_min: np.ndarray, q_model: np.ndarray) -> np.ndarray:
    k = math.exp(u[1]) + 1.0 - FIT_EPS_K
    theta = math.exp(u[2])
    jac = np.zeros((len(t_min), 3))
    pos = t_min > 0
    t_pos = t_min[pos]
    jac[pos, 0] = q_model[pos]
    jac[pos, 1] = q_model[pos] * (math.exp(u[1])) * (-digamma(k) - math.log(theta) + np.log(t_pos))
    jac[pos, 2] = q_model[pos] * (-k + t_pos / theta)
    return jac


def _fit_hydrograph(t_min: np.ndarray, q: np.ndarray) -> tuple:
    """Damped least squares in (log lam, log(k-1+eps), log theta) from moment init."""
    dt = float(t_min[1] - t_min[0]) if len(t_min) > 1 else 1.0
    lam0 = max(float(np.trapezoid(q, t_min)), 1e-12)
    t_peak = max(float(t_min[int(np.argmax(q))]), dt, 1e-3)
    t_mean = float(np.trapezoid(q * t_min, t_min) / max(np.trapezoid(q, t_min), 1e-300))
    ratio = t_mean / t_peak
    k0 = ratio / (ratio - 1.0) if ratio > 1.01 else 99.3
    k0 = min(max(k0, 1.05), 150.0)
    theta0 = max(t_peak / max(k0 - 1.0, 0.1), 0.23)
    u = np.array([math.log(lam0), math.log(k0 - 1.0 + FIT_EPS_K), math.log(theta0)])

    def cost(u_vec):
        return float(((_flow_model(u_vec, t_min) - q) ** 2).sum())

    mu = 1e-3
    converged = False
    best_u, best_cost = u.copy(), cost(u)
    for _ in range(LM_MAX_ITER):
        q_model = _flow_model(u, t_min)
        residual = q_model - q
        jac = _flow_jacobian(u, t_min, q_model)
        normal = jac.T @ jac
        grad = jac.T @ residual
        accepted = False
        for _ in range(25):
            damped = normal + mu * np.diag(np.maximum(np.diag(normal), 1e-12))
            try:
                delta = np.linalg.solve(damped, -grad)
            except np.linalg.LinAlgError:
                mu *= 4.0
                continue
            trial = np.clip(u + delta, -60.0, 60.0)
            trial_cost = cost(trial)
            if trial_cost < best_cost:
                u, best_cost = trial, trial_cost
                best_u = u.copy()
                mu = max(mu / 3.0, 1e-14)
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            break
        if np.linalg.norm(delta) / (np.linalg.norm(u) + 1e-12) < LM_STEP_TOL:
            converged = True
            break

    lam = math.exp(best_u[0])
    k = max(math.exp(best_u[1]) + 1.0 - FIT_EPS_K, 1.0 + 1e-9)
    theta = math.exp(best_u[2])
    rmse = math.sqrt(best_cost / len(q))
    return lam, k, theta, rmse, converged


def fit_event(seg: EventSegment) -> EventFit:
    """Parameterize one event: damped-LS hydrograph, log-linear pollutograph.

    Times are measured from the segment's first sample.  Concentration
    regression uses only samples with c > 0 (slope -> -kd/60 with kd per
    hour and time in minutes); kd is clamped non-negative.
    """
    if int((seg.q > 0).sum()) < 5:
        raise ValueError("event needs at least 5 samples with positive flow")
    t_min = (seg.t - seg.t[0]) / 60.0
    lam, k, theta, rmse_q, converged = _fit_hydrograph(t_min, seg.q)

    mask = seg.c > 0
    if int(mask.sum()) >= 2:
        slope, intercept = np.polyfit(t_min[mask], np.log(seg.c[mask]), 1)
        c0 = float(np.exp(intercept))
        kd = max(-60.0 * float(slope), 0.0)
    else:
        c0, kd = 0.0, 0.75
    params = StormParams(lam=lam, k=k, theta=theta, c0=c0, kd=kd)
    c_model = params.c0 * np.exp(-params.kd * t_min / 60.0)
    rmse_c = float(np.sqrt(np.mean((c_model - seg.c) ** 2)))
    return EventFit(params, rmse_q, rmse_c, converged)


@dataclass(frozen=True)
class DischargeSeries:
    """Outlet concentration and mass flux for one event on an absolute time grid."""

    times_s: np.ndarray
    c_out: np.ndarray        # kg/m^3
    flux: np.ndarray         # kg/min
    cumulative: np.ndarray   # kg

    @property
    def total_load(self) -> float:
        return float(self.cumulative[-1])


def outlet_probe(geometry: TankGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    return np.array([geometry.radius, 0.0, geometry.jet_height])


def _check_probe(probe: np.ndarray, geometry: TankGeometry) -> None:
    x, y, z = probe
    if x * x + y * y > geometry.radius**2 * (1 + 1e-9) or not 0 <= z <= geometry.depth:
        raise ValueError(f"outlet probe {probe.tolist()} lies outside the tank")


def ssc_discharge(predictor, fit: EventFit, probe, grid_s, classes,
                  weights=None, t_offset_s: float = 0.0,
                  geometry: TankGeometry = DEFAULT_GEOMETRY) -> DischargeSeries:
    """Outlet concentration series for one fitted event.

    ``grid_s`` is event-relative (seconds from event start); the returned
    series is shifted to absolute time by ``t_offset_s``.  Per-class outlet
    concentrations are combined with the inlet mass weights (equal mass per
    class by default); flux is Q(t) * c_out(t) in kg/min and the cumulative
    load integrates it by trapezoid.
    """
    grid_s = np.asarray(grid_s, dtype=np.float64)
    probe = np.asarray(probe, dtype=np.float64).reshape(3)
    _check_probe(probe, geometry)
    classes = np.atleast_1d(np.asarray(classes, dtype=np.float64))
    if weights is None:
        weights = np.full(len(classes), 1.0 / len(classes))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != classes.shape:
        raise ValueError("one weight per settling class required")

    fields = predictor.predict_fields(fit.params, classes, grid_s, probe.reshape(1, 3))
    c_classes = fields["concentration"][:, :, 0]          # (C, T)
    c_out = np.maximum((weights[:, None] * c_classes).sum(axis=0), 0.0)
    q = np.asarray(hydrograph_q(fit.params, grid_s / 60.0))
    flux = q * c_out
    cumulative = cumulative_trapezoid(flux, grid_s / 60.0, initial=0.0)
    return DischargeSeries(grid_s + t_offset_s, c_out, flux, cumulative)


@dataclass(frozen=True)
class EffluentSeries:
    """Stitched continuous effluent record with load bookkeeping."""

    times_s: np.ndarray
    c_out: np.ndarray
    flux: np.ndarray
    cumulative: np.ndarray
    outlet_load: float
    inlet_load: float
    removal_ratio: float


def concatenate(events: list, record: TimeSeriesRecord) -> EffluentSeries:
    """Stitch per-event discharge series onto the record grid, zero in dry gaps.

    The total outlet load is the sum of per-event loads (the cumulative
    curve is piecewise-constant between events), and the removal ratio is
    1 - outlet/inlet with the inlet load integrated from the record.
    """
    n = len(record.t)
    c_out = np.zeros(n)
    flux = np.zeros(n)
    cumulative = np.zeros(n)
    prev_end = -1
    total = 0.0
    ordered = sorted(events, key=lambda s: s.times_s[0])
    for series in ordered:
        idx = np.round((series.times_s - record.t[0]) / record.dt).astype(int)
        if np.any(idx < 0) or np.any(idx >= n) or \
                not np.allclose(record.t[idx], series.times_s, rtol=0, atol=1e-6):
            raise ValueError("event series times do not lie on the record grid")
        if idx[0] <= prev_end:
            raise ValueError("event windows overlap")
        c_out[idx] = series.c_out
        flux[idx] = series.flux
        cumulative[idx] = total + series.cumulative
        cumulative[prev_end + 1: idx[0]] = total
        prev_end = int(idx[-1])
        total += series.total_load
    cumulative[prev_end + 1:] = total

    inlet_load = float(np.trapezoid(record.q * record.c, record.t / 60.0))
    removal = 1.0 - total / inlet_load if inlet_load > 0 else 0.0
    return EffluentSeries(record.t.copy(), c_out, flux, cumulative,
                          outlet_load=total, inlet_load=inlet_load,
                          removal_ratio=removal)


def run_workflow(record: TimeSeriesRecord, predictor, classes, *,
                 q_on: float, q_off: float, min_gap_s: float,
                 probe=None, weights=None,
                 geometry: TankGeometry = DEFAULT_GEOMETRY):
    """segment -> fit -> per-event discharge -> concatenate; returns all stages."""
    probe = outlet_probe(geometry) if probe is None else np.asarray(probe, dtype=np.float64)
    segments = segment_events(record, q_on, q_off, min_gap_s)
    fits = [fit_event(seg) for seg in segments]
    series = [
        ssc_discharge(predictor, fit, probe, seg.t - seg.t[0], classes,
                      weights=weights, t_offset_s=float(seg.t[0]), geometry=geometry)
        for seg, fit in zip(segments, fits)
    ]
    effluent = concatenate(series, record)
    return segments, fits, series, effluent


def write_fit_table_csv(path, segments: list, fits: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["event", "start_s", "end_s", "lam", "k", "theta", "c0", "kd",
                    "rmse_q", "rmse_c", "converged"])
        for i, (seg, fit) in enumerate(zip(segments, fits)):
            p = fit.params
            w.writerow([i, repr(float(seg.t[0])), repr(float(seg.t[-1])),
                        repr(p.lam), repr(p.k), repr(p.theta), repr(p.c0), repr(p.kd),
                        repr(fit.rmse_q), repr(fit.rmse_c), int(fit.converged)])


def write_effluent_csv(path, eff: EffluentSeries) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t_seconds", "c_out_kg_per_m3", "flux_kg_per_min", "cumulative_kg"])
        for t, c, fl, cu in zip(eff.times_s, eff.c_out, eff.flux, eff.cumulative):
            w.writerow([repr(float(t)), repr(float(c)), repr(float(fl)), repr(float(cu))])
