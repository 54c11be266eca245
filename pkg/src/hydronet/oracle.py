"""Deterministic desk-scale physics surrogate and dataset persistence.

Ground-truth fields come from a jet-plus-stratified-tank model: a gaussian
inlet jet carries the influent across the tank while the bulk behaves as a
well-mixed settling tank whose per-class concentration follows a linear
ODE.  The model is cheap, smooth, and nonlinear in every loading
parameter, settling velocity, time, and position, which is exactly what
the learning task needs from its data source.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .loading import (
    DEFAULT_GEOMETRY,
    DEFAULT_RANGES,
    ParamRanges,
    StormParams,
    TankGeometry,
    hydrograph_q,
    lhs_sample,
    pollutograph_c,
    sample_cylinder,
    settling_classes,
)
from .parallel import worker_count

SWDS_MAGIC = b"SWDS1\x00"


@dataclass(frozen=True)
class OracleConfig:
    """Dataset-generation settings (desk-scale defaults)."""

    n_cases: int = 48      # M
    n_classes: int = 3     # C
    n_times: int = 60      # O
    n_points: int = 512    # N
    duration_s: float = 3600.0
    ode_step_s: float = 1.0
    kappa_max: float = 8.0
    seed: int = 0
    geometry: TankGeometry = field(default=DEFAULT_GEOMETRY)
    ranges: ParamRanges = field(default=DEFAULT_RANGES)

    def __post_init__(self):
        if min(self.n_cases, self.n_times, self.n_points) < 1 or self.n_classes < 2:
            raise ValueError("dataset dims must be >= 1 (and at least 2 settling classes)")
        if self.ode_step_s <= 0 or self.duration_s <= 0 or self.kappa_max <= 0:
            raise ValueError("ode_step_s, duration_s and kappa_max must be positive")

    @property
    def output_interval_s(self) -> float:
        return self.duration_s / self.n_times

    def times(self) -> np.ndarray:
        return (np.arange(self.n_times) + 1) * self.output_interval_s


def inflow_si(p: StormParams, t_s) -> np.ndarray | float:
    """Hydrograph flow in m^3/s at time t given in seconds."""
    return hydrograph_q(p, np.asarray(t_s, dtype=np.float64) / 60.0) / 60.0


def inlet_concentration(p: StormParams, t_s) -> np.ndarray | float:
    """Pollutograph concentration (kg/m^3) at time t given in seconds."""
    return pollutograph_c(p, np.asarray(t_s, dtype=np.float64) / 60.0)


@dataclass
class TankState:
    """Per-class well-mixed tank concentration on the ODE time grid."""

    times: np.ndarray   # seconds, ODE steps from 0
    values: np.ndarray  # kg/m^3, same length

    def at(self, t_s) -> np.ndarray | float:
        return np.interp(t_s, self.times, self.values)


def integrate_tank(inflow, concentration_in, w_s, t_end_s: float,
                   geometry: TankGeometry = DEFAULT_GEOMETRY,
                   ode_step_s: float = 1.0) -> TankState:
    """Classical RK4 integration of dc/dt = (Q/V)(C_in - c) - (w_s/H) c from c(0)=0.

    ``inflow`` (m^3/s) and ``concentration_in`` (kg/m^3) are callables of
    time in seconds, vectorizable over numpy arrays.  The concentration is
    clamped at zero against round-off.
    """
    states = _integrate_classes(inflow, concentration_in, np.array([w_s]), t_end_s,
                                geometry, ode_step_s)
    return states[0]


def _integrate_classes(inflow, concentration_in, ws: np.ndarray, t_end_s: float,
                       geometry: TankGeometry, ode_step_s: float) -> list[TankState]:
    """Vectorized RK4 over settling classes; the ODE is linear so classes share Q."""
    h = float(ode_step_s)
    n_steps = max(1, int(np.ceil(t_end_s / h - 1e-9)))
    t_half = np.arange(2 * n_steps + 1) * (h / 2.0)
    a = np.asarray(inflow(t_half), dtype=np.float64) / geometry.volume  # Q/V, 1/s
    beta = a * np.asarray(concentration_in(t_half), dtype=np.float64)
    alpha = a[:, None] + (ws / geometry.depth)[None, :]  # (2n+1, C)
    beta = np.broadcast_to(beta[:, None], alpha.shape)

    c = np.zeros(len(ws))
    out = np.zeros((n_steps + 1, len(ws)))
    for i in range(n_steps):
        lo, mid, hi = 2 * i, 2 * i + 1, 2 * i + 2
        k1 = beta[lo] - alpha[lo] * c
        k2 = beta[mid] - alpha[mid] * (c + 0.5 * h * k1)
        k3 = beta[mid] - alpha[mid] * (c + 0.5 * h * k2)
        k4 = beta[hi] - alpha[hi] * (c + h * k3)
        c = np.maximum(c + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), 0.0)
        out[i + 1] = c
    times = np.arange(n_steps + 1) * h
    return [TankState(times, out[:, j].copy()) for j in range(len(ws))]


def cstr_solve(p: StormParams, w_s: float, grid_s,
               geometry: TankGeometry = DEFAULT_GEOMETRY,
               ode_step_s: float = 1.0) -> TankState:
    """Tank concentration for one storm event and one settling class.

    ``grid_s`` (ascending from 0, seconds) sets the coverage of the
    returned state; values are reported on the ODE step grid.
    """
    grid = np.asarray(grid_s, dtype=np.float64)
    if grid[0] < 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must ascend from 0")
    return integrate_tank(lambda t: inflow_si(p, t), lambda t: inlet_concentration(p, t),
                          w_s, float(grid[-1]), geometry, ode_step_s)


def _jet_profile(geometry: TankGeometry, xyz: np.ndarray, check: bool = True):
    """Per-point jet weight and circulation profile; validates containment."""
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    if check:
        tol = 1e-9
        r2 = x * x + y * y
        if np.any(r2 > geometry.radius**2 * (1.0 + 1e-9) + tol) or \
           np.any(z < -tol) or np.any(z > geometry.depth + tol):
            raise ValueError("query point outside the cylinder")
    rho_jet2 = y * y + (z - geometry.jet_height) ** 2
    w_jet = np.exp(-rho_jet2 / (2.0 * geometry.jet_radius**2)) * \
        np.exp(-(x + geometry.radius) / geometry.jet_decay_length)
    rho_c = np.sqrt(x * x + y * y)
    speed_profile = w_jet + geometry.circulation_fraction * (1.0 - w_jet) * (rho_c / geometry.radius)
    return w_jet, speed_profile


def vertical_settling_profile(kappa, z, depth: float) -> np.ndarray:
    """Depth-wise concentration shape s_v(z) with unit vertical average.

    s_v = kappa * exp(kappa (1 - z/H)) / (e^kappa - 1); a first-order series
    covers kappa < 1e-6 where the ratio becomes 0/0 (the limit is 1).
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    zeta = np.asarray(z, dtype=np.float64) / depth
    tiny = kappa < 1e-6
    safe = np.where(tiny, 1.0, kappa)
    full = safe * np.exp(safe * (1.0 - zeta)) / np.expm1(safe)
    series = 1.0 + kappa * (0.5 - zeta)
    return np.where(tiny, series, full)


def field_eval(p: StormParams, w_s: float, t_s, xyz, state: TankState,
               geometry: TankGeometry = DEFAULT_GEOMETRY,
               kappa_max: float = 8.0):
    """Velocity magnitude (m/s) and concentration (kg/m^3) at query points.

    ``t_s`` may be a scalar (returns two (P,) arrays) or an array of T
    times (returns two (T, P) arrays).  Points must lie inside the tank.
    """
    xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
    t = np.asarray(t_s, dtype=np.float64)
    scalar_t = t.ndim == 0
    t = np.atleast_1d(t)

    w_jet, speed_profile = _jet_profile(geometry, xyz)
    q_si = np.asarray(inflow_si(p, t), dtype=np.float64)
    u = (q_si / geometry.pipe_area)[:, None] * speed_profile[None, :]

    kappa = np.minimum(w_s * t / geometry.depth, kappa_max)
    s_v = vertical_settling_profile(kappa[:, None], xyz[None, :, 2], geometry.depth)
    c_in = np.asarray(inlet_concentration(p, t), dtype=np.float64)
    c_tank = np.asarray(state.at(t), dtype=np.float64)
    c = w_jet[None, :] * c_in[:, None] + (1.0 - w_jet)[None, :] * c_tank[:, None] * s_v

    if scalar_t:
        return u[0], c[0]
    return u, c


@dataclass
class DatasetSWDS:
    """(cases x classes x times x points) feature/solution store."""

    params: np.ndarray     # (M, 5) in order (lam, k, theta, c0, kd)
    classes: np.ndarray    # (C,) settling velocities, m/s
    times: np.ndarray      # (O,) seconds
    coords: np.ndarray     # (M, N, 3) meters
    solutions: np.ndarray  # (M, C, O, N, 2) float32, last axis (|u|, c)

    def __post_init__(self):
        m, c, o, n = self.n_cases, self.n_classes, self.n_times, self.n_points
        if self.params.shape != (m, 5) or self.coords.shape != (m, n, 3) or \
           self.solutions.shape != (m, c, o, n, 2):
            raise ValueError("dataset array dimensions are inconsistent")
        if not np.all(np.isfinite(self.solutions)):
            raise ValueError("dataset solutions contain non-finite values")

    @property
    def n_cases(self) -> int:
        return self.params.shape[0]

    @property
    def n_classes(self) -> int:
        return self.classes.shape[0]

    @property
    def n_times(self) -> int:
        return self.times.shape[0]

    @property
    def n_points(self) -> int:
        return self.coords.shape[1]

    @property
    def feature_matrix_rows(self) -> int:
        """Row count of the fully expanded width-10 feature matrix."""
        return self.n_cases * self.n_times * self.n_points

    def storm_params(self, case: int) -> StormParams:
        return StormParams.from_array(self.params[case])


def _case_block(p: StormParams, coords: np.ndarray, classes: np.ndarray,
                times: np.ndarray, geometry: TankGeometry,
                ode_step_s: float, kappa_max: float) -> np.ndarray:
    states = _integrate_classes(lambda t: inflow_si(p, t),
                                lambda t: inlet_concentration(p, t),
                                classes, float(times[-1]), geometry, ode_step_s)
    block = np.empty((len(classes), len(times), len(coords), 2), dtype=np.float32)
    for k, (w_s, state) in enumerate(zip(classes, states)):
        u, c = field_eval(p, float(w_s), times, coords, state, geometry, kappa_max)
        block[k, :, :, 0] = u
        block[k, :, :, 1] = c
    return block


def generate_dataset(cfg: OracleConfig, path=None) -> DatasetSWDS:
    """Sample events, run the physics surrogate on the full grid, optionally persist.

    Spatial samples are drawn fresh per case.  Case blocks are computed in
    parallel (each is a pure function of its seed) and assembled in index
    order, so regeneration under the same seed is byte-identical.
    """
    root = np.random.SeedSequence(cfg.seed)
    lhs_seed, *coord_seeds = root.spawn(1 + cfg.n_cases)
    events = lhs_sample(cfg.ranges, cfg.n_cases, lhs_seed)
    classes = settling_classes(cfg.n_classes)
    times = cfg.times()
    coords = np.stack([sample_cylinder(cfg.geometry, cfg.n_points, s) for s in coord_seeds])

    solutions = np.empty((cfg.n_cases, cfg.n_classes, cfg.n_times, cfg.n_points, 2),
                         dtype=np.float32)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        futures = [
            pool.submit(_case_block, events[i], coords[i], classes, times,
                        cfg.geometry, cfg.ode_step_s, cfg.kappa_max)
            for i in range(cfg.n_cases)
        ]
        for i, fut in enumerate(futures):
            solutions[i] = fut.result()

    dataset = DatasetSWDS(
        params=np.array([e.as_array() for e in events]),
        classes=classes,
        times=times,
        coords=coords,
        solutions=solutions,
    )
    if path is not None:
        write_swds1(dataset, path)
    return dataset


def write_swds1(ds: DatasetSWDS, path) -> None:
    """Little-endian SWDS1 file: magic, u32 dims, f64 params/classes/times/coords, f32 solutions."""
    with open(path, "wb") as f:
        f.write(SWDS_MAGIC)
        f.write(struct.pack("<4I", ds.n_cases, ds.n_classes, ds.n_times, ds.n_points))
        f.write(np.ascontiguousarray(ds.params, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ds.classes, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ds.times, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ds.coords, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ds.solutions, dtype="<f4").tobytes())


def read_swds1(path) -> DatasetSWDS:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(SWDS_MAGIC)] != SWDS_MAGIC:
        raise ValueError(f"not an SWDS1 file: {path}")
    off = len(SWDS_MAGIC)
    m, c, o, n = struct.unpack_from("<4I", raw, off)
    off += 16

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    params = take(m * 5, "<f8").reshape(m, 5).astype(np.float64)
    classes = take(c, "<f8").astype(np.float64)
    times = take(o, "<f8").astype(np.float64)
    coords = take(m * n * 3, "<f8").reshape(m, n, 3).astype(np.float64)
    solutions = take(m * c * o * n * 2, "<f4").reshape(m, c, o, n, 2).astype(np.float32)
    if off != len(raw):
        raise ValueError(f"SWDS1 file has {len(raw) - off} trailing bytes: {path}")
    return DatasetSWDS(params, classes, times, coords, solutions)


class OracleSurrogate:
    """Predictor that recomputes ground truth directly from the physics model."""

    target_names = ("velocity", "concentration")

    def __init__(self, geometry: TankGeometry = DEFAULT_GEOMETRY,
                 ode_step_s: float = 1.0, kappa_max: float = 8.0):
        self.geometry = geometry
        self.ode_step_s = ode_step_s
        self.kappa_max = kappa_max

    def predict_fields(self, p, classes, times_s, points) -> dict:
        """Map target name -> (C, T, P) field arrays; p is StormParams or a 5-array."""
        if not isinstance(p, StormParams):
            p = StormParams.from_array(p)
        classes = np.atleast_1d(np.asarray(classes, dtype=np.float64))
        times_s = np.atleast_1d(np.asarray(times_s, dtype=np.float64))
        states = _integrate_classes(lambda t: inflow_si(p, t),
                                    lambda t: inlet_concentration(p, t),
                                    classes, float(times_s.max()),
                                    self.geometry, self.ode_step_s)
        u = np.empty((len(classes), len(times_s), len(points)))
        c = np.empty_like(u)
        for k, (w_s, state) in enumerate(zip(classes, states)):
            u[k], c[k] = field_eval(p, float(w_s), times_s, points, state,
                                    self.geometry, self.kappa_max)
        return {"velocity": u, "concentration": c}

    def predict_case(self, params_row, classes, times_s, coords) -> np.ndarray:
        fields = self.predict_fields(params_row, classes, times_s, coords)
        return np.stack([fields[name] for name in self.target_names], axis=-1)
