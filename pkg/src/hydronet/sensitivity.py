"""Autodiff sensitivity of predicted concentration to the loading parameters.

The trick that makes this cheap: query points are laid out on the case
axis, so each point's prediction depends only on its own copy of the
event-parameter row, and a single backward pass per (time, class) slice
yields every point's gradient at once.  The chain rule through the
standardization converts to raw-parameter derivatives of raw-unit output:
dc/dpi = sigma_y * dc_std/dpi_std / sigma_pi.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .loading import PARAM_NAMES, StormParams, TankGeometry, DEFAULT_GEOMETRY
from .models import ModelParams, build_inputs, extract_loading_grad, forward_from_inputs
from .tensor import Tape, sum_all

SENSITIVITY_COLUMNS = (
    "x", "y", "z", "t", "w_s", "c",
    "dc_dlambda", "dc_dk", "dc_dtheta", "dc_dc0", "dc_dkd",
    "rel_dc_dlambda", "rel_dc_dk", "rel_dc_dtheta", "rel_dc_dc0", "rel_dc_dkd",
)

# canonical demo loading for the sensitivity maps
DEMO_PARAMS = StormParams(lam=0.14, k=1.9, theta=10.0, c0=1.3, kd=0.8)
DEMO_TIME_S = 230.0
DEMO_CLASSES = (7.5e-5, 3.16e-4, 5.62e-3)


@dataclass(frozen=True)
class SensitivityField:
    """Output values and their loading-parameter derivatives on query points."""

    points: np.ndarray        # (P, 3)
    times_s: np.ndarray       # (K,)
    w_s: float
    c: np.ndarray             # (K, P) raw-unit predictions
    derivatives: dict         # param name -> (K, P)
    relative: bool = False
    all_zero: bool = False


def standardized_point_grads(model: ModelParams, p_std_row, cl_std, t_std, q_std_points):
    """Per-point standardized output and d(out_std)/d(p_std), one backward pass.

    ``q_std_points`` is (P, 3); the event row is replicated onto the case
    axis so the gradient of the summed output separates per point.
    """
    n_pts = len(q_std_points)
    p2d = np.repeat(np.asarray(p_std_row, dtype=np.float64).reshape(1, 5), n_pts, axis=0)
    q3d = np.asarray(q_std_points, dtype=np.float64).reshape(n_pts, 1, 3)
    cl1d = np.atleast_1d(np.asarray(cl_std, dtype=np.float64))
    t1d = np.atleast_1d(np.asarray(t_std, dtype=np.float64))
    with Tape() as tape:
        inputs = build_inputs(model.config.kind, p2d, cl1d, t1d, q3d)
        out = forward_from_inputs(model, inputs)
        tape.backward(sum_all(out))
    values = out.values[:, 0, 0, 0, 0]
    grads = extract_loading_grad(inputs, model.config.kind)
    return values, grads


def grad_wrt_loading(model: ModelParams, p: StormParams, w_s: float, times_s,
                     points) -> SensitivityField:
    """Raw-parameter derivatives of de-standardized concentration at query points.

    One backward pass per time instance; derivatives come back in raw
    units for the raw parameters (lam, k, theta, c0, kd).
    """
    if model.stats is None:
        raise ValueError("model carries no standardization statistics; train or load one")
    if model.config.output_mode != "separate" or "target" not in model.meta:
        raise ValueError("sensitivity needs a trained separate-output checkpoint")
    stats = model.stats
    target = model.meta["target"]
    times_s = np.atleast_1d(np.asarray(times_s, dtype=np.float64))
    points = np.asarray(points, dtype=np.float64)

    p_std_row = stats.params(p.as_array()[None, :])
    cl_std = stats.classes([w_s])
    q_std = stats.coords(points)
    t_std_all = stats.times(times_s)

    y_scale = stats.y_std[target]
    c = np.empty((len(times_s), len(points)))
    derivs = {name: np.empty_like(c) for name in PARAM_NAMES}
    for i in range(len(times_s)):
        values, g_std = standardized_point_grads(model, p_std_row, cl_std,
                                                 t_std_all[i: i + 1], q_std)
        c[i] = stats.destandardize_target(values, target)
        g_raw = g_std * y_scale / stats.p_std[None, :]
        for j, name in enumerate(PARAM_NAMES):
            derivs[name][i] = g_raw[:, j]
    return SensitivityField(points, times_s, float(w_s), c, derivs)


def relative_map(field: SensitivityField) -> SensitivityField:
    """Normalize each derivative by its maximum magnitude over all points and times.

    An all-zero derivative stays zero and raises the ``all_zero`` flag.
    Already-relative fields pass through unchanged (idempotent).
    """
    any_zero = False
    rel = {}
    for name, values in field.derivatives.items():
        peak = float(np.max(np.abs(values)))
        if peak == 0.0:
            any_zero = True
            rel[name] = np.zeros_like(values)
        else:
            rel[name] = values / peak
    return replace(field, derivatives=rel, relative=True, all_zero=any_zero)


def export_sensitivity(fields, path) -> None:
    """CSV with one row per (class, time, point); raw and relative derivative columns."""
    if isinstance(fields, SensitivityField):
        fields = [fields]
    if not fields:
        raise ValueError("nothing to export")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SENSITIVITY_COLUMNS)
        for field in fields:
            rel = field if field.relative else relative_map(field)
            for i, t in enumerate(field.times_s):
                for j, (x, y, z) in enumerate(field.points):
                    row = [repr(float(v)) for v in (x, y, z, t, field.w_s, field.c[i, j])]
                    row += [repr(float(field.derivatives[n][i, j])) for n in PARAM_NAMES]
                    row += [repr(float(rel.derivatives[n][i, j])) for n in PARAM_NAMES]
                    w.writerow(row)


def symmetry_plane_grid(geometry: TankGeometry = DEFAULT_GEOMETRY,
                        nx: int = 48, nz: int = 48) -> np.ndarray:
    """Query points on the y=0 symmetry plane, shape (nx*nz, 3)."""
    margin = 1e-6
    x = np.linspace(-geometry.radius * (1 - margin), geometry.radius * (1 - margin), nx)
    z = np.linspace(geometry.depth * margin, geometry.depth * (1 - margin), nz)
    xx, zz = np.meshgrid(x, z, indexing="ij")
    return np.column_stack([xx.ravel(), np.zeros(xx.size), zz.ravel()])
