"""Figure renderers for every CLI report path.

Each function takes already-computed data and writes one PNG next to the
delimited output it illustrates.  All rendering uses the Agg backend so
commands work headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .loading import StormParams, hydrograph_q, pollutograph_c

DPI = 150


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def save_event_overview(params_list, duration_s: float, path):
    """Hydrographs and pollutographs of the sampled events."""
    t_min = np.linspace(0.0, duration_s / 60.0, 400)
    fig, (ax_q, ax_c) = plt.subplots(1, 2, figsize=(9, 3.6))
    for row in params_list:
        p = StormParams.from_array(row) if not isinstance(row, StormParams) else row
        ax_q.plot(t_min, hydrograph_q(p, t_min), lw=0.7, alpha=0.6)
        ax_c.plot(t_min, pollutograph_c(p, t_min), lw=0.7, alpha=0.6)
    ax_q.set_xlabel("time (min)")
    ax_q.set_ylabel("inflow (m$^3$/min)")
    ax_c.set_xlabel("time (min)")
    ax_c.set_ylabel("inlet SSC (kg/m$^3$)")
    return _finish(fig, path)


def save_loss_curve(train_history, val_history, path):
    fig, ax = plt.subplots(figsize=(6, 3.8))
    it = np.arange(1, len(train_history) + 1)
    ax.semilogy(it, train_history, lw=0.6, label="train (batch)")
    if val_history:
        vi, vv = zip(*val_history)
        ax.semilogy(vi, vv, "o-", ms=3, label="validation")
    ax.set_xlabel("iteration")
    ax.set_ylabel("standardized MSE")
    ax.legend()
    return _finish(fig, path)


def save_parity(counts, t_edges, p_edges, target: str, r2_value: float, path):
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    masked = np.ma.masked_equal(counts.T, 0)
    ax.pcolormesh(t_edges, p_edges, masked, norm=matplotlib.colors.LogNorm(), cmap="viridis")
    lims = [min(t_edges[0], p_edges[0]), max(t_edges[-1], p_edges[-1])]
    ax.plot(lims, lims, "k-", lw=1)
    ax.set_xlabel(f"actual {target}")
    ax.set_ylabel(f"predicted {target}")
    ax.set_title(f"$R^2$ = {r2_value:.4f}")
    return _finish(fig, path)


def save_error_distribution(mse_values, fit, fractions: dict, target: str, path):
    """Per-case MSE* histogram with the log-normal fit, plus category bars."""
    fig, (ax_h, ax_b) = plt.subplots(1, 2, figsize=(8.6, 3.6))
    logs = np.log10(np.asarray(mse_values))
    ax_h.hist(logs, bins=max(6, len(logs) // 4), density=True, alpha=0.7)
    grid = np.linspace(logs.min() - 1, logs.max() + 1, 200)
    if fit.sigma > 0:
        pdf = np.exp(-0.5 * ((grid - fit.mu) / fit.sigma) ** 2) / (fit.sigma * np.sqrt(2 * np.pi))
        ax_h.plot(grid, pdf, "r-", lw=1.5,
                  label=rf"$\mu$={fit.mu:.2f}, $\sigma$={fit.sigma:.2f}")
        ax_h.legend()
    ax_h.set_xlabel(r"$\log_{10}$ MSE$^*$")
    ax_h.set_ylabel("density")
    ax_h.set_title(target)

    names = ["high\n$R^2>0.8$", "medium\n$0.4<R^2\\leq0.8$", "low\n$R^2\\leq0.4$"]
    vals = [fractions["high"], fractions["medium"], fractions["low"]]
    ax_b.bar(names, vals, color=["tab:green", "tab:orange", "tab:red"])
    ax_b.set_ylabel("fraction of cases")
    ax_b.set_ylim(0, 1)
    return _finish(fig, path)


def save_sensitivity_maps(fields, path):
    """One row per settling class: concentration plus relative derivatives on y=0."""
    from .loading import PARAM_NAMES
    from .sensitivity import relative_map

    labels = {"lam": r"$\partial c/\partial \lambda$", "k": r"$\partial c/\partial k$",
              "theta": r"$\partial c/\partial \theta$", "c0": r"$\partial c/\partial C_0$",
              "kd": r"$\partial c/\partial k_d$"}
    n_rows = len(fields)
    fig, axes = plt.subplots(n_rows, 6, figsize=(16, 2.6 * n_rows), squeeze=False)
    for r, field in enumerate(fields):
        rel = field if field.relative else relative_map(field)
        x, z = field.points[:, 0], field.points[:, 2]
        order = [("c", field.c[0])] + [(n, rel.derivatives[n][0]) for n in PARAM_NAMES]
        for col, (name, values) in enumerate(order):
            ax = axes[r, col]
            if name == "c":
                im = ax.tricontourf(x, z, values, levels=21, cmap="turbo")
                ax.set_title(f"c  ($w_s$={field.w_s:.2e} m/s)", fontsize=8)
            else:
                im = ax.tricontourf(x, z, values, levels=21, cmap="coolwarm",
                                    vmin=-1.0, vmax=1.0)
                ax.set_title(labels[name], fontsize=9)
            fig.colorbar(im, ax=ax, shrink=0.85)
            ax.set_xticks([])
            ax.set_yticks([])
    return _finish(fig, path)


def save_longterm(record, segments, effluent, path):
    fig, axes = plt.subplots(3, 1, figsize=(9, 7), sharex=True)
    t_h = record.t / 3600.0
    axes[0].plot(t_h, record.q, lw=0.8)
    for seg in segments:
        axes[0].axvspan(seg.t[0] / 3600.0, seg.t[-1] / 3600.0, color="tab:blue", alpha=0.12)
    axes[0].set_ylabel("inflow (m$^3$/min)")
    axes[1].plot(t_h, record.c, lw=0.8, label="inlet")
    axes[1].plot(t_h, effluent.c_out, lw=0.8, label="outlet")
    axes[1].set_ylabel("SSC (kg/m$^3$)")
    axes[1].legend(loc="upper right")
    axes[2].plot(t_h, effluent.cumulative, lw=1.2)
    axes[2].set_ylabel("cumulative load (kg)")
    axes[2].set_xlabel("time (h)")
    axes[2].set_title(f"removal ratio = {effluent.removal_ratio:.3f}", fontsize=9)
    return _finish(fig, path)


def save_hpo_history(trials, best_curve, path):
    fig, ax = plt.subplots(figsize=(6, 3.8))
    values = [t.value if t.status == "complete" else np.nan for t in trials]
    ax.semilogy(range(len(trials)), values, "o", ms=4, alpha=0.6, label="trial objective")
    ax.semilogy(range(len(best_curve)), best_curve, "r-", lw=1.4, label="best so far")
    ax.set_xlabel("trial")
    ax.set_ylabel("validation MSE")
    ax.legend()
    return _finish(fig, path)
