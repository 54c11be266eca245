"""Metrics, per-case accuracy categories, and error-distribution fits.

Per-case scores pool every class, time and point of the case,
unstandardized.  Cases land in three accuracy bins by coefficient of
determination: high (R^2 > 0.8), medium (0.4 < R^2 <= 0.8),
low (R^2 <= 0.4).  CSV emitters live here too; figure rendering does not
(the CSV files feed the plotting layer).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import TARGET_CHANNELS
from .oracle import DatasetSWDS

CATEGORIES = ("high", "medium", "low")
R2_HIGH = 0.8
R2_LOW = 0.4


class UndefinedR2Error(ValueError):
    """R^2 is undefined for a constant target."""


def r2(pred, target) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if t.size < 2:
        raise ValueError("need at least two samples")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise UndefinedR2Error("target is constant; R^2 is undefined")
    ss_res = float(((t - p) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def categorize(r2_value: float) -> str:
    if r2_value > R2_HIGH:
        return "high"
    if r2_value > R2_LOW:
        return "medium"
    return "low"


@dataclass(frozen=True)
class CaseReport:
    """Unstandardized per-case error summary for one target."""

    case: int
    target: str
    mse: float       # MSE* on raw field values
    r2: float
    category: str


@dataclass(frozen=True)
class EvaluationReport:
    cases: list
    fractions: dict   # target -> {high, medium, low}

    def for_target(self, target: str) -> list:
        return [c for c in self.cases if c.target == target]

    def mse_values(self, target: str) -> np.ndarray:
        return np.array([c.mse for c in self.for_target(target)])


def per_case_report(model, dataset: DatasetSWDS, split_cases_idx) -> EvaluationReport:
    """Score every case of a split with a predictor exposing predict_case/target_names.

    Metrics pool all of the case's classes, times and points per target.
    A case whose target is constant (a dry event window, where R^2 is
    undefined) scores R^2 = 1 and lands in the high bin only when the
    prediction agrees to machine precision; any real error on a
    zero-variance target is a low-category miss.
    """
    case_list = np.atleast_1d(np.asarray(split_cases_idx, dtype=int))
    if case_list.size == 0:
        raise ValueError("empty case split")
    reports = []
    for case in case_list:
        pred = model.predict_case(dataset.params[case], dataset.classes,
                                  dataset.times, dataset.coords[case])
        for j, name in enumerate(model.target_names):
            truth = np.asarray(dataset.solutions[case, ..., TARGET_CHANNELS[name]],
                               dtype=np.float64)
            mse = float(((pred[..., j] - truth) ** 2).mean())
            try:
                score = r2(pred[..., j], truth)
            except UndefinedR2Error:
                exact = np.sqrt(mse) <= 1e-12 * max(1.0, abs(float(truth.flat[0])))
                score = 1.0 if exact else -np.inf
            reports.append(CaseReport(int(case), name, mse, score, categorize(score)))

    fractions = {}
    for name in model.target_names:
        cats = [c.category for c in reports if c.target == name]
        fractions[name] = {cat: cats.count(cat) / len(cats) for cat in CATEGORIES}
    return EvaluationReport(reports, fractions)


@dataclass(frozen=True)
class DistributionFit:
    """Log-normal parameters of per-case MSE* values (base-10 logs)."""

    mu: float
    sigma: float


def lognormal_fit(mse_values) -> DistributionFit:
    """mu = mean of log10 values, sigma = sample (n-1) standard deviation."""
    vals = np.asarray(mse_values, dtype=np.float64).ravel()
    if vals.size < 2:
        raise ValueError("need at least two values")
    if np.any(vals <= 0):
        raise ValueError("all values must be positive for a log-normal fit")
    logs = np.log10(vals)
    return DistributionFit(float(logs.mean()), float(logs.std(ddof=1)))


def parity_histogram(pred, target, bins: int):
    """Joint (target, prediction) histogram on raw values.

    Returns (counts, target_edges, pred_edges); counts[i, j] is the number
    of samples falling in target bin i and prediction bin j.
    """
    if bins < 2:
        raise ValueError("need at least two bins")
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    counts, t_edges, p_edges = np.histogram2d(t, p, bins=bins)
    return counts, t_edges, p_edges


# --- CSV emitters -------------------------------------------------------------

def write_case_reports_csv(path, report: EvaluationReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case", "target", "mse_star", "r2", "category"])
        for c in report.cases:
            w.writerow([c.case, c.target, repr(c.mse), repr(c.r2), c.category])


def write_category_summary_csv(path, report: EvaluationReport) -> None:
    """Three-bin accuracy summary: R^2 > 0.8 / 0.4-0.8 / <= 0.4 fractions per target."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["target", "high_r2_gt_0.8", "medium_r2_0.4_to_0.8", "low_r2_le_0.4", "n_cases"])
        for target, frac in report.fractions.items():
            n = len(report.for_target(target))
            w.writerow([target, repr(frac["high"]), repr(frac["medium"]), repr(frac["low"]), n])


def write_lognormal_csv(path, fits: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["target", "mu", "sigma"])
        for target, fit in fits.items():
            w.writerow([target, repr(fit.mu), repr(fit.sigma)])


def write_parity_csv(path, counts, t_edges, p_edges) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["target_bin_low", "target_bin_high", "pred_bin_low", "pred_bin_high", "count"])
        for i in range(counts.shape[0]):
            for j in range(counts.shape[1]):
                w.writerow([repr(float(t_edges[i])), repr(float(t_edges[i + 1])),
                            repr(float(p_edges[j])), repr(float(p_edges[j + 1])),
                            int(counts[i, j])])
