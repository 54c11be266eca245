"""Tree-structured Parzen Estimator search over training hyperparameters.

After a uniform warm-up, completed trials are split at the best-25%
quantile; each dimension gets a Parzen mixture of truncated gaussians
centered on the observations (bandwidth = domain width / sqrt(set size)).
Candidates drawn from the good-set density are ranked by the
good-to-bad density ratio.  Log-scaled dimensions work in log space and
integer dimensions are treated as continuous, rounding only the returned
assignment.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

N_STARTUP = 10
GOOD_QUANTILE = 0.25
N_CANDIDATES = 24


@dataclass(frozen=True)
class FloatDomain:
    lo: float
    hi: float
    log: bool = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"domain needs lo < hi, got ({self.lo}, {self.hi})")
        if self.log and self.lo <= 0:
            raise ValueError("log-scaled domain needs lo > 0")


@dataclass(frozen=True)
class IntDomain:
    lo: int
    hi: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"domain needs lo < hi, got ({self.lo}, {self.hi})")


@dataclass(frozen=True)
class Trial:
    number: int
    params: dict
    value: float | None
    status: str          # "complete" | "failed"
    note: str = ""


def _to_z(domain, x: float) -> float:
    if isinstance(domain, FloatDomain) and domain.log:
        return math.log(x)
    return float(x)


def _from_z(domain, z: float):
    if isinstance(domain, IntDomain):
        return int(min(max(round(z), domain.lo), domain.hi))
    x = math.exp(z) if domain.log else z
    return float(min(max(x, domain.lo), domain.hi))


def _z_bounds(domain) -> tuple:
    if isinstance(domain, FloatDomain) and domain.log:
        return math.log(domain.lo), math.log(domain.hi)
    return float(domain.lo), float(domain.hi)


def uniform_sample(space: dict, rng: np.random.Generator) -> dict:
    out = {}
    for name, domain in space.items():
        lo, hi = _z_bounds(domain)
        out[name] = _from_z(domain, rng.uniform(lo, hi))
    return out


def _mixture_logpdf(z: float, centers: np.ndarray, bw: float, lo: float, hi: float) -> float:
    """Log density of an equal-weight truncated-gaussian mixture on [lo, hi]."""
    u = (z - centers) / bw
    phi = np.exp(-0.5 * u * u) / (bw * math.sqrt(2.0 * math.pi))
    mass = 0.5 * (erf((hi - centers) / (bw * math.sqrt(2.0)))
                  - erf((lo - centers) / (bw * math.sqrt(2.0))))
    dens = float(np.mean(phi / np.maximum(mass, 1e-300)))
    return math.log(max(dens, 1e-300))


def _sample_truncated(rng: np.random.Generator, center: float, bw: float,
                      lo: float, hi: float) -> float:
    z = center
    for _ in range(100):
        z = rng.normal(center, bw)
        if lo <= z <= hi:
            return z
    return min(max(z, lo), hi)


def suggest(history: list, space: dict, seed, *, n_startup: int = N_STARTUP,
            quantile: float = GOOD_QUANTILE, n_candidates: int = N_CANDIDATES) -> dict:
    """Next assignment given trial history; uniform random during warm-up."""
    if not space:
        raise ValueError("empty search space")
    rng = np.random.default_rng(seed)
    complete = [t for t in history if t.status == "complete"]
    if len(complete) < n_startup:
        return uniform_sample(space, rng)

    ranked = sorted(complete, key=lambda t: t.value)
    n_good = max(1, math.ceil(quantile * len(ranked)))
    good, bad = ranked[:n_good], ranked[n_good:]
    if not bad:
        return uniform_sample(space, rng)

    dims = []
    for name, domain in space.items():
        lo, hi = _z_bounds(domain)
        width = hi - lo
        good_z = np.array([_to_z(domain, t.params[name]) for t in good])
        bad_z = np.array([_to_z(domain, t.params[name]) for t in bad])
        dims.append((name, domain, lo, hi,
                     good_z, width / math.sqrt(len(good_z)),
                     bad_z, width / math.sqrt(len(bad_z))))

    best_score, best_z = -math.inf, None
    for _ in range(n_candidates):
        cand = []
        score = 0.0
        for _, _, lo, hi, good_z, bw_g, bad_z, bw_b in dims:
            center = good_z[rng.integers(len(good_z))]
            z = _sample_truncated(rng, float(center), bw_g, lo, hi)
            score += _mixture_logpdf(z, good_z, bw_g, lo, hi)
            score -= _mixture_logpdf(z, bad_z, bw_b, lo, hi)
            cand.append(z)
        if score > best_score:
            best_score, best_z = score, cand
    return {name: _from_z(domain, z)
            for (name, domain, *_), z in zip(dims, best_z)}


@dataclass
class StudyResult:
    best: Trial
    trials: list


def run_study(objective, space: dict, n_trials: int, seed, *,
              n_startup: int = N_STARTUP) -> StudyResult:
    """Sequential trials; exceptions and non-finite objectives become failed trials.

    Deterministic under the seed: trial i's suggestion is seeded by
    (seed, i) and conditions on all earlier trials.
    """
    trials: list = []
    for i in range(n_trials):
        assignment = suggest(trials, space, seed=(seed, i), n_startup=n_startup)
        try:
            value = float(objective(assignment))
            if math.isfinite(value):
                trials.append(Trial(i, assignment, value, "complete"))
            else:
                trials.append(Trial(i, assignment, None, "failed", "non-finite objective"))
        except Exception as exc:  # failures are data, not crashes
            trials.append(Trial(i, assignment, None, "failed", str(exc)))
    complete = [t for t in trials if t.status == "complete"]
    if not complete:
        raise RuntimeError("every trial failed; no best trial to report")
    best = min(complete, key=lambda t: t.value)
    return StudyResult(best, trials)


def best_so_far(trials: list) -> np.ndarray:
    """Running minimum of completed objectives (NaN until the first completion)."""
    out = np.full(len(trials), np.nan)
    best = math.inf
    for i, t in enumerate(trials):
        if t.status == "complete" and t.value < best:
            best = t.value
        out[i] = best if math.isfinite(best) else np.nan
    return out


def write_trials_csv(path, trials: list, space: dict) -> None:
    names = list(space.keys())
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trial", *names, "objective", "status", "note"])
        for t in trials:
            row = [t.number]
            row += [repr(t.params[n]) if isinstance(t.params[n], float) else t.params[n]
                    for n in names]
            row += [repr(t.value) if t.value is not None else "", t.status, t.note]
            w.writerow(row)
