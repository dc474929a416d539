"""Factual and causal evaluation metrics.

Survival curves come in two flavours: the classical product-limit estimator
on raw (time, event) data, and a predicted-time variant that runs the same
recursion over per-subject summaries of model draws binned to the observed
time grid. On top of these sit the nonparametric hazard-ratio estimate (ratio
of survival curves times the ratio of fitted survival slopes), its
KDE-smoothed per-subject analogue, and the usual ranking/calibration/effect
metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.special import ndtr

DEFAULT_SURVIVAL_BAND = (0.1, 0.9)
DEFAULT_BOOTSTRAP = 200


class MetricError(ValueError):
    pass


class DegenerateControlError(MetricError):
    """Flat control survival curve: the slope ratio is undefined."""


@dataclass
class EventTimeSamples:
    """Per-subject Monte Carlo draws for both potential arms; shape (n, S)."""

    t0: np.ndarray
    t1: np.ndarray

    def __post_init__(self):
        self.t0 = np.atleast_2d(np.asarray(self.t0, dtype=np.float64))
        self.t1 = np.atleast_2d(np.asarray(self.t1, dtype=np.float64))
        if self.t0.shape != self.t1.shape:
            raise MetricError("arm draw matrices must have identical shapes")
        if np.any(self.t0 <= 0) or np.any(self.t1 <= 0):
            raise MetricError("event-time draws must be strictly positive")

    @property
    def n_subjects(self) -> int:
        return self.t0.shape[0]

    @property
    def n_draws(self) -> int:
        return self.t0.shape[1]

    def arm(self, a: int) -> np.ndarray:
        return self.t1 if a == 1 else self.t0


@dataclass
class SurvivalCurve:
    """Right-continuous step function starting at (t0, 1)."""

    times: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.times.size != self.probs.size or self.times.size == 0:
            raise MetricError("curve arrays must be nonempty and equal length")
        if np.any(np.diff(self.times) <= 0):
            raise MetricError("curve grid must be strictly increasing")
        if self.probs[0] != 1.0:
            raise MetricError("survival must start at 1")
        if np.any(np.diff(self.probs) > 1e-12):
            raise MetricError("survival must be nonincreasing")
        if np.any(self.probs < -1e-12) or np.any(self.probs > 1.0 + 1e-12):
            raise MetricError("survival must stay within [0, 1]")

    def at(self, t) -> np.ndarray:
        """Step evaluation: value of the most recent grid point <= t."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64),
                              side="right") - 1
        idx = np.clip(idx, 0, self.times.size - 1)
        return self.probs[idx]


@dataclass
class HazardRatioEstimate:
    times: np.ndarray
    hr: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    point: float
    point_ci: tuple[float, float]
    n_bootstrap: int = 0
    n_bootstrap_failed: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.hr = np.asarray(self.hr, dtype=np.float64)
        self.ci_low = np.asarray(self.ci_low, dtype=np.float64)
        self.ci_high = np.asarray(self.ci_high, dtype=np.float64)
        if np.any(self.hr <= 0):
            raise MetricError("hazard ratios must be positive")
        if np.any(self.ci_low > self.hr) or np.any(self.ci_high < self.hr):
            raise MetricError("confidence band must contain the estimate")


# ---------------------------------------------------------------------------
# product-limit curves
# ---------------------------------------------------------------------------


def km_curve(y, delta) -> SurvivalCurve:
    """Classical product-limit estimator on raw observed data.

    The grid holds the distinct event times; censored times only shrink the
    risk sets.
    """
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta)
    if y.size == 0:
        raise MetricError("empty cohort")
    event_times = np.unique(y[delta == 1])
    probs = [1.0]
    times = [0.0]
    surv = 1.0
    for t in event_times:
        at_risk = np.count_nonzero(y >= t)
        deaths = np.count_nonzero((y == t) & (delta == 1))
        surv *= 1.0 - deaths / at_risk
        times.append(t)
        probs.append(surv)
    return SurvivalCurve(np.array(times), np.array(probs))


def pkm_curve(draws, y, delta) -> SurvivalCurve:
    """Product-limit estimate over per-subject medians of model draws.

    ``draws`` holds one arm's samples for every subject, shape (n, S) (a
    single column is allowed). The grid is the set of distinct observed
    times; a subject counts as a failure in the bin ending at the first grid
    point at or above its summary when its observed event indicator is 1, and
    leaves the risk set past its summary either way.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta)
    if draws.shape[0] != y.size or y.size == 0:
        raise MetricError("draws and observed data must cover the same cohort")
    gamma = np.median(draws, axis=1)
    grid = np.unique(y)
    # bin index j means gamma in (grid[j-1], grid[j]]
    bins = np.searchsorted(grid, gamma, side="left")
    sorted_gamma = np.sort(gamma)
    n = y.size
    probs = [1.0]
    times = [0.0]
    surv = 1.0
    for j, t in enumerate(grid):
        lower = 0.0 if j == 0 else grid[j - 1]
        at_risk = n - np.searchsorted(sorted_gamma, lower, side="right")
        deaths = np.count_nonzero((bins == j) & (delta == 1))
        if at_risk > 0:
            surv *= 1.0 - deaths / at_risk
        times.append(t)
        probs.append(surv)
    return SurvivalCurve(np.array(times), np.array(probs))


# ---------------------------------------------------------------------------
# nonparametric hazard ratio
# ---------------------------------------------------------------------------


def _fit_slope(times, probs):
    """Least-squares slope of an affine fit probs ~ times."""
    t = np.asarray(times, dtype=np.float64)
    s = np.asarray(probs, dtype=np.float64)
    tc = t - t.mean()
    denom = (tc * tc).sum()
    if denom == 0.0:
        raise MetricError("degenerate fit window (single time point)")
    return float((tc * (s - s.mean())).sum() / denom)


def _fit_window_times(curve0: SurvivalCurve, curve1: SurvivalCurve,
                      fit_window, band) -> np.ndarray:
    times = curve0.times
    if fit_window is not None:
        lo, hi = fit_window
        mask = (times >= lo) & (times <= hi)
    else:
        s0 = curve0.probs
        s1 = curve1.probs
        mask = ((s0 >= band[0]) & (s0 <= band[1])
                & (s1 >= band[0]) & (s1 <= band[1]))
        if mask.sum() < 2:  # flat or steep curves: fall back to the positive range
            mask = (s0 > 0) & (s1 > 0) & (times > 0)
    window = times[mask]
    if window.size < 2:
        raise MetricError("fit window holds fewer than two grid points")
    return window


def _hr_on_window(curve0, curve1, window):
    s0 = curve0.at(window)
    s1 = curve1.at(window)
    m0 = _fit_slope(window, s0)
    m1 = _fit_slope(window, s1)
    if m0 == 0.0:
        raise DegenerateControlError("degenerate control survival")
    if m1 == 0.0:
        raise MetricError("degenerate treated survival (flat over the fit window)")
    keep = (s0 > 0) & (s1 > 0)
    if not keep.any():
        raise MetricError("survival vanished over the whole window")
    hr = (s0[keep] / s1[keep]) * (m1 / m0)
    return window[keep], hr


def nonparam_hr(samples: EventTimeSamples, y, delta, fit_window=None,
                n_bootstrap: int = DEFAULT_BOOTSTRAP, seed: int = 0,
                band=DEFAULT_SURVIVAL_BAND) -> HazardRatioEstimate:
    """Model-free hazard-ratio curve with subject-level bootstrap intervals.

    Builds both arms' predicted-time product-limit curves on the observed
    grid, fits a line to each over the window where both stay inside
    ``band`` (or over the explicit time window), and evaluates
    S0/S1 * m1/m0 per grid point. The scalar summary is the median over the
    window; 95% intervals use the percentile method over subject resamples.
    """
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta)
    curve0 = pkm_curve(samples.t0, y, delta)
    curve1 = pkm_curve(samples.t1, y, delta)
    window = _fit_window_times(curve0, curve1, fit_window, band)
    times, hr = _hr_on_window(curve0, curve1, window)
    point = float(np.median(hr))

    n = samples.n_subjects
    boot_curves = np.empty((0, times.size))
    boot_points = []
    failed = 0
    if n_bootstrap > 0:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        rows = []
        for _ in range(n_bootstrap):
            idx = rng.integers(0, n, n)
            try:
                b0 = pkm_curve(samples.t0[idx], y[idx], delta[idx])
                b1 = pkm_curve(samples.t1[idx], y[idx], delta[idx])
                bt, bhr = _hr_on_window(b0, b1, times)
                values = np.interp(times, bt, bhr)
                rows.append(values)
                boot_points.append(float(np.median(values)))
            except MetricError:
                failed += 1
        if rows:
            boot_curves = np.vstack(rows)
    if boot_curves.shape[0] >= 2:
        ci_low = np.minimum(np.quantile(boot_curves, 0.025, axis=0), hr)
        ci_high = np.maximum(np.quantile(boot_curves, 0.975, axis=0), hr)
        p_low = min(float(np.quantile(boot_points, 0.025)), point)
        p_high = max(float(np.quantile(boot_points, 0.975)), point)
    else:
        ci_low = hr.copy()
        ci_high = hr.copy()
        p_low = p_high = point
    return HazardRatioEstimate(times=times, hr=hr, ci_low=ci_low, ci_high=ci_high,
                               point=point, point_ci=(p_low, p_high),
                               n_bootstrap=n_bootstrap, n_bootstrap_failed=failed)


# ---------------------------------------------------------------------------
# conditional (per-subject) hazard ratio
# ---------------------------------------------------------------------------


def _silverman_bandwidth(draws: np.ndarray) -> float:
    sd = draws.std(ddof=1)
    q75, q25 = np.percentile(draws, [75, 25])
    iqr = q75 - q25
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if spread <= 0:
        raise MetricError("zero-variance draws make the density estimate degenerate")
    return 0.9 * spread * draws.size ** (-0.2)


def _kde_survival(draws: np.ndarray, grid: np.ndarray) -> np.ndarray:
    h = _silverman_bandwidth(draws)
    z = (grid[:, None] - draws[None, :]) / h
    return 1.0 - ndtr(z).mean(axis=1)


def conditional_hr(draws0, draws1, grid=None, n_grid: int = 60,
                   band=DEFAULT_SURVIVAL_BAND):
    """Per-subject hazard-ratio trace from kernel-smoothed survival curves.

    ``draws0``/``draws1`` are one subject's Monte Carlo draws per arm (at
    least 50 each). Returns (grid, hr) on the shared grid.
    """
    draws0 = np.asarray(draws0, dtype=np.float64).ravel()
    draws1 = np.asarray(draws1, dtype=np.float64).ravel()
    if draws0.size < 50 or draws1.size < 50:
        raise MetricError("need at least 50 draws per arm for the smoothed trace")
    if grid is None:
        pooled = np.concatenate([draws0, draws1])
        lo, hi = np.quantile(pooled, [0.005, 0.995])
        if hi <= lo:
            raise MetricError("zero-variance draws make the density estimate degenerate")
        grid = np.linspace(lo, hi, n_grid)
    else:
        grid = np.asarray(grid, dtype=np.float64)
    s0 = _kde_survival(draws0, grid)
    s1 = _kde_survival(draws1, grid)
    m0 = _fit_slope(*_band_window(grid, s0, band))
    m1 = _fit_slope(*_band_window(grid, s1, band))
    if m0 == 0.0:
        raise DegenerateControlError("degenerate control survival")
    floor = np.finfo(float).tiny
    hr = (np.maximum(s0, floor) / np.maximum(s1, floor)) * (m1 / m0)
    return grid, hr


def _band_window(grid, s, band):
    mask = (s >= band[0]) & (s <= band[1])
    if mask.sum() < 2:
        mask = np.ones_like(s, dtype=bool)
    return grid[mask], s[mask]


def conditional_hr_matrix(samples: EventTimeSamples, grid) -> np.ndarray:
    """Stacked per-subject traces on a common grid, shape (n, len(grid))."""
    grid = np.asarray(grid, dtype=np.float64)
    out = np.empty((samples.n_subjects, grid.size))
    for i in range(samples.n_subjects):
        _, out[i] = conditional_hr(samples.t0[i], samples.t1[i], grid=grid)
    return out


# ---------------------------------------------------------------------------
# factual metrics
# ---------------------------------------------------------------------------


def c_index(predictions, y, delta) -> float:
    """Concordance over comparable pairs; prediction ties score half.

    Pair (i, j) is comparable when y_i < y_j and subject i had the event.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta)
    comparable = (y[:, None] < y[None, :]) & (delta[:, None] == 1)
    n_comp = comparable.sum()
    if n_comp == 0:
        raise MetricError("no comparable pairs")
    concordant = comparable & (predictions[:, None] < predictions[None, :])
    ties = comparable & (predictions[:, None] == predictions[None, :])
    return float((concordant.sum() + 0.5 * ties.sum()) / n_comp)


def calibration_slope(draws, y, delta) -> float:
    """Slope of the model survival curve against the data survival curve.

    Both curves are evaluated at the distinct event times; a perfectly
    calibrated model tracks the data curve with slope 1.
    """
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta)
    data_curve = km_curve(y, delta)
    model_curve = pkm_curve(draws, y, delta)
    event_times = data_curve.times[1:]  # drop the t=0 anchor
    if event_times.size < 2:
        raise MetricError("need at least two event times for a calibration fit")
    x = data_curve.at(event_times)
    z = model_curve.at(event_times)
    xc = x - x.mean()
    denom = (xc * xc).sum()
    if denom == 0.0:
        raise MetricError("data curve is flat; calibration slope undefined")
    return float((xc * (z - z.mean())).sum() / denom)


def mean_cov(draws) -> float:
    """Average per-subject coefficient of variation of the draws."""
    draws = np.atleast_2d(np.asarray(draws, dtype=np.float64))
    if draws.shape[1] < 2:
        raise MetricError("need at least two draws per subject")
    sd = draws.std(axis=1, ddof=1)
    mean = draws.mean(axis=1)
    return float((sd / mean).mean())


# ---------------------------------------------------------------------------
# causal metrics
# ---------------------------------------------------------------------------


def ite_expected_lifetime(samples: EventTimeSamples) -> np.ndarray:
    """Per-subject difference of mean sampled lifetimes (arm 1 minus arm 0)."""
    return samples.t1.mean(axis=1) - samples.t0.mean(axis=1)


def pehe(predicted_ite, true_ite) -> float:
    predicted = np.asarray(predicted_ite, dtype=np.float64)
    true = np.asarray(true_ite, dtype=np.float64)
    if predicted.shape != true.shape or predicted.size == 0:
        raise MetricError("ITE vectors must be nonempty and aligned")
    return float(np.sqrt(np.mean((true - predicted) ** 2)))


def ate_error(predicted_ite, true_ite) -> float:
    predicted = np.asarray(predicted_ite, dtype=np.float64)
    true = np.asarray(true_ite, dtype=np.float64)
    if predicted.shape != true.shape or predicted.size == 0:
        raise MetricError("ITE vectors must be nonempty and aligned")
    return float(abs(true.mean() - predicted.mean()))


# ---------------------------------------------------------------------------
# trace clustering
# ---------------------------------------------------------------------------


def stratify_hr_traces(traces, k: int):
    """Average-linkage agglomerative clustering of per-subject trace vectors.

    Returns 0-based labels (numbered by first appearance) and the per-cluster
    mean traces, shape (k, n_grid).
    """
    traces = np.atleast_2d(np.asarray(traces, dtype=np.float64))
    n = traces.shape[0]
    if k < 1:
        raise MetricError("k must be at least 1")
    if k > n:
        raise MetricError(f"cannot form {k} clusters from {n} traces")
    if k == 1 or n == 1:
        labels = np.zeros(n, dtype=int)
    else:
        Z = linkage(traces, method="average", metric="euclidean")
        raw = fcluster(Z, t=k, criterion="maxclust")
        remap = {}
        labels = np.empty(n, dtype=int)
        for i, r in enumerate(raw):
            if r not in remap:
                remap[r] = len(remap)
            labels[i] = remap[r]
    n_found = labels.max() + 1
    means = np.vstack([traces[labels == c].mean(axis=0) for c in range(n_found)])
    return labels, means
