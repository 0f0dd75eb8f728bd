"""Pure numeric helpers over raw series, shared by the toolkit and the
prompt assembler (which must profile without producing artifacts)."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

# |ols_slope * length / std| below this is called "stable"; mirrors the
# day-mean +-0.5 style cutoff used by the trend task contracts.
TREND_STABLE_CUTOFF = 0.5

# Minimum lagged correlation for a dominant period to count as significant.
PERIOD_SIGNIFICANCE = 0.5


def population_std(values: Sequence[float]) -> float:
    return float(np.std(np.asarray(values, dtype=float)))


def ols_slope(values: Sequence[float]) -> float:
    """Least-squares slope of value against 0-based index."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return 0.0
    x = np.arange(len(v), dtype=float)
    xm = x - x.mean()
    denom = float(np.dot(xm, xm))
    if denom == 0.0:
        return 0.0
    return float(np.dot(xm, v - v.mean()) / denom)


def trend_label(values: Sequence[float]) -> tuple[str, float, float]:
    """(label, slope, normalized slope) where the label is one of
    increasing/decreasing/stable by the normalized-slope cutoff."""
    slope = ols_slope(values)
    std = population_std(values)
    if std == 0.0:
        return "stable", slope, 0.0
    normalized = slope * len(values) / std
    if abs(normalized) < TREND_STABLE_CUTOFF:
        return "stable", slope, normalized
    return ("increasing" if normalized > 0 else "decreasing"), slope, normalized


def lagged_correlation(values: Sequence[float], lag: int) -> tuple[float, bool]:
    """Pearson correlation between the series and its lag-shifted view.

    Returns (r, defined); r is 0.0 when either segment has zero variance.
    """
    v = np.asarray(values, dtype=float)
    if lag < 1 or lag > len(v) - 2:
        return 0.0, False
    a, b = v[:-lag], v[lag:]
    sa, sb = np.std(a), np.std(b)
    if sa == 0.0 or sb == 0.0:
        return 0.0, False
    r = float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
    return r, True


# near-maximal correlations within this margin count as ties; the smallest
# such lag wins so harmonics of the fundamental period are not reported
_PERIOD_TIE_MARGIN = 0.01


def dominant_period(values: Sequence[float]) -> tuple[Optional[int], bool]:
    """Max lagged correlation over lags 2..len/2, with a significance flag.

    Among near-maximal lags the smallest is returned, so a daily cycle reads
    as 24 rather than one of its multiples.
    """
    n = len(values)
    scores: list[tuple[int, float]] = []
    best_r = -math.inf
    for lag in range(2, n // 2 + 1):
        r, defined = lagged_correlation(values, lag)
        if defined:
            scores.append((lag, r))
            best_r = max(best_r, r)
    if not scores:
        return None, False
    for lag, r in scores:  # ascending lag order
        if r >= best_r - _PERIOD_TIE_MARGIN:
            return lag, r >= PERIOD_SIGNIFICANCE
    return None, False


def zscores(values: Sequence[float]) -> list[float]:
    v = np.asarray(values, dtype=float)
    std = float(np.std(v))
    if std == 0.0:
        return [0.0] * len(v)
    return [float(z) for z in (v - v.mean()) / std]


def split_half_stationarity(values: Sequence[float]) -> dict[str, float | bool]:
    """Cheap stationarity check comparing the two halves of the series."""
    v = np.asarray(values, dtype=float)
    half = len(v) // 2
    if half < 2:
        return {"stationary": True, "mean_shift": 0.0, "var_ratio": 1.0}
    a, b = v[:half], v[half:]
    scale = float(np.std(v))
    mean_shift = abs(float(b.mean() - a.mean())) / scale if scale > 0 else 0.0
    va, vb = float(np.var(a)), float(np.var(b))
    var_ratio = vb / va if va > 0 else (1.0 if vb == 0 else float("inf"))
    stationary = mean_shift < 0.5 and 0.25 <= var_ratio <= 4.0
    return {
        "stationary": bool(stationary),
        "mean_shift": mean_shift,
        "var_ratio": var_ratio,
    }
