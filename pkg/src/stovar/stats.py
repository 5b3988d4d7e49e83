"""Small statistical helpers: Monte Carlo standard errors, weighted trend fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as _sps

from .exceptions import InputError


def mean_stderr(samples: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and standard error of the mean along ``axis``.

    Complex input returns a complex mean and a real combined standard error
    sqrt(Var(Re) + Var(Im)) / sqrt(n).
    """
    samples = np.asarray(samples)
    n = samples.shape[axis]
    if n < 1:
        raise InputError("mean_stderr needs at least one sample")
    m = samples.mean(axis=axis)
    if n == 1:
        return m, np.zeros_like(np.real(m), dtype=float)
    if np.iscomplexobj(samples):
        var = samples.real.var(axis=axis, ddof=1) + samples.imag.var(axis=axis, ddof=1)
    else:
        var = samples.var(axis=axis, ddof=1)
    return m, np.sqrt(var / n)


@dataclass
class SlopeFit:
    """Weighted least-squares line fit y ~ intercept + slope * t."""

    slope: float
    intercept: float
    slope_stderr: float
    ci_low: float
    ci_high: float

    def contains_zero(self) -> bool:
        return self.ci_low <= 0.0 <= self.ci_high


def weighted_slope(
    t: np.ndarray,
    y: np.ndarray,
    stderr: np.ndarray | None = None,
    level: float = 0.99,
) -> SlopeFit:
    """Fit a straight line, weighting points by 1/stderr^2 when stderrs are given.

    With per-point standard errors the slope uncertainty is the exact
    propagated one; without them (or when they are all ~0) the residual-based
    ordinary least-squares estimate is used. Degenerate standard errors are
    floored so exactly-constant series do not divide by zero.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.ndim != 1 or t.shape != y.shape:
        raise InputError("t and y must be 1-d arrays of equal length")
    if t.size < 3:
        raise InputError("need at least 3 points for a trend fit")
    z = _sps.norm.ppf(0.5 + level / 2.0)

    if stderr is not None:
        stderr = np.asarray(stderr, dtype=float)
        scale = 1.0 + np.median(np.abs(y))
        floor = 1e-15 * scale
        if np.all(stderr <= floor):
            stderr = None  # fall through to OLS on an essentially exact series
        else:
            w = 1.0 / np.maximum(stderr, floor) ** 2

    if stderr is None:
        # ordinary least squares; slope error from residual variance
        tbar = t.mean()
        sxx = np.sum((t - tbar) ** 2)
        slope = np.sum((t - tbar) * (y - y.mean())) / sxx
        intercept = y.mean() - slope * tbar
        resid = y - (intercept + slope * t)
        dof = max(t.size - 2, 1)
        se = np.sqrt(np.sum(resid**2) / dof / sxx)
    else:
        sw = w.sum()
        tbar = np.sum(w * t) / sw
        ybar = np.sum(w * y) / sw
        sxx = np.sum(w * (t - tbar) ** 2)
        if sxx <= 0:
            raise InputError("degenerate time axis for trend fit")
        slope = np.sum(w * (t - tbar) * (y - ybar)) / sxx
        intercept = ybar - slope * tbar
        se = np.sqrt(1.0 / sxx)

    return SlopeFit(
        slope=float(slope),
        intercept=float(intercept),
        slope_stderr=float(se),
        ci_low=float(slope - z * se),
        ci_high=float(slope + z * se),
    )
