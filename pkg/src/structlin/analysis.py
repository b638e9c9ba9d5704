"""Power-law fits of error against compute."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InsufficientDataError


@dataclass(frozen=True)
class PowerLawFit:
    """E ~ amplitude * C**(-alpha), fitted by least squares in log-log space."""

    alpha: float
    amplitude: float
    alpha_stderr: float
    n_points: int

    def predict(self, compute):
        return self.amplitude * np.asarray(compute, dtype=np.float64) ** (-self.alpha)


def fit_power_law(points) -> PowerLawFit:
    """Ordinary least squares of log E on log C.

    Parameters
    ----------
    points : sequence of (C, E) pairs
        Compute and error values, all strictly positive.

    Returns
    -------
    PowerLawFit
        ``alpha`` is minus the fitted slope, so decreasing trends give
        positive exponents. ``alpha_stderr`` is the usual OLS slope standard
        error with n - 2 degrees of freedom (0 when n == 2 is impossible,
        since at least three points are required).
    """
    pts = np.asarray(list(points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DomainError("points must be (compute, error) pairs")
    n = pts.shape[0]
    if n < 3:
        raise InsufficientDataError(f"need at least 3 points for a fit, got {n}")
    if not np.all(np.isfinite(pts)) or np.any(pts <= 0):
        raise DomainError("compute and error values must be finite and positive")
    x = np.log(pts[:, 0])
    y = np.log(pts[:, 1])
    # shifting by the first value keeps a constant series exactly constant
    x0, y0 = x[0], y[0]
    xs, ys = x - x0, y - y0
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise DomainError("all compute values are equal; slope is undefined")
    slope = float(xc @ yc) / sxx
    intercept = (y0 + ys.mean()) - slope * (x0 + xs.mean())
    resid = yc - slope * xc
    s2 = float(resid @ resid) / (n - 2)
    return PowerLawFit(
        alpha=-slope + 0.0,
        amplitude=math.exp(intercept),
        alpha_stderr=math.sqrt(s2 / sxx),
        n_points=n,
    )
