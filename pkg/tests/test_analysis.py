from __future__ import annotations

import numpy as np
import pytest

from structlin.analysis import fit_power_law
from structlin.errors import DomainError, InsufficientDataError


def test_exact_power_law():
    c = np.logspace(2, 8, 12)
    fit = fit_power_law(zip(c, 2.0 * c**-0.5))
    assert abs(fit.alpha - 0.5) <= 1e-12
    assert fit.alpha_stderr <= 1e-12
    assert fit.amplitude == pytest.approx(2.0, rel=1e-12)
    assert fit.n_points == 12


def test_constant_error_has_zero_exponent():
    fit = fit_power_law([(10.0, 0.3), (100.0, 0.3), (1000.0, 0.3), (5.0, 0.3)])
    assert fit.alpha == 0.0
    assert fit.alpha_stderr == 0.0


def test_noisy_fit_recovers_exponent():
    g = np.random.default_rng(0)
    c = np.logspace(3, 9, 50)
    e = c**-0.3 * np.exp(g.normal(0.0, 0.01, size=50))
    fit = fit_power_law(zip(c, e))
    assert 0.28 <= fit.alpha <= 0.32
    assert abs(fit.alpha - 0.3) <= 3 * fit.alpha_stderr


def test_stderr_matches_textbook_formula():
    g = np.random.default_rng(1)
    c = np.logspace(1, 5, 20)
    e = 3 * c**-0.7 * np.exp(g.normal(0, 0.2, 20))
    fit = fit_power_law(zip(c, e))
    x, y = np.log(c), np.log(e)
    design = np.column_stack([np.ones_like(x), x])
    coef, res, *_ = np.linalg.lstsq(design, y, rcond=None)
    cov = res[0] / (len(x) - 2) * np.linalg.inv(design.T @ design)
    assert fit.alpha == pytest.approx(-coef[1], rel=1e-10)
    assert fit.alpha_stderr == pytest.approx(np.sqrt(cov[1, 1]), rel=1e-10)
    assert fit.predict(c[0]) == pytest.approx(np.exp(coef[0]) * c[0] ** coef[1], rel=1e-10)


def test_errors():
    with pytest.raises(InsufficientDataError):
        fit_power_law([(1.0, 1.0), (2.0, 0.5)])
    with pytest.raises(DomainError):
        fit_power_law([(1.0, 1.0), (2.0, 0.0), (3.0, 0.1)])
    with pytest.raises(DomainError):
        fit_power_law([(-1.0, 1.0), (2.0, 0.5), (3.0, 0.1)])
    with pytest.raises(DomainError):
        fit_power_law([(2.0, 1.0), (2.0, 0.5), (2.0, 0.1)])
