"""Residual diagnostic for A independent of V given U, and market ratios."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import MarketPanel


class DegenerateRegressionError(ArithmeticError):
    pass


def ols_residuals(y: np.ndarray, x: np.ndarray, constant: bool = True) -> np.ndarray:
    y = np.asarray(y, float)
    x = np.asarray(x, float)
    if np.ptp(x) <= 1e-12 * max(1.0, float(np.abs(x).max())):
        raise DegenerateRegressionError("regressor U is constant")
    X = np.column_stack([np.ones_like(x), x]) if constant else x[:, None]
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return y - X @ coef


@dataclass
class IndependenceCheck:
    correlation: float
    e_V: np.ndarray
    e_A: np.ndarray

    def frame(self, panel: MarketPanel | None = None) -> pd.DataFrame:
        df = pd.DataFrame({"e_V": self.e_V, "e_A": self.e_A})
        if panel is not None:
            df.insert(0, "period", panel.periods)
            df.insert(0, "market_id", panel.market_ids)
        return df


def residual_independence_check(panel: MarketPanel, A: np.ndarray, constant: bool = True) -> IndependenceCheck:
    """Correlation of the residuals of V on U and of A on U.

    ``A`` is aligned with the panel rows. A zero-variance residual makes
    the correlation undefined; it is returned as NaN with a warning.
    """
    U = panel.U
    e_V = ols_residuals(panel.V, U, constant)
    e_A = ols_residuals(A, U, constant)
    sv, sa = np.std(e_V), np.std(e_A)
    tiny = 1e-12
    if sv <= tiny * max(1.0, np.abs(panel.V).mean()) or sa <= tiny * max(1.0, np.abs(A).mean()):
        warnings.warn("a residual series has zero variance; correlation undefined", RuntimeWarning, stacklevel=2)
        r = float("nan")
    else:
        r = float(np.corrcoef(e_V, e_A)[0, 1])
    return IndependenceCheck(r, e_V, e_A)


def market_summaries(panel: MarketPanel) -> pd.DataFrame:
    """Tightness V/U, job-finding H/U and worker-finding H/V per observation."""
    H, U, V = panel.H, panel.U, panel.V
    return pd.DataFrame({
        "market_id": panel.market_ids,
        "period": panel.periods,
        "tightness": V / U,
        "job_finding": H / U,
        "worker_finding": H / V,
    })
