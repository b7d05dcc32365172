"""Quadratic surrogate of the matching function and matching elasticities.

The surrogate is

    m(AU, V) = b1*AU + b2*AU*V + b3*V + b4*AU**2 + b5*V**2

with no intercept, fit by L1-penalized least squares on RMS-scaled
regressors using cyclic coordinate descent.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .data import MarketPanel

TERMS = ("AU", "AU*V", "V", "AU^2", "V^2")
KKT_TOL = 1e-8


class DegenerateDesignError(ArithmeticError):
    pass


def design_matrix(AU: np.ndarray, V: np.ndarray) -> np.ndarray:
    AU = np.asarray(AU, float)
    V = np.asarray(V, float)
    return np.column_stack([AU, AU * V, V, AU * AU, V * V])


def _soft(x: float, t: float) -> float:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def kkt_violation(G: np.ndarray, c: np.ndarray, b: np.ndarray, lam: float) -> float:
    """Max KKT violation of 0.5 b'Gb - c'b + lam*|b|_1."""
    g = c - G @ b
    viol = np.where(b != 0, np.abs(g - lam * np.sign(b)), np.maximum(np.abs(g) - lam, 0.0))
    return float(viol.max(initial=0.0))


def _objective(G, c, b, lam):
    return 0.5 * b @ G @ b - c @ b + lam * np.abs(b).sum()


def _sign_pattern_solve(G: np.ndarray, c: np.ndarray, lam: float, atol: float) -> np.ndarray | None:
    """Exact minimizer by enumerating sign patterns (only for small p).

    For each pattern s the stationarity equations G_SS b_S = c_S - lam*s_S
    are solved; a pattern is accepted when the signs agree and every
    inactive gradient is within lam. Lowest objective wins.
    """
    best, best_obj = None, np.inf
    for pattern in itertools.product((-1.0, 0.0, 1.0), repeat=c.size):
        b = _pattern_solve(G, c, lam, np.array(pattern), atol)
        if b is None:
            continue
        obj = _objective(G, c, b, lam)
        if obj < best_obj:
            best, best_obj = b, obj
    return best


def _pattern_solve(G, c, lam, s, atol):
    idx = np.flatnonzero(s)
    b = np.zeros(c.size)
    if idx.size:
        try:
            b[idx] = np.linalg.solve(G[np.ix_(idx, idx)], c[idx] - lam * s[idx])
        except np.linalg.LinAlgError:
            return None
        if np.any(np.sign(b[idx]) != s[idx]):
            return None
    return b if kkt_violation(G, c, b, lam) <= atol else None


def lasso_gram(G: np.ndarray, c: np.ndarray, lam: float, b0: np.ndarray | None = None,
               tol: float = KKT_TOL, max_sweeps: int = 200) -> np.ndarray:
    """Minimize 0.5 b'Gb - c'b + lam*|b|_1 (the Gram form of 0.5||y - Zb||^2 + lam*|b|_1).

    Cyclic coordinate descent from ``b0``. The quadratic design is often
    very badly conditioned, where descent stalls long before the KKT
    tolerance; the iterate's sign pattern (then the warm start's) is then
    solved exactly, and as a last resort every sign pattern is tried.
    ``tol`` is relative to max|c|.
    """
    p = c.size
    b = np.zeros(p) if b0 is None else np.array(b0, float)
    Gl = G.tolist()
    cl = c.tolist()
    bl = b.tolist()
    atol = tol * max(1.0, float(np.abs(c).max()))
    for sweep in range(max_sweeps):
        for j in range(p):
            row = Gl[j]
            r = cl[j] - sum(row[k] * bl[k] for k in range(p)) + row[j] * bl[j]
            bl[j] = _soft(r, lam) / row[j]
        if sweep % 10 == 9:
            b = np.array(bl)
            if kkt_violation(G, c, b, lam) <= atol:
                return b
            hit = _pattern_solve(G, c, lam, np.sign(b), atol)
            if hit is not None:
                return hit
    b = np.array(bl)
    if b0 is not None:
        hit = _pattern_solve(G, c, lam, np.sign(b0), atol)
        if hit is not None:
            return hit
    if p <= 10:
        exact = _sign_pattern_solve(G, c, lam, atol)
        if exact is not None:
            return exact
    return b


@dataclass
class SurrogateCoefficients:
    beta: np.ndarray
    lam: float
    r2: float = float("nan")
    nonzero: int = 0
    kkt: float = float("nan")
    scale: dict = field(default_factory=lambda: {"H": 1.0, "U": 1.0, "V": 1.0})

    @property
    def beta1(self): return float(self.beta[0])
    @property
    def beta2(self): return float(self.beta[1])
    @property
    def beta3(self): return float(self.beta[2])
    @property
    def beta4(self): return float(self.beta[3])
    @property
    def beta5(self): return float(self.beta[4])

    def predict(self, AU, V) -> np.ndarray:
        return design_matrix(np.atleast_1d(AU), np.atleast_1d(V)) @ self.beta

    def to_dict(self) -> dict:
        return {
            "beta": {f"beta{i + 1}": float(b) for i, b in enumerate(self.beta)},
            "terms": list(TERMS),
            "lambda": float(self.lam),
            "fit_stats": {"r2": float(self.r2), "nonzero": int(self.nonzero), "kkt_violation": float(self.kkt)},
            "scale": {k: float(v) for k, v in self.scale.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateCoefficients":
        beta = np.array([d["beta"][f"beta{i}"] for i in range(1, 6)], float)
        fs = d.get("fit_stats", {})
        return cls(beta, float(d.get("lambda", 0.0)), fs.get("r2", float("nan")), fs.get("nonzero", 0),
                   fs.get("kkt_violation", float("nan")), d.get("scale", {"H": 1.0, "U": 1.0, "V": 1.0}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SurrogateCoefficients":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _standardize(X: np.ndarray) -> np.ndarray:
    for j, name in enumerate(TERMS):
        col = X[:, j]
        if np.std(col) <= 1e-12 * max(1.0, float(np.abs(col).mean())):
            raise DegenerateDesignError(f"design column {name!r} is constant")
    return np.sqrt(np.mean(X * X, axis=0))


def lambda_max(X: np.ndarray, y: np.ndarray) -> float:
    s = _standardize(X)
    return float(np.abs((X / s).T @ y).max())


def fit_lasso(X: np.ndarray, y: np.ndarray, lam: float, b0: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Returns (coefficients on the original regressors, KKT violation in standardized units)."""
    s = _standardize(X)
    Z = X / s
    G = Z.T @ Z
    c = Z.T @ y
    b = lasso_gram(G, c, lam, None if b0 is None else np.asarray(b0) * s)
    return b / s, kkt_violation(G, c, b, lam)


def lambda_grid(X: np.ndarray, y: np.ndarray, n: int = 50, ratio: float = 1e-8) -> np.ndarray:
    lmax = lambda_max(X, y)
    return np.geomspace(lmax, lmax * ratio, n)


def cv_lambda(X: np.ndarray, y: np.ndarray, folds: int = 5, n_lambda: int = 50, seed: int = 0) -> float:
    """Lambda minimizing mean held-out squared error over seeded folds.

    Penalties are scaled by the training-fold size so a given lambda means
    the same per-observation penalty on every fold and on the full sample.
    """
    n = len(y)
    grid = lambda_grid(X, y, n_lambda)
    rng = np.random.default_rng(seed)
    assign = rng.permutation(n) % folds
    err = np.zeros(grid.size)
    for k in range(folds):
        tr, te = assign != k, assign == k
        s = _standardize(X[tr])
        Z = X[tr] / s
        G, c = Z.T @ Z, Z.T @ y[tr]
        b = None
        for i, lam in enumerate(grid):
            b = lasso_gram(G, c, lam * tr.sum() / n, b)
            resid = y[te] - (X[te] / s) @ b
            err[i] += float(resid @ resid)
    return float(grid[int(np.argmin(err))])


def fit_surrogate(panel: MarketPanel, A: np.ndarray, lam: float | str = "cv", seed: int = 0,
                  folds: int = 5, n_lambda: int = 50) -> SurrogateCoefficients:
    """Fit the quadratic surrogate of hires on (A*U, V).

    ``A`` is aligned with panel rows. ``lam`` is a nonnegative penalty on the
    objective 0.5*sum(r**2) + lam*sum(|b|) with RMS-scaled regressors, or
    ``"cv"`` for 5-fold cross-validation over a 50-point log grid.
    """
    A = np.asarray(A, float)
    AU = A * panel.U
    X = design_matrix(AU, panel.V)
    y = panel.H
    if lam == "cv":
        lam = cv_lambda(X, y, folds, n_lambda, seed)
    lam = float(lam)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    beta, kkt = fit_lasso(X, y, lam)
    resid = y - X @ beta
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else float("nan")
    return SurrogateCoefficients(beta, lam, r2, int(np.count_nonzero(beta)), kkt, dict(panel.scale))


def marginal_hires_dau(coeffs: SurrogateCoefficients, AU, V):
    b = coeffs.beta
    return b[0] + b[1] * V + 2 * b[3] * AU


def marginal_hires_du(coeffs: SurrogateCoefficients, A, u, v):
    """d m(A u, v) / d u."""
    return A * marginal_hires_dau(coeffs, A * u, v)


def elasticity_u(coeffs: SurrogateCoefficients, A, U, V, H, mode: str = "AU"):
    """Elasticity of hires w.r.t. unemployed.

    ``mode="AU"`` multiplies dm/d(AU) by AU/H (the chain-rule form);
    ``mode="U"`` uses U/H as printed in some derivations, kept for replication.
    """
    H = np.asarray(H, float)
    if np.any(H <= 0):
        raise ValueError("elasticities need positive hires")
    AU = np.asarray(A) * np.asarray(U)
    base = AU if mode == "AU" else np.asarray(U, float)
    return marginal_hires_dau(coeffs, AU, V) * base / H


def elasticity_v(coeffs: SurrogateCoefficients, A, U, V, H):
    H = np.asarray(H, float)
    if np.any(H <= 0):
        raise ValueError("elasticities need positive hires")
    b = coeffs.beta
    AU = np.asarray(A) * np.asarray(U)
    V = np.asarray(V, float)
    return (b[1] * AU + b[2] + 2 * b[4] * V) * V / H


def elasticity_frame(panel: MarketPanel, A: np.ndarray, coeffs: SurrogateCoefficients, mode: str = "AU") -> pd.DataFrame:
    return pd.DataFrame({
        "market_id": panel.market_ids,
        "period": panel.periods,
        "eta_U": elasticity_u(coeffs, A, panel.U, panel.V, panel.H, mode),
        "eta_V": elasticity_v(coeffs, A, panel.U, panel.V, panel.H),
    })
