"""Planner allocation of unemployed across markets and mismatch indices.

The planner maximizes sum_l m(A_l u_l, V_l) subject to sum_l u_l = U and
u_l >= 0, using the quadratic surrogate for m. With a strictly concave
surrogate (beta4 < 0) the first-order conditions give each market's
allocation as an explicit function of the common multiplier, which is
found by bisection (water-filling).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import MarketPanel, apply_scale
from .elasticity import SurrogateCoefficients, marginal_hires_du

log = logging.getLogger(__name__)

FALLBACK_STARTS = 16
FEAS_RTOL = 1e-10


@dataclass(frozen=True)
class MarketStateAtT:
    market_id: str
    A: float
    U_obs: float
    V: float

    def __post_init__(self):
        if not (self.A > 0 and self.V > 0 and self.U_obs >= 0):
            raise ValueError(f"invalid market state {self}")


@dataclass
class PlannerSolution:
    allocation: np.ndarray
    multiplier: float
    H_star: float
    H_obs: float
    index: float
    kkt_residual: float
    status: str
    market_ids: list = field(default_factory=list)
    U_obs: np.ndarray | None = None
    period: int | None = None


def _arrays(states):
    A = np.array([s.A for s in states], float)
    U = np.array([s.U_obs for s in states], float)
    V = np.array([s.V for s in states], float)
    return A, U, V


def surrogate_total(coeffs: SurrogateCoefficients, A, u, V) -> float:
    return float(np.sum(coeffs.predict(A * u, V)))


def _fix_total(u: np.ndarray, total: float) -> np.ndarray:
    """Push the rounding residual of sum(u) into the largest entry."""
    u = np.maximum(u, 0.0)
    k = int(np.argmax(u))
    u[k] += total - u.sum()
    return u


def _water_fill(a: np.ndarray, b: np.ndarray, total: float) -> tuple[np.ndarray, float]:
    """Maximize sum(a_l u_l - b_l u_l^2 / 2) on the simplex, b > 0.

    Marginals are a_l - b_l u_l, so u_l(lam) = max(0, (a_l - lam) / b_l).
    """
    def alloc(lam):
        return np.maximum(0.0, (a - lam) / b)

    hi = float(a.max())                 # every u_l = 0
    lo = float(np.min(a - b * total))   # some u_l >= total
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if alloc(mid).sum() > total:
            lo = mid
        else:
            hi = mid
        if abs(alloc(mid).sum() - total) <= FEAS_RTOL * total or hi - lo <= 1e-15 * max(1.0, abs(mid)):
            break
    lam = 0.5 * (lo + hi)
    # exact multiplier on the active set; repeat if the set shifts
    for _ in range(a.size + 1):
        active = a > lam
        lam_new = (np.sum(a[active] / b[active]) - total) / np.sum(1.0 / b[active])
        if np.array_equal(a > lam_new, active):
            lam = lam_new
            break
        lam = lam_new
    return _fix_total(alloc(lam), total), float(lam)


def _project_simplex(x: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {u >= 0, sum u = total} (sort-based)."""
    s = np.sort(x)[::-1]
    css = np.cumsum(s) - total
    k = np.arange(1, x.size + 1)
    rho = np.flatnonzero(s - css / k > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(x - theta, 0.0)


def _projected_gradient(coeffs, A, V, total, starts, iters=2000):
    b = coeffs.beta
    # Lipschitz constant of the gradient of the separable objective
    lip = max(2.0 * abs(b[3]) * float(np.max(A * A)), 1e-12)
    step = 1.0 / lip if b[3] != 0 else total
    best, best_obj = None, -np.inf
    for u in starts:
        u = _project_simplex(u, total)
        for _ in range(iters):
            g = marginal_hires_du(coeffs, A, u, V)
            nxt = _project_simplex(u + step * g, total)
            if np.max(np.abs(nxt - u)) <= 1e-14 * total:
                u = nxt
                break
            u = nxt
        obj = surrogate_total(coeffs, A, u, V)
        if obj > best_obj:
            best, best_obj = u, obj
    return _fix_total(best, total)


def _kkt(coeffs, A, V, u, total, lam=None):
    """(multiplier, residual) for an allocation on the simplex."""
    g = marginal_hires_du(coeffs, A, u, V)
    interior = u > 1e-12 * total
    if lam is None:
        lam = float(np.mean(g[interior])) if interior.any() else float(g.max())
    dev = float(np.max(np.abs(g[interior] - lam))) if interior.any() else 0.0
    corner = float(np.max(np.maximum(g[~interior] - lam, 0.0), initial=0.0))
    return lam, max(dev, corner)


def planner_allocate(states: list[MarketStateAtT], coeffs: SurrogateCoefficients, seed: int = 0) -> PlannerSolution:
    """Planner's allocation of the period's unemployed across markets.

    Status is ``ok`` for an interior water-filling solution, ``clipped``
    when some market sits at the u = 0 corner, and ``nonconcave_fallback``
    when beta4 >= 0 and the answer comes from multi-start projected
    gradient ascent.
    """
    if len(states) == 0:
        raise ValueError("planner needs at least one market")
    A, U, V = _arrays(states)
    total = float(U.sum())
    if not total > 0:
        raise ValueError("total unemployed must be positive")
    b = coeffs.beta
    lam = None
    if len(states) == 1:
        u, status = np.array([total]), "ok"
    elif b[3] < 0:
        # separable objective: A(b1 + b2 V) u + b4 A^2 u^2 (+ terms free of u)
        u, lam = _water_fill(A * (b[0] + b[1] * V), -2.0 * b[3] * A * A, total)
        status = "ok" if np.all(u > 0) else "clipped"
    else:
        rng = np.random.default_rng(seed)
        starts = [U.copy()] + [total * rng.dirichlet(np.ones(len(states))) for _ in range(FALLBACK_STARTS - 1)]
        u = _projected_gradient(coeffs, A, V, total, starts)
        status = "nonconcave_fallback"
        log.info("surrogate is not concave in u (beta4=%.3g); using projected gradient", b[3])
    lam, resid = _kkt(coeffs, A, V, u, total, lam)
    if len(states) == 1:
        resid = 0.0
    H_star = surrogate_total(coeffs, A, u, V)
    H_obs = surrogate_total(coeffs, A, U, V)
    index = 1.0 - H_obs / H_star if H_star != 0 else float("nan")
    return PlannerSolution(u, lam, H_star, H_obs, index, resid, status,
                           [s.market_id for s in states], U.copy())


def kkt_report(solution: PlannerSolution, states: list[MarketStateAtT], coeffs: SurrogateCoefficients) -> dict:
    A, U, V = _arrays(states)
    u = np.asarray(solution.allocation, float)
    total = float(U.sum())
    g = marginal_hires_du(coeffs, A, u, V)
    interior = u > 1e-12 * total
    lam = solution.multiplier
    return {
        "multiplier": lam,
        "marginals": g.tolist(),
        "max_interior_deviation": float(np.max(np.abs(g[interior] - lam), initial=0.0)),
        "corner_violation": float(np.max(np.maximum(g[~interior] - lam, 0.0), initial=0.0)),
        "feasibility_gap": abs(float(u.sum()) - total) / total,
        "min_allocation": float(u.min()),
        "objective": surrogate_total(coeffs, A, u, V),
        "status": solution.status,
    }


def _scaled_like(panel: MarketPanel, coeffs: SurrogateCoefficients) -> MarketPanel:
    if not panel.is_scaled:
        return apply_scale(panel, coeffs.scale)
    if all(np.isclose(panel.scale[k], coeffs.scale[k], rtol=1e-12) for k in ("H", "U", "V")):
        return panel
    raise ValueError("panel scale does not match the scale the surrogate was fit on")


def period_states(panel: MarketPanel, A: np.ndarray) -> list[tuple[int, list[MarketStateAtT] | None, list[str]]]:
    """Per period: (period, states or None when a market is missing, market ids present)."""
    A = np.asarray(A, float)
    periods = panel.periods
    order = np.lexsort((panel.market_ids, periods))
    cuts = np.flatnonzero(np.diff(periods[order])) + 1
    ids, U, V = panel.market_ids, panel.U, panel.V
    L = len(panel.markets)
    out = []
    for idx in np.split(order, cuts):
        names = [str(m) for m in ids[idx]]
        states = None
        if len(idx) == L:
            states = [MarketStateAtT(m, float(a), float(u), float(v))
                      for m, a, u, v in zip(names, A[idx], U[idx], V[idx])]
        out.append((int(periods[idx[0]]), states, names))
    return out


def mismatch_series(panel: MarketPanel, A: np.ndarray, coeffs: SurrogateCoefficients, seed: int = 0) -> list[PlannerSolution]:
    """One planner solve per period.

    ``A`` is aligned with the panel rows. Periods in which some market is
    not observed are returned with status ``skipped_missing_market``.
    H_obs and H_star are reported in the panel's original hires units.
    """
    scaled = _scaled_like(panel, coeffs)
    hs = coeffs.scale["H"]
    out = []
    for period, states, names in period_states(scaled, A):
        if states is None:
            n = len(names)
            out.append(PlannerSolution(np.full(n, np.nan), np.nan, np.nan, np.nan, np.nan, np.nan,
                                       "skipped_missing_market", names, np.full(n, np.nan), period))
            continue
        sol = planner_allocate(states, coeffs, seed)
        sol.period = period
        sol.H_star *= hs
        sol.H_obs *= hs
        out.append(sol)
    return out


def mismatch_frame(solutions: list[PlannerSolution]) -> pd.DataFrame:
    return pd.DataFrame({
        "period": [s.period for s in solutions],
        "index": [s.index for s in solutions],
        "H_obs": [s.H_obs for s in solutions],
        "H_star": [s.H_star for s in solutions],
        "status": [s.status for s in solutions],
        "kkt_residual": [s.kkt_residual for s in solutions],
    })


def allocation_frame(solutions: list[PlannerSolution], scale_U: float = 1.0) -> pd.DataFrame:
    rows = []
    for s in solutions:
        for m, uo, us in zip(s.market_ids, s.U_obs, s.allocation):
            rows.append({"period": s.period, "market_id": m, "U_obs": uo * scale_U, "U_star": us * scale_U})
    return pd.DataFrame(rows, columns=["period", "market_id", "U_obs", "U_star"])


def cd_allocation(states: list[MarketStateAtT], sigma: float, heterogeneous_A: bool = False) -> np.ndarray:
    """Planner optimum for m = A u^sigma v^(1 - sigma): u_l proportional to A_l^(1/(1-sigma)) V_l."""
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    A, U, V = _arrays(states)
    if not heterogeneous_A:
        A = np.ones_like(A)
    # log space: A^(1/(1-sigma)) under/overflows as sigma approaches 1
    lw = np.log(A) / (1.0 - sigma) + np.log(V)
    w = np.exp(lw - lw.max())
    return U.sum() * w / w.sum()


def cd_mismatch_index(states: list[MarketStateAtT], sigma: float, heterogeneous_A: bool = False) -> float:
    """1 - sum m(u_obs) / sum m(u*) under a Cobb-Douglas matching function.

    With ``heterogeneous_A=False`` every market gets A = 1, the usual
    baseline that ignores efficiency differences.
    """
    ustar = cd_allocation(states, sigma, heterogeneous_A)
    A, U, V = _arrays(states)
    if not heterogeneous_A:
        A = np.ones_like(A)

    def total(u):
        return float(np.sum(A * u ** sigma * V ** (1.0 - sigma)))

    return 1.0 - total(U) / total(ustar)
