"""Kernel estimate of G(H | U, V), tracing of F(A | U) and efficiency recovery.

All functions expect a panel on mean-one scale (see ``normalize_scales``);
the bandwidth is expressed in those units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .data import BasePoint, MarketPanel, normalize_scales, select_base

LOG_MIN_MASS = np.log(1e-12)
_CHUNK = 2048
# an observation tied with the query hires counts as half below (mid-distribution CDF);
# this keeps each point's own percentile unbiased when G is evaluated at H_t
TIE_WEIGHT = 0.5


class NoLocalSupportError(ArithmeticError):
    """Total kernel mass at the query point is below 1e-12."""

    def __init__(self, u: float, v: float):
        super().__init__(f"no local support at (u={u:.6g}, v={v:.6g})")
        self.u = u
        self.v = v


class TracingError(ArithmeticError):
    pass


def default_a_grid(n: int = 201, lo: float = 1 / 16, hi: float = 16.0) -> np.ndarray:
    grid = np.geomspace(lo, hi, n)
    # pin the base multiplier exactly when it falls on the grid
    mid = np.argmin(np.abs(np.log(grid)))
    if abs(np.log(grid[mid])) < 1e-9:
        grid[mid] = 1.0
    return grid


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float = 0.01
    cdf_grid_size: int = 512
    a_grid: np.ndarray = field(default_factory=default_a_grid)
    u_grid_size: int = 64

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.cdf_grid_size < 2 or self.u_grid_size < 2:
            raise ValueError("grid sizes must be at least 2")
        a = np.asarray(self.a_grid, dtype=float)
        if a.ndim != 1 or a.size < 2 or np.any(a <= 0) or np.any(np.diff(a) <= 0):
            raise ValueError("a_grid must be positive and strictly increasing")
        object.__setattr__(self, "a_grid", a)


def _log_weights(U: np.ndarray, V: np.ndarray, uq: np.ndarray, vq: np.ndarray, bw: float) -> np.ndarray:
    """Log of a product-normal kernel, shape (n_query, n_obs)."""
    du = (U[None, :] - uq[:, None]) / bw
    dv = (V[None, :] - vq[:, None]) / bw
    return -0.5 * (du * du + dv * dv) - np.log(2.0 * np.pi * bw * bw)


def _cdf_many(H, U, V, hq, uq, vq, bw):
    """Vectorized kernel CDF. Returns (values, supported) arrays."""
    hq, uq, vq = np.broadcast_arrays(np.asarray(hq, float), np.asarray(uq, float), np.asarray(vq, float))
    shape = hq.shape
    hq, uq, vq = hq.ravel(), uq.ravel(), vq.ravel()
    out = np.empty(hq.size)
    ok = np.empty(hq.size, dtype=bool)
    for s in range(0, hq.size, _CHUNK):
        sl = slice(s, s + _CHUNK)
        lw = _log_weights(U, V, uq[sl], vq[sl], bw)
        top = lw.max(axis=1)
        w = np.exp(lw - top[:, None])
        mass = w.sum(axis=1)
        below = (H[None, :] < hq[sl, None]) + TIE_WEIGHT * (H[None, :] == hq[sl, None])
        out[sl] = (w * below).sum(axis=1) / mass
        ok[sl] = top + np.log(mass) >= LOG_MIN_MASS
    return out.reshape(shape), ok.reshape(shape)


def conditional_cdf(panel: MarketPanel, h: float, u: float, v: float, cfg: KernelConfig = KernelConfig()) -> float:
    """Kernel-weighted share of observations with hires below ``h`` near (u, v)."""
    val, ok = _cdf_many(panel.H, panel.U, panel.V, h, u, v, cfg.bandwidth)
    if not ok:
        raise NoLocalSupportError(u, v)
    return float(min(max(val, 0.0), 1.0))


def _h_grid(panel: MarketPanel, cfg: KernelConfig) -> np.ndarray:
    return np.linspace(panel.H.min(), panel.H.max(), cfg.cdf_grid_size)


def _quantile_on_grid(grid: np.ndarray, cdf: np.ndarray, p: float) -> float:
    k = int(np.searchsorted(cdf, p, side="left"))
    if k == 0:
        return float(grid[0])
    if k >= grid.size:
        return float(grid[-1])
    lo, hi = cdf[k - 1], cdf[k]
    if hi <= lo:
        return float(grid[k])
    return float(grid[k - 1] + (p - lo) / (hi - lo) * (grid[k] - grid[k - 1]))


def conditional_quantile(panel: MarketPanel, p: float, u: float, v: float, cfg: KernelConfig = KernelConfig()) -> float:
    """Generalized inverse of ``conditional_cdf`` in h on the hires grid.

    The CDF is evaluated on ``cfg.cdf_grid_size`` points spanning the observed
    hires range; the answer is linearly interpolated between the last grid
    point below ``p`` and the first at or above it.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability outside [0, 1]: {p}")
    grid = _h_grid(panel, cfg)
    cdf, ok = _cdf_many(panel.H, panel.U, panel.V, grid, u, v, cfg.bandwidth)
    if not ok[0]:
        raise NoLocalSupportError(u, v)
    cdf = np.maximum.accumulate(np.clip(cdf, 0.0, 1.0))
    return _quantile_on_grid(grid, cdf, p)


@dataclass
class EfficiencyDistribution:
    """F(a | u) on ``a_grid`` x ``u_grid``; NaN marks cells without kernel support."""

    base: BasePoint
    u_grid: np.ndarray
    a_grid: np.ndarray
    F: np.ndarray

    def column(self, u: float) -> tuple[np.ndarray, np.ndarray]:
        """F(. | u) by linear interpolation between neighbouring u columns.

        Returns (a values, F values) restricted to cells supported in both
        neighbouring columns.
        """
        ug = self.u_grid
        k = int(np.clip(np.searchsorted(ug, u, side="right") - 1, 0, ug.size - 2))
        w = float(np.clip((u - ug[k]) / (ug[k + 1] - ug[k]), 0.0, 1.0))
        if w == 0.0:
            col = self.F[:, k]
        elif w == 1.0:
            col = self.F[:, k + 1]
        else:
            col = (1.0 - w) * self.F[:, k] + w * self.F[:, k + 1]
        keep = np.isfinite(col)
        return self.a_grid[keep], col[keep]

    def cdf(self, a: float, u: float) -> float:
        ag, col = self.column(u)
        if ag.size == 0:
            raise TracingError(f"no traced cells at u={u:.6g}")
        return float(np.interp(np.log(a), np.log(ag), col))

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "u_grid": self.u_grid.tolist(),
            "a_grid": self.a_grid.tolist(),
            "F": [None if not np.isfinite(x) else float(x) for x in self.F.ravel(order="C")],
            "shape": list(self.F.shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EfficiencyDistribution":
        F = np.array([np.nan if x is None else x for x in d["F"]], dtype=float).reshape(d["shape"])
        b = d["base"]
        base = BasePoint(str(b["market_id"]), int(b["period"]), b["H0"], b["U0"], b["V0"], b.get("A0", 1.0))
        return cls(base, np.asarray(d["u_grid"]), np.asarray(d["a_grid"]), F)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")


def rearrange_column(values: np.ndarray) -> np.ndarray:
    """Monotone rearrangement of a column: sort the finite entries in place order."""
    out = values.copy()
    keep = np.isfinite(out)
    out[keep] = np.sort(out[keep])
    return out


def _u_grid(panel: MarketPanel, base: BasePoint, n: int) -> np.ndarray:
    grid = np.linspace(panel.U.min(), panel.U.max(), n)
    return np.unique(np.append(grid, base.U0))


def trace_efficiency_distribution(panel: MarketPanel, base: BasePoint, cfg: KernelConfig = KernelConfig(),
                                  u_grid: np.ndarray | None = None) -> EfficiencyDistribution:
    """Trace F(a | u) by CRS rescaling of the base observation.

    Cell (a, u) evaluates G(c H0 | u, c V0) with c = a u / (A0 U0): under
    constant returns the event {H < c H0} at (u, c V0) is {A < a}.
    Unsupported cells are NaN. Unsupported cells outside the supported
    a-span of a column are treated as the edge of the traced range; a
    column fails only if it has fewer than two supported cells or more
    than half of the cells inside its span lack support.
    """
    ug = _u_grid(panel, base, cfg.u_grid_size) if u_grid is None else np.asarray(u_grid, float)
    ag = cfg.a_grid
    c = ag[:, None] * ug[None, :] / (base.A0 * base.U0)
    uq = np.broadcast_to(ug[None, :], c.shape)
    F, ok = _cdf_many(panel.H, panel.U, panel.V, c * base.H0, uq, c * base.V0, cfg.bandwidth)
    F = np.where(ok, np.clip(F, 0.0, 1.0), np.nan)
    for j in range(ug.size):
        idx = np.flatnonzero(ok[:, j])
        if idx.size < 2:
            raise TracingError(f"u-column {ug[j]:.6g} has fewer than two supported cells")
        span = ok[idx[0]:idx[-1] + 1, j]
        if (~span).sum() > 0.5 * span.size:
            raise TracingError(f"u-column {ug[j]:.6g}: more than half of traced cells lack support")
        F[:, j] = rearrange_column(F[:, j])
    return EfficiencyDistribution(base, ug, ag.copy(), F)


def monotone_inverse(p: float, F: np.ndarray, x: np.ndarray) -> tuple[float, str]:
    """Invert a nondecreasing tabulated function; flat runs at p map to their midpoint.

    Returns (x value, flag) with flag ``clipped_low``/``clipped_high`` when p
    lies outside the tabulated range.
    """
    if p < F[0]:
        return float(x[0]), "clipped_low"
    if p > F[-1]:
        return float(x[-1]), "clipped_high"
    i = int(np.searchsorted(F, p, side="left"))
    j = int(np.searchsorted(F, p, side="right"))
    if j > i:
        return 0.5 * float(x[i] + x[j - 1]), ""
    lo, hi = F[i - 1], F[i]
    return float(x[i - 1] + (p - lo) / (hi - lo) * (x[i] - x[i - 1])), ""


@dataclass
class EfficiencySeries:
    market_id: np.ndarray
    period: np.ndarray
    A: np.ndarray
    percentile: np.ndarray
    flag: np.ndarray

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"market_id": self.market_id, "period": self.period, "A": self.A,
                             "percentile": self.percentile, "flag": self.flag})

    def save(self, path: str | Path) -> None:
        self.frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def load(cls, path: str | Path) -> "EfficiencySeries":
        df = pd.read_csv(path, dtype={"market_id": str, "flag": str}, keep_default_na=False, float_precision="round_trip")
        return cls.from_frame(df)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "EfficiencySeries":
        missing = [c for c in ("market_id", "period", "A") if c not in df.columns]
        if missing:
            from .data import SchemaError
            raise SchemaError(f"efficiency file missing column: {missing[0]}")
        n = len(df)
        pct = df["percentile"].to_numpy(float) if "percentile" in df else np.full(n, np.nan)
        flag = df["flag"].astype(str).to_numpy() if "flag" in df else np.full(n, "", dtype=object)
        return cls(df["market_id"].astype(str).to_numpy(), df["period"].to_numpy(np.int64),
                   df["A"].to_numpy(float), pct, flag)

    def aligned(self, panel: MarketPanel) -> np.ndarray:
        """A values in panel row order; raises if any panel row is not covered."""
        key = pd.MultiIndex.from_arrays([self.market_id.astype(str), self.period])
        s = pd.Series(self.A, index=key)
        want = pd.MultiIndex.from_arrays([panel.market_ids.astype(str), panel.periods])
        out = s.reindex(want).to_numpy()
        if np.isnan(out).any():
            raise ValueError("efficiency series does not cover every panel observation")
        return out


def recover_efficiency(panel: MarketPanel, dist: EfficiencyDistribution,
                       cfg: KernelConfig = KernelConfig()) -> EfficiencySeries:
    """A_t = F^{-1}(G(H_t | U_t, V_t) | U_t), interpolated in log a."""
    H, U, V = panel.H, panel.U, panel.V
    p, ok = _cdf_many(H, U, V, H, U, V, cfg.bandwidth)
    A = np.empty(len(panel))
    flags = np.empty(len(panel), dtype=object)
    for t in range(len(panel)):
        ag, col = dist.column(U[t])
        if ag.size < 2:
            A[t], flags[t] = np.nan, "unsupported"
            continue
        la, flags[t] = monotone_inverse(p[t], col, np.log(ag))
        A[t] = np.exp(la)
    b = dist.base
    hit = np.flatnonzero((panel.market_ids == b.market_id) & (panel.periods == b.period))
    for i in hit:
        A[i] = b.A0
        flags[i] = "base"
    return EfficiencySeries(panel.market_ids.copy(), panel.periods.copy(), A, np.clip(p, 0, 1), flags)


def evaluate_matching_function(panel: MarketPanel, dist: EfficiencyDistribution, a: float, u: float, v: float,
                               cfg: KernelConfig = KernelConfig()) -> float:
    """m evaluated through G^{-1}(F(a | u) | u, v)."""
    return conditional_quantile(panel, dist.cdf(a, u), u, v, cfg)


@dataclass
class EfficiencyEstimate:
    series: EfficiencySeries
    distribution: EfficiencyDistribution
    panel: MarketPanel


def estimate_efficiency(panel: MarketPanel, base="first_period", cfg: KernelConfig = KernelConfig(),
                        scaling: str = "mean_one", min_obs: int | None = 30) -> EfficiencyEstimate:
    """Full pipeline: scale, pick the base, trace F(A | U) and invert."""
    if min_obs:
        panel.check_estimation_floor(min_obs)
    scaled = normalize_scales(panel, scaling)
    b = select_base(scaled, base)
    dist = trace_efficiency_distribution(scaled, b, cfg)
    return EfficiencyEstimate(recover_efficiency(scaled, dist, cfg), dist, scaled)
