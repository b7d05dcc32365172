"""Panel data model, ingestion, scaling and base-point selection."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

REQUIRED_COLUMNS = ("market_id", "period", "hires", "unemployed", "vacancies")
MIN_OBS_PER_MARKET = 30


class SchemaError(ValueError):
    """Input file is missing a required column or cannot be parsed."""


class ValidationError(ValueError):
    """Input rows violate the panel invariants."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class BaseLookupError(KeyError):
    """Requested (market, period) is not in the panel."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class HiresAboveStocksWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Observation:
    market_id: str
    period: int
    hires: float
    unemployed: float
    vacancies: float


@dataclass(frozen=True)
class MarketPanel:
    """Immutable (market, period, H, U, V) panel sorted by (market_id, period).

    ``scale`` holds the divisors applied to hires/unemployed/vacancies; the
    identity record is ``{"H": 1, "U": 1, "V": 1}``.
    """

    frame: pd.DataFrame
    scale: dict = field(default_factory=lambda: {"H": 1.0, "U": 1.0, "V": 1.0})

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def H(self) -> np.ndarray:
        return self.frame["hires"].to_numpy()

    @property
    def U(self) -> np.ndarray:
        return self.frame["unemployed"].to_numpy()

    @property
    def V(self) -> np.ndarray:
        return self.frame["vacancies"].to_numpy()

    @property
    def market_ids(self) -> np.ndarray:
        return self.frame["market_id"].to_numpy()

    @property
    def periods(self) -> np.ndarray:
        return self.frame["period"].to_numpy()

    @property
    def markets(self) -> list[str]:
        return sorted(self.frame["market_id"].unique().tolist())

    @property
    def is_scaled(self) -> bool:
        return any(v != 1.0 for v in self.scale.values())

    def observations(self) -> Iterator[Observation]:
        for row in self.frame.itertuples(index=False):
            yield Observation(row.market_id, int(row.period), float(row.hires),
                              float(row.unemployed), float(row.vacancies))

    def index_of(self, market_id: str, period: int) -> int:
        hit = np.flatnonzero((self.market_ids == str(market_id)) & (self.periods == int(period)))
        if hit.size == 0:
            raise BaseLookupError(f"no observation for market {market_id!r}, period {period}")
        return int(hit[0])

    def check_estimation_floor(self, floor: int = MIN_OBS_PER_MARKET) -> None:
        counts = self.frame.groupby("market_id").size()
        short = counts[counts < floor]
        if len(short):
            raise ValidationError(
                f"markets with fewer than {floor} observations: {', '.join(map(str, short.index))}")

    def scale_json(self) -> str:
        return json.dumps({"scale": {k: float(v) for k, v in self.scale.items()}})


def panel_from_frame(df: pd.DataFrame) -> MarketPanel:
    """Validate a raw frame and build a sorted panel with identity scaling."""
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"missing column: {missing[0]}")
    out = df.copy()
    out["market_id"] = out["market_id"].astype(str)
    for col in ("period", "hires", "unemployed", "vacancies"):
        parsed = pd.to_numeric(out[col], errors="coerce")
        bad = np.flatnonzero(parsed.isna().to_numpy())
        if bad.size:
            raise SchemaError(f"column {col!r} does not parse as numeric at row {int(bad[0]) + 1}")
        out[col] = parsed
    if not np.all(out["period"] == np.round(out["period"])):
        raise SchemaError("column 'period' must hold integers")
    out["period"] = out["period"].astype(np.int64)
    for col in ("hires", "unemployed", "vacancies"):
        out[col] = out[col].astype(float)

    # row numbers in messages are 1-based data rows (header excluded)
    for col, label in (("unemployed", "U"), ("vacancies", "V")):
        bad = np.flatnonzero(out[col].to_numpy() <= 0)
        if bad.size:
            r = int(bad[0]) + 1
            raise ValidationError(f"row {r}: non-positive {label} ({out[col].iloc[bad[0]]})", row=r)
    bad = np.flatnonzero(out["hires"].to_numpy() < 0)
    if bad.size:
        r = int(bad[0]) + 1
        raise ValidationError(f"row {r}: negative hires", row=r)
    dup = out.duplicated(subset=["market_id", "period"], keep="first").to_numpy()
    if dup.any():
        r = int(np.flatnonzero(dup)[0]) + 1
        raise ValidationError(
            f"row {r}: duplicate key ({out['market_id'].iloc[r - 1]}, {out['period'].iloc[r - 1]})", row=r)

    over = out["hires"] > out["unemployed"] + out["vacancies"]
    if over.any():
        warnings.warn(f"{int(over.sum())} rows have hires above U + V", HiresAboveStocksWarning, stacklevel=2)

    keep = list(REQUIRED_COLUMNS) + [c for c in ("date",) if c in out.columns]
    out = out[keep].sort_values(["market_id", "period"], kind="mergesort").reset_index(drop=True)
    return MarketPanel(out)


def load_panel(path: str | Path, format: str | None = None) -> MarketPanel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"panel file does not exist: {path}")
    fmt = format or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        try:
            df = pd.read_csv(path, dtype={"market_id": str, "date": str}, encoding="utf-8", float_precision="round_trip")
        except (pd.errors.ParserError, UnicodeDecodeError) as exc:
            raise SchemaError(f"cannot parse CSV {path}: {exc}") from exc
    elif fmt == "json":
        try:
            records = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"cannot parse JSON {path}: {exc}") from exc
        if not isinstance(records, list):
            raise SchemaError("JSON panel must be an array of objects")
        df = pd.DataFrame.from_records(records)
    else:
        raise SchemaError(f"unsupported format: {fmt}")
    return panel_from_frame(df)


def _json_scalar(x):
    return x.item() if hasattr(x, "item") else str(x)


def write_panel(panel: MarketPanel, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".json":
        # json.dumps writes shortest round-trip floats; DataFrame.to_json would truncate to 10 digits
        path.write_text(json.dumps(panel.frame.to_dict(orient="records"), default=_json_scalar), encoding="utf-8")
    else:
        panel.frame.to_csv(path, index=False, float_format="%.17g")


def normalize_scales(panel: MarketPanel, policy: str = "mean_one") -> MarketPanel:
    """Divide H, U and V by their pooled means (``mean_one``) or do nothing (``none``).

    Divisors compose with any scale already recorded on the panel.
    """
    if policy == "none":
        return panel
    if policy != "mean_one":
        raise ValueError(f"unknown scaling policy: {policy}")
    df = panel.frame.copy()
    scale = dict(panel.scale)
    for col, key in (("hires", "H"), ("unemployed", "U"), ("vacancies", "V")):
        m = float(np.mean(df[col].to_numpy()))
        if m <= 0:
            raise ValidationError(f"pooled mean of {col} is not positive")
        df[col] = df[col].to_numpy() / m
        scale[key] = scale[key] * m
    return MarketPanel(df, scale)


def denormalize(panel: MarketPanel) -> MarketPanel:
    df = panel.frame.copy()
    for col, key in (("hires", "H"), ("unemployed", "U"), ("vacancies", "V")):
        df[col] = df[col].to_numpy() * panel.scale[key]
    return MarketPanel(df)


def apply_scale(panel: MarketPanel, scale: dict) -> MarketPanel:
    """Rescale a raw panel with an externally recorded scale (e.g. from a fit)."""
    df = panel.frame.copy()
    for col, key in (("hires", "H"), ("unemployed", "U"), ("vacancies", "V")):
        df[col] = df[col].to_numpy() / float(scale[key])
    return MarketPanel(df, {k: float(scale[k]) for k in ("H", "U", "V")})


@dataclass(frozen=True)
class BasePoint:
    market_id: str
    period: int
    H0: float
    U0: float
    V0: float
    A0: float = 1.0

    def to_dict(self) -> dict:
        return {"market_id": self.market_id, "period": self.period,
                "H0": self.H0, "U0": self.U0, "V0": self.V0, "A0": self.A0}


def select_base(panel: MarketPanel, which: str | tuple = "first_period") -> BasePoint:
    """Pick the normalization observation.

    ``which`` is ``"first_period"`` (earliest period; ties go to the smallest
    market id) or ``(market_id, period)``.
    """
    if which == "first_period":
        order = np.lexsort((panel.market_ids, panel.periods))
        i = int(order[0])
    else:
        market_id, period = which
        i = panel.index_of(str(market_id), int(period))
    H0, U0, V0 = panel.H[i], panel.U[i], panel.V[i]
    if H0 <= 0:
        raise ValidationError(f"base observation has non-positive hires ({H0})")
    return BasePoint(str(panel.market_ids[i]), int(panel.periods[i]), float(H0), float(U0), float(V0))


def parse_base(text: str) -> str | tuple:
    """CLI form: ``first`` or ``MARKET:PERIOD``."""
    if text in ("first", "first_period"):
        return "first_period"
    market, sep, period = text.rpartition(":")
    if not sep:
        raise ValueError(f"base must be 'first' or MARKET:PERIOD, got {text!r}")
    return market, int(period)
