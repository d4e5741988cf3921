"""Probabilistic forecast scoring: quantile loss, WQL, MASE and cross-model aggregation."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

DEFAULT_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))

REPORT_COLUMNS = ["dataset_id", "model_id", "variant", "wql", "mase", "n_series_scored", "seed"]


class UndefinedMetricError(ValueError):
    """The metric's denominator vanishes for this input."""


class AggregationError(ValueError):
    pass


@dataclass
class QuantileForecast:
    levels: np.ndarray
    values: np.ndarray  # (levels, horizon)


@dataclass
class MetricReport:
    dataset_id: str
    model_id: str
    wql: float
    mase: float
    variant: str = ""
    n_series_scored: int = 0
    seed: int = 0
    per_series_mase: list[float] = field(default_factory=list)

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in REPORT_COLUMNS}


def quantile_loss(q, x, alpha: float):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"quantile level {alpha} outside (0, 1)")
    q = np.asarray(q, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > q, alpha * (x - q), (1.0 - alpha) * (q - x))
    return float(out) if out.ndim == 0 else out


def quantiles_from_samples(samples, levels=DEFAULT_LEVELS) -> np.ndarray:
    """Per-step empirical quantiles (linear interpolation), shape (levels, horizon)."""
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 1:
        s = s[None]
    if s.shape[0] < 1:
        raise ValueError("need at least one sample path")
    q = np.quantile(s, np.asarray(levels), axis=0, method="linear")
    # interpolation can break ties by one ulp; enforce the ordering it promises
    return np.maximum.accumulate(q, axis=0)


def wql_per_level(quantiles: list[np.ndarray], actuals: list[np.ndarray], levels=DEFAULT_LEVELS) -> np.ndarray:
    """Per-level WQL with QL and |x| pooled across all series and steps."""
    denom = float(sum(np.abs(np.asarray(a, dtype=np.float64)).sum() for a in actuals))
    if denom <= 0.0:
        raise UndefinedMetricError("weighted quantile loss undefined for all-zero actuals")
    out = np.empty(len(levels))
    for j, alpha in enumerate(levels):
        num = 0.0
        for q, a in zip(quantiles, actuals):
            num += float(np.sum(quantile_loss(np.asarray(q)[j], a, alpha)))
        out[j] = 2.0 * num / denom
    return out


def wql(quantiles: list[np.ndarray], actuals: list[np.ndarray], levels=DEFAULT_LEVELS) -> float:
    """Mean over levels of ``2 * sum QL / sum |x|``.

    ``quantiles[i]`` is the (levels, horizon) matrix of series ``i``.
    """
    if len(quantiles) != len(actuals):
        raise ValueError("one quantile matrix per actual series is required")
    for q, a in zip(quantiles, actuals):
        if np.asarray(q).shape != (len(levels), np.asarray(a).shape[-1]):
            raise ValueError(f"quantile shape {np.asarray(q).shape} does not match levels x horizon")
    return float(np.mean(wql_per_level(quantiles, actuals, levels)))


def mase(pred, actual, context, season: int) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    context = np.asarray(context, dtype=np.float64)
    C, H = len(context), len(actual)
    if not (C > season >= 1):
        raise ValueError(f"need context length {C} > season {season} >= 1")
    if pred.shape != actual.shape:
        raise ValueError("prediction and actual must have the same horizon")
    denom = float(np.abs(context[: C - season] - context[season:]).sum())
    if denom <= 0.0:
        raise UndefinedMetricError("seasonal naive error of the context is zero")
    return (C - season) / H * float(np.abs(pred - actual).sum()) / denom


_SEASONS = {"D": 7, "H": 24, "15T": 96, "15MIN": 96}


def seasonality_for_frequency(freq: str) -> int:
    tag = freq.strip().upper()
    if tag and tag[0].isdigit():
        digits = ""
        while tag and tag[0].isdigit():
            digits, tag = digits + tag[0], tag[1:]
        if digits != "1":
            tag = digits + tag
    season = _SEASONS.get(tag)
    if season is None:
        log.warning("unknown frequency %r; using seasonality 1", freq)
        return 1
    return season


def agg_relative_score(scores, baseline) -> float:
    """Geometric mean of ``score / baseline`` over entries where both are defined."""
    s = np.asarray(scores, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if s.shape != b.shape:
        raise AggregationError("scores and baseline must cover the same datasets")
    keep = ~(np.isnan(s) | np.isnan(b))
    s, b = s[keep], b[keep]
    if s.size == 0:
        raise AggregationError("no dataset with both scores defined")
    if np.any(s <= 0) or np.any(b <= 0):
        raise AggregationError("relative scores need strictly positive entries")
    return float(np.exp(np.mean(np.log(s / b))))


def average_rank(scores_by_model) -> np.ndarray:
    """Mean per-dataset rank of each model (lower score is better, ties share the average rank).

    ``scores_by_model`` is a (datasets, models) matrix; NaN marks a missing
    entry, which is skipped and the remaining models ranked among themselves.
    """
    m = np.asarray(scores_by_model, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] < 2 or m.shape[0] < 1:
        raise ValueError("need at least one dataset and two models")
    totals = np.zeros(m.shape[1])
    counts = np.zeros(m.shape[1])
    for row in m:
        ok = ~np.isnan(row)
        if not ok.any():
            continue
        totals[ok] += rankdata(row[ok], method="average")
        counts[ok] += 1
    with np.errstate(invalid="ignore"):
        return totals / counts


def write_reports(path: Path, reports: list[MetricReport], append: bool = False, provenance: dict | None = None) -> None:
    """Write report rows as CSV. ``provenance`` becomes a leading ``# key=value`` comment line."""
    path = Path(path)
    new = not path.exists() or not append
    with path.open("a" if append else "w", newline="") as fh:
        if new and provenance:
            fh.write("# " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)) + "\n")
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        if new:
            w.writeheader()
        for r in reports:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})


def read_reports(path: Path) -> list[MetricReport]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
        return [
            MetricReport(
                dataset_id=row["dataset_id"],
                model_id=row["model_id"],
                variant=row["variant"],
                wql=float(row["wql"]),
                mase=float(row["mase"]),
                n_series_scored=int(row["n_series_scored"]),
                seed=int(row["seed"]),
            )
            for row in csv.DictReader(lines)
        ]
