"""Long/short backtest of regime predictions and the associated metric
and classification tables.

Conventions: a position chosen on day t is held during day t+1 (one-day
execution lag); annualization uses 365 calendar days; risk-free rate is
zero; drawdown is measured on the cumulative sum of strategy log returns;
turnover counts a full +1/-1 flip as one round-trip unit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MetricTable",
    "ConfusionMatrix",
    "BacktestResult",
    "positions_from_regimes",
    "strategy_returns",
    "compute_metrics",
    "confusion_and_scores",
    "annualize_mean",
    "annualize_std",
    "sharpe_ratio",
    "annual_turnover",
    "return_on_volume",
    "regression_alpha",
    "max_drawdown",
]

DAYS_PER_YEAR = 365


@dataclass
class MetricTable:
    """Annualized performance metrics; entries are None with a note when a
    denominator degenerates."""

    mean_return: float
    std: float | None
    sharpe: float | None
    max_drawdown: float
    sortino: float | None
    mean_daily_turnover: float
    annual_turnover: float
    return_on_volume: float | None
    beta: float | None
    alpha: float | None
    notes: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "mean_return": self.mean_return,
            "std": self.std,
            "sharpe": self.sharpe,
            "max_drawdown": self.max_drawdown,
            "sortino": self.sortino,
            "mean_daily_turnover": self.mean_daily_turnover,
            "annual_turnover": self.annual_turnover,
            "return_on_volume": self.return_on_volume,
            "beta": self.beta,
            "alpha": self.alpha,
            "notes": dict(sorted(self.notes.items())),
        }


@dataclass
class ConfusionMatrix:
    """counts[i, j] = number of samples predicted i with true class j."""

    counts: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float


@dataclass
class BacktestResult:
    positions: np.ndarray
    strat_returns: np.ndarray
    asset_returns: np.ndarray
    metrics: MetricTable
    confusion: ConfusionMatrix
    timestamps: list = field(default_factory=list)


def positions_from_regimes(regimes: np.ndarray) -> np.ndarray:
    """Map bear (0) to -1 and bull (1) to +1."""
    regimes = np.asarray(regimes)
    bad = set(np.unique(regimes)) - {0, 1}
    if bad:
        raise ValueError(f"unknown regime indices {sorted(bad)}; expected 0/1")
    return np.where(regimes == 1, 1.0, -1.0)


def strategy_returns(positions: np.ndarray, asset_returns: np.ndarray) -> np.ndarray:
    """Daily strategy returns with a one-day lag between signal and
    execution: the return on day t accrues to the position chosen on day
    t-1, and the first day (no prior position) earns zero.
    """
    positions = np.asarray(positions, dtype=np.float64)
    asset_returns = np.asarray(asset_returns, dtype=np.float64)
    if positions.shape != asset_returns.shape:
        raise ValueError(f"positions {positions.shape} vs returns "
                         f"{asset_returns.shape} misaligned")
    out = np.zeros_like(asset_returns)
    out[1:] = positions[:-1] * asset_returns[1:]
    return out


def annualize_mean(daily_mean: float) -> float:
    return daily_mean * DAYS_PER_YEAR


def annualize_std(daily_std: float) -> float:
    return daily_std * math.sqrt(DAYS_PER_YEAR)


def sharpe_ratio(mu: float, sigma: float) -> float:
    return mu / sigma


def annual_turnover(mean_daily_turnover: float) -> float:
    return mean_daily_turnover * DAYS_PER_YEAR


def return_on_volume(mu: float, annual_to: float) -> float:
    return mu / annual_to


def regression_alpha(mu: float, beta: float, asset_mu: float) -> float:
    return mu - beta * asset_mu


def max_drawdown(strat: np.ndarray) -> float:
    """Most negative gap between the cumulative log-return curve and its
    running maximum, anchored at zero before the first day."""
    cum = np.concatenate(([0.0], np.cumsum(strat)))
    return float(np.min(cum - np.maximum.accumulate(cum)))


def compute_metrics(strat: np.ndarray, asset: np.ndarray,
                    positions: np.ndarray | None = None) -> MetricTable:
    """Metric table over aligned daily strategy and asset return series.

    Turnover comes from the positions when given, otherwise we recover
    position changes from sign flips of the strategy series against the
    asset. Standard deviations use the n-1 normalization.
    """
    strat = np.asarray(strat, dtype=np.float64)
    asset = np.asarray(asset, dtype=np.float64)
    if strat.shape != asset.shape:
        raise ValueError("strategy and asset series misaligned")
    n = len(strat)
    if n < 30:
        warnings.warn(f"only {n} observations; metrics are unstable below 30",
                      stacklevel=2)
    notes: dict = {}

    mu = annualize_mean(strat.mean())
    daily_std = strat.std(ddof=1) if n > 1 else 0.0
    if daily_std > 0.0:
        sigma = annualize_std(daily_std)
        sharpe = sharpe_ratio(mu, sigma)
    else:
        sigma = sharpe = None
        notes["sharpe"] = "zero strategy variance"

    downside = strat[strat < 0.0]
    if len(downside) >= 2 and downside.std(ddof=1) > 0.0:
        sortino = mu / annualize_std(downside.std(ddof=1))
    else:
        sortino = None
        notes["sortino"] = "fewer than two negative days"

    mdd = max_drawdown(strat)

    if positions is not None:
        flips = np.abs(np.diff(np.asarray(positions, dtype=np.float64)))
    else:
        signs = np.sign(strat[1:]) * np.sign(asset[1:])
        flips = np.abs(np.diff(np.where(signs >= 0, 1.0, -1.0)))
    daily_to = float(flips.mean() / 2.0) if len(flips) else 0.0
    ann_to = annual_turnover(daily_to)
    if ann_to > 0.0:
        rov = return_on_volume(mu, ann_to)
    else:
        rov = None
        notes["return_on_volume"] = "zero turnover"

    var_asset = asset.var(ddof=1) if n > 1 else 0.0
    if var_asset > 0.0:
        cov = np.cov(strat, asset, ddof=1)[0, 1]
        beta = float(cov / var_asset)
        alpha = regression_alpha(mu, beta, annualize_mean(asset.mean()))
    else:
        beta = alpha = None
        notes["beta"] = "zero asset variance"

    return MetricTable(mean_return=mu, std=sigma, sharpe=sharpe,
                       max_drawdown=mdd, sortino=sortino,
                       mean_daily_turnover=daily_to, annual_turnover=ann_to,
                       return_on_volume=rov, beta=beta, alpha=alpha,
                       notes=notes)


def confusion_and_scores(predicted: np.ndarray, true: np.ndarray,
                         m: int = 2) -> ConfusionMatrix:
    """Confusion counts with per-class precision/recall/F1 and accuracy.

    counts[i, j] counts samples predicted i whose true class is j; cells
    with a zero denominator report 0.
    """
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape:
        raise ValueError("prediction/label vectors misaligned")
    for name, v in (("predicted", predicted), ("true", true)):
        if len(v) and (v.min() < 0 or v.max() >= m):
            raise ValueError(f"{name} labels outside [0, {m})")
    counts = np.zeros((m, m), dtype=np.int64)
    np.add.at(counts, (predicted, true), 1)

    precision = np.zeros(m)
    recall = np.zeros(m)
    f1 = np.zeros(m)
    for c in range(m):
        tp = counts[c, c]
        row = counts[c, :].sum()
        col = counts[:, c].sum()
        precision[c] = tp / row if row else 0.0
        recall[c] = tp / col if col else 0.0
        denom = precision[c] + recall[c]
        f1[c] = 2.0 * precision[c] * recall[c] / denom if denom else 0.0
    support = counts.sum(axis=0)
    total = counts.sum()
    accuracy = float(np.trace(counts) / total) if total else 0.0
    return ConfusionMatrix(counts=counts, precision=precision, recall=recall,
                           f1=f1, support=support, accuracy=accuracy)


def run_backtest(predicted_regimes: np.ndarray, true_labels: np.ndarray,
                 asset_returns: np.ndarray, timestamps=None) -> BacktestResult:
    """Positions, lagged strategy returns, metrics (computed over the days
    a position was live), and the classification table."""
    positions = positions_from_regimes(predicted_regimes)
    strat = strategy_returns(positions, asset_returns)
    # metrics cover the days a position was live; the T-1 position diffs
    # align one-to-one with those days
    metrics = compute_metrics(strat[1:], np.asarray(asset_returns)[1:],
                              positions=positions)
    confusion = confusion_and_scores(predicted_regimes, true_labels)
    return BacktestResult(positions=positions, strat_returns=strat,
                          asset_returns=np.asarray(asset_returns, dtype=np.float64),
                          metrics=metrics, confusion=confusion,
                          timestamps=list(timestamps) if timestamps is not None else [])
