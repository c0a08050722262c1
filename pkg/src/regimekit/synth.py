"""Synthetic OHLC generators for tests, acceptance runs, and demos.

Bars are reconstructed from a target close path and a target log high/low
spread per day, so the derived covariates of the pipeline recover the
planted signal.
"""

from __future__ import annotations

import datetime as dt
import math

import numpy as np

from .data import OhlcBar
from .msm import MsmParams, simulate

__all__ = ["bars_from_paths", "make_planted_bars", "make_msm_bars"]


def bars_from_paths(closes: np.ndarray, spreads: np.ndarray,
                    start: dt.date = dt.date(2016, 1, 1),
                    updays: np.ndarray | None = None) -> list[OhlcBar]:
    """Bars with the given close path and log high/low spreads.

    Each bar opens at the previous close; the high/low range is widened
    symmetrically (in log space) around the open/close span until it
    matches the requested spread. `updays` marks bars forced to close at
    or below the open, controlling the sign of the intraday range proxy.
    """
    closes = np.asarray(closes, dtype=np.float64)
    spreads = np.asarray(spreads, dtype=np.float64)
    n = len(closes)
    bars = []
    prev = closes[0]
    for t in range(n):
        c = closes[t]
        o = prev if t > 0 else c
        hi = max(o, c)
        lo = min(o, c)
        span = math.log(hi / lo)
        extra = max(spreads[t] - span, 0.0) / 2.0
        high = hi * math.exp(extra)
        low = lo * math.exp(-extra)
        bars.append(OhlcBar(start + dt.timedelta(days=t), o, high, low, c))
        prev = c
    return bars


def make_planted_bars(n: int = 2000, block: int = 100, seed: int = 0,
                      bull_drift: float = 0.004, bear_drift: float = -0.004,
                      bull_vol: float = 0.006, bear_vol: float = 0.012,
                      bull_spread: float = 0.015, bear_spread: float = 0.06):
    """Alternating bull/bear blocks with a strongly separated spread
    covariate. Returns (bars, block_regime) where block_regime[t] is the
    planted regime (1 = bull) of bar t.
    """
    rng = np.random.default_rng(seed)
    regime = ((np.arange(n) // block) % 2 == 0).astype(np.int64)
    drift = np.where(regime == 1, bull_drift, bear_drift)
    vol = np.where(regime == 1, bull_vol, bear_vol)
    rets = drift + vol * rng.standard_normal(n)
    closes = 100.0 * np.exp(np.cumsum(rets))
    spread_mean = np.where(regime == 1, bull_spread, bear_spread)
    spreads = np.abs(spread_mean * (1.0 + 0.15 * rng.standard_normal(n)))
    bars = bars_from_paths(closes, spreads)
    return bars, regime


def make_msm_bars(params: MsmParams, T: int, seed: int = 0,
                  covariates: np.ndarray | None = None,
                  spread_by_state: np.ndarray | None = None):
    """OHLC bars whose returns follow a Markov-switching draw.

    When `spread_by_state` is given, each state maps to a mean log
    high/low spread so regime information also shows in the covariates.
    Returns (bars, states, returns).
    """
    rng = np.random.default_rng(seed + 1)
    returns, states, _ = simulate(params, T, seed=seed, covariates=covariates)
    closes = 100.0 * np.exp(np.cumsum(returns))
    closes = np.concatenate(([100.0], closes))
    if spread_by_state is None:
        base = 2.0 * np.sqrt(params.sigma2[states])
    else:
        base = np.asarray(spread_by_state)[states]
    spreads = np.abs(base * (1.0 + 0.2 * rng.standard_normal(T)))
    spreads = np.concatenate(([spreads[0]], spreads))
    bars = bars_from_paths(closes, spreads)
    return bars, states, returns
