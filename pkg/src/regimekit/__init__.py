"""Markov regime-switching models for financial return series.

Two model families share one pipeline: classical Gaussian switching
models estimated by maximum likelihood (optionally with covariate-driven
transition probabilities), and switching recurrent networks where
per-regime cells, a covariate encoder, and a Bayes filter learn the
transition dynamics end to end. A backtest engine turns predicted
regimes into a long/short strategy with the usual performance table.
"""

from . import autodiff, backtest, cells, data, msm, report, switching, synth, training

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "backtest",
    "cells",
    "data",
    "msm",
    "report",
    "switching",
    "synth",
    "training",
]
