"""OHLC ingestion, covariates, regime labels, and supervised windowing.

The pipeline is: load daily bars from CSV, derive log returns plus the
range-based covariates (log high/low spread and the squared signed
intraday range), label each day bull/bear from past-vs-future rolling
mean closes, standardize with training-slice statistics only, and cut
the feature matrix into fixed-length windows split chronologically.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "OhlcBar",
    "ReturnSeries",
    "CovariateSeries",
    "NormStats",
    "LabeledDataset",
    "DataError",
    "ParseError",
    "ValidationError",
    "InsufficientDataError",
    "load_ohlc_csv",
    "log_returns",
    "hml",
    "intraday_variance",
    "covariate_series",
    "label_regimes",
    "standardize",
    "make_windows",
    "chrono_split",
    "pipeline_features",
    "build_dataset",
    "save_dataset",
    "load_dataset",
]


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


@dataclass(frozen=True)
class OhlcBar:
    """One daily bar. Prices are strictly positive with low/high bracketing."""

    timestamp: dt.date
    open: float
    high: float
    low: float
    close: float

    def __post_init__(self):
        for name in ("open", "high", "low", "close"):
            v = getattr(self, name)
            if not (v > 0.0 and math.isfinite(v)):
                raise ValidationError(f"{self.timestamp}: {name}={v} must be a positive finite price")
        if self.low > min(self.open, self.close):
            raise ValidationError(f"{self.timestamp}: low {self.low} above open/close")
        if self.high < max(self.open, self.close):
            raise ValidationError(f"{self.timestamp}: high {self.high} below open/close")


@dataclass(frozen=True)
class ReturnSeries:
    timestamps: list[dt.date]
    r: np.ndarray

    def __len__(self):
        return len(self.r)


@dataclass(frozen=True)
class CovariateSeries:
    timestamps: list[dt.date]
    hml: np.ndarray
    iv: np.ndarray


@dataclass(frozen=True)
class NormStats:
    """Per-feature mean/std/max-abs, frozen on the training slice."""

    mean: np.ndarray
    std: np.ndarray
    max_abs: np.ndarray
    feature_names: tuple[str, ...] = ()


@dataclass
class LabeledDataset:
    """Windowed supervised samples: windows[i] ends at the label timestamp."""

    windows: np.ndarray          # [num_samples, seq_len, num_features]
    labels: np.ndarray           # [num_samples] int class indices
    timestamps: list[dt.date]    # label timestamp per sample
    raw_returns: np.ndarray      # unstandardized log return at the label step
    norm_stats: NormStats
    feature_names: tuple[str, ...] = ("ret", "hml", "iv")
    horizon: int = 20

    def __len__(self):
        return self.windows.shape[0]

    def one_hot_labels(self, m: int) -> np.ndarray:
        out = np.zeros((len(self.labels), m), dtype=np.float64)
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out

    def subset(self, idx: slice) -> "LabeledDataset":
        return LabeledDataset(
            windows=self.windows[idx],
            labels=self.labels[idx],
            timestamps=self.timestamps[idx],
            raw_returns=self.raw_returns[idx],
            norm_stats=self.norm_stats,
            feature_names=self.feature_names,
            horizon=self.horizon,
        )


_DEFAULT_COLUMNS = {
    "timestamp": "timestamp",
    "open": "open",
    "high": "high",
    "low": "low",
    "close": "close",
}


def load_ohlc_csv(path, column_map: dict | None = None) -> list[OhlcBar]:
    """Read daily OHLC bars from CSV, sorted ascending by timestamp.

    Column names are matched case-insensitively; `column_map` overrides the
    default {field: column} mapping. Duplicate timestamps are rejected.
    """
    colmap = dict(_DEFAULT_COLUMNS)
    if column_map:
        unknown = set(column_map) - set(colmap)
        if unknown:
            raise ValidationError(f"unknown column-map keys: {sorted(unknown)}")
        colmap.update(column_map)

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        lower = [h.strip().lower() for h in header]
        idx = {}
        for field_name, col in colmap.items():
            try:
                idx[field_name] = lower.index(col.lower())
            except ValueError:
                raise ParseError(f"{path}: missing column '{col}' in header {header}") from None

        bars = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                ts = dt.date.fromisoformat(row[idx["timestamp"]].strip())
                o = float(row[idx["open"]])
                h = float(row[idx["high"]])
                l = float(row[idx["low"]])
                c = float(row[idx["close"]])
            except (ValueError, IndexError) as e:
                raise ParseError(f"{path}:{lineno}: malformed row: {e}") from None
            try:
                bars.append(OhlcBar(ts, o, h, l, c))
            except ValidationError as e:
                raise ValidationError(f"{path}:{lineno}: {e}") from None

    bars.sort(key=lambda b: b.timestamp)
    for a, b in zip(bars, bars[1:]):
        if a.timestamp == b.timestamp:
            raise ValidationError(f"{path}: duplicate timestamp {a.timestamp}")
    return bars


def log_returns(bars: list[OhlcBar]) -> ReturnSeries:
    """r_t = ln(close_t) - ln(close_{t-1}); length is one less than bars."""
    if len(bars) < 2:
        raise InsufficientDataError(f"need at least 2 bars, got {len(bars)}")
    closes = np.array([b.close for b in bars], dtype=np.float64)
    r = np.diff(np.log(closes))
    return ReturnSeries(timestamps=[b.timestamp for b in bars[1:]], r=r)


def hml(bar: OhlcBar) -> float:
    """Log high/low spread, ln(H) - ln(L); nonnegative for any valid bar."""
    return math.log(bar.high) - math.log(bar.low)


def intraday_variance(bar: OhlcBar) -> float:
    """Squared signed log range.

    The sign of the range flips with the candle direction (log(H/L) when
    open >= close, log(L/H) otherwise) and squaring removes it, so the
    value is branch-independent and always nonnegative.
    """
    if bar.open >= bar.close:
        psi = math.log(bar.high / bar.low)
    else:
        psi = math.log(bar.low / bar.high)
    return psi * psi


def covariate_series(bars: list[OhlcBar]) -> CovariateSeries:
    """Per-bar covariates aligned to the return timestamps (bars[1:])."""
    ts = [b.timestamp for b in bars[1:]]
    h = np.array([hml(b) for b in bars[1:]], dtype=np.float64)
    v = np.array([intraday_variance(b) for b in bars[1:]], dtype=np.float64)
    return CovariateSeries(timestamps=ts, hml=h, iv=v)


def label_regimes(closes: np.ndarray, horizon: int = 20) -> tuple[np.ndarray, int]:
    """Bull/bear labels from past-vs-future rolling mean closes.

    label_t = 1 (bull) iff mean(close[t-horizon+1 .. t]) < mean(close[t+1 ..
    t+horizon]). Returns (labels, first_index): timestamps without a full
    window on both sides are dropped, and first_index is the index into
    `closes` of the first labeled day.
    """
    closes = np.asarray(closes, dtype=np.float64)
    n = len(closes)
    if n <= 2 * horizon:
        raise InsufficientDataError(
            f"need more than {2 * horizon} closes for horizon {horizon}, got {n}"
        )
    csum = np.concatenate(([0.0], np.cumsum(closes)))
    first = horizon - 1
    last = n - 1 - horizon  # inclusive
    t = np.arange(first, last + 1)
    past_mean = (csum[t + 1] - csum[t + 1 - horizon]) / horizon
    future_mean = (csum[t + 1 + horizon] - csum[t + 1]) / horizon
    labels = (past_mean < future_mean).astype(np.int64)
    return labels, first


def standardize(X: np.ndarray, stats: NormStats | None = None,
                feature_names: tuple[str, ...] = ()) -> tuple[np.ndarray, NormStats]:
    """Center/scale per feature, then divide by the max absolute value.

    When `stats` is None, X is the training slice and statistics are
    computed from it (std is the population standard deviation). Passing
    stored stats reuses the training statistics, so transforming new data
    never looks ahead.
    """
    X = np.asarray(X, dtype=np.float64)
    if stats is None:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        for j, s in enumerate(std):
            if s <= 0.0:
                name = feature_names[j] if j < len(feature_names) else f"feature {j}"
                raise ValidationError(f"zero standard deviation for {name}")
        centered = (X - mean) / std
        max_abs = np.abs(centered).max(axis=0)
        max_abs = np.where(max_abs > 0.0, max_abs, 1.0)
        stats = NormStats(mean=mean, std=std, max_abs=max_abs, feature_names=tuple(feature_names))
        return centered / max_abs, stats
    return ((X - stats.mean) / stats.std) / stats.max_abs, stats


def make_windows(features: np.ndarray, labels: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Pack features[t-seq_len+1 .. t] with the label at t.

    Returns (windows [N, seq_len, F], labels [N]) where N = len(features)
    - seq_len + 1.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if seq_len < 1:
        raise ValidationError(f"seq_len must be >= 1, got {seq_len}")
    if len(features) != len(labels):
        raise ValidationError(f"features ({len(features)}) and labels ({len(labels)}) misaligned")
    n = len(features) - seq_len + 1
    if n < 1:
        raise InsufficientDataError(
            f"seq_len {seq_len} exceeds data length {len(features)}"
        )
    windows = np.stack([features[i:i + seq_len] for i in range(n)])
    return windows, labels[seq_len - 1:]


def chrono_split(dataset: LabeledDataset, train_frac: float = 0.8,
                 val_frac_of_train: float = 0.2):
    """Contiguous train/val/test split ordered in time."""
    if not (0.0 < train_frac < 1.0) or not (0.0 < val_frac_of_train < 1.0):
        raise ValidationError("split fractions must lie in (0, 1)")
    n = len(dataset)
    n_train_total = int(n * train_frac)
    n_val = int(n_train_total * val_frac_of_train)
    n_train = n_train_total - n_val
    n_test = n - n_train_total
    if min(n_train, n_val, n_test) < 1:
        raise ValidationError(
            f"empty split: train={n_train} val={n_val} test={n_test} from {n} samples"
        )
    return (
        dataset.subset(slice(0, n_train)),
        dataset.subset(slice(n_train, n_train_total)),
        dataset.subset(slice(n_train_total, n)),
    )


def pipeline_features(bars: list[OhlcBar], horizon: int = 20):
    """Aligned per-day feature rows and regime labels.

    Feature row order is (ret, hml, iv). Only days with a log return and a
    full labeling window on both sides survive. Returns (timestamps,
    features [N, 3], labels [N]).
    """
    rets = log_returns(bars)
    covs = covariate_series(bars)
    closes = np.array([b.close for b in bars], dtype=np.float64)
    labels_all, first = label_regimes(closes, horizon=horizon)

    # feature row t (0-based over bars[1:]) is bar index t+1
    lab_lo = max(first, 1)
    lab_hi = len(bars) - 1 - horizon
    if lab_hi < lab_lo:
        raise InsufficientDataError("no overlap between returns and labels")
    rows = np.arange(lab_lo, lab_hi + 1)
    feat = np.column_stack([rets.r[rows - 1], covs.hml[rows - 1], covs.iv[rows - 1]])
    labels = labels_all[rows - first]
    timestamps = [bars[i].timestamp for i in rows]
    return timestamps, feat, labels


def build_dataset(bars: list[OhlcBar], horizon: int = 20, seq_len: int = 10,
                  train_frac: float = 0.8) -> LabeledDataset:
    """Full pipeline from bars to a standardized, windowed dataset.

    Normalization statistics are computed from the feature rows that fall
    inside the training portion of the eventual chronological split, so
    later rows never influence them.
    """
    timestamps, feat, labels = pipeline_features(bars, horizon=horizon)
    raw_ret = feat[:, 0].copy()

    n_rows = len(feat)
    n_samples = n_rows - seq_len + 1
    if n_samples < 5:
        raise InsufficientDataError(f"only {n_samples} windows from {n_rows} rows")
    n_train_rows = int(n_samples * train_frac) + seq_len - 1
    _, stats = standardize(feat[:n_train_rows], feature_names=("ret", "hml", "iv"))
    feat_std, _ = standardize(feat, stats)

    windows, win_labels = make_windows(feat_std, labels, seq_len)
    return LabeledDataset(
        windows=windows,
        labels=win_labels,
        timestamps=timestamps[seq_len - 1:],
        raw_returns=raw_ret[seq_len - 1:],
        norm_stats=stats,
        horizon=horizon,
    )


def save_dataset(dataset: LabeledDataset, bin_path, meta_path) -> None:
    """Dump windows/labels/stats to the named-tensor binary plus JSON meta."""
    ad.save_checkpoint(bin_path, {
        "windows": dataset.windows,
        "labels": dataset.labels.astype(np.float64),
        "raw_returns": dataset.raw_returns,
        "norm_mean": dataset.norm_stats.mean,
        "norm_std": dataset.norm_stats.std,
        "norm_max_abs": dataset.norm_stats.max_abs,
    })
    meta = {
        "feature_names": list(dataset.feature_names),
        "horizon": dataset.horizon,
        "seq_len": int(dataset.windows.shape[1]),
        "num_samples": int(dataset.windows.shape[0]),
        "timestamps": [t.isoformat() for t in dataset.timestamps],
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(bin_path, meta_path) -> LabeledDataset:
    tensors = ad.load_checkpoint(bin_path)
    with open(meta_path) as fh:
        meta = json.load(fh)
    stats = NormStats(
        mean=tensors["norm_mean"],
        std=tensors["norm_std"],
        max_abs=tensors["norm_max_abs"],
        feature_names=tuple(meta["feature_names"]),
    )
    return LabeledDataset(
        windows=tensors["windows"],
        labels=tensors["labels"].astype(np.int64),
        timestamps=[dt.date.fromisoformat(s) for s in meta["timestamps"]],
        raw_returns=tensors["raw_returns"],
        norm_stats=stats,
        feature_names=tuple(meta["feature_names"]),
        horizon=int(meta["horizon"]),
    )
