"""Supervised training loop shared by the plain recurrent classifiers and
the switching models: categorical cross-entropy, Adam updates, validation
early stopping with best-checkpoint restore, and a plateau learning-rate
schedule. Deterministic given the seed.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Parameter
from .cells import make_stack
from .data import LabeledDataset
from .switching import SwitchingModel

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainReport",
    "NumericalError",
    "BaselineClassifier",
    "one_hot",
    "categorical_cross_entropy",
    "Adam",
    "train",
    "evaluate",
]


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    early_stop_patience: int = 10
    lr_patience: int = 5
    lr_factor: float = 0.25
    min_delta: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.early_stop_patience < 1 or self.lr_patience < 1:
            raise ValueError("patience values must be positive")
        if not (0.0 < self.lr_factor < 1.0):
            raise ValueError(f"lr_factor must be in (0, 1), got {self.lr_factor}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    best_epoch: int = 0
    final_lr: float = 0.0
    stopped_epoch: int = 0
    wall_time: float = 0.0
    checkpoint_path: str | None = None

    @property
    def best_val_loss(self) -> float:
        return min(self.val_losses)


def one_hot(labels: np.ndarray, m: int) -> np.ndarray:
    """Class indices to one-hot rows."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= m:
        raise ValueError(f"labels must lie in [0, {m}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((len(labels), m), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def categorical_cross_entropy(p: Tensor, y: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch; probabilities are floored at
    1e-12 inside the log."""
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ad.ShapeError(f"probabilities {p.shape} vs targets {y.shape}")
    logp = ad.log(ad.clip(p, 1e-12, 1.0))
    per_sample = ad.reduce_sum(ad.mul(logp, ad.constant(y)), axis=-1)
    return ad.scale(ad.reduce_mean(per_sample), -1.0)


class Adam:
    """Adaptive-moment gradient descent (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class BaselineClassifier:
    """Plain recurrent classifier: a cell stack over the full feature
    window, an affine map on the final hidden state, and a softmax head."""

    def __init__(self, kind: str, n_features: int, units: int = 100,
                 layers: int = 2, m: int = 2, seed: int = 0, **tkan_kw):
        rng = np.random.default_rng(seed)
        self.m = m
        self.stack = make_stack(kind, n_features, units, layers, rng,
                                prefix="clf", **tkan_kw)
        self.w_out = Parameter(rng.normal(0.0, 0.1, size=(units, m)), "out.w")
        self.b_out = Parameter(np.zeros(m), "out.b")

    def parameters(self):
        return self.stack.parameters() + [self.w_out, self.b_out]

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        params = {p.name: p for p in self.parameters()}
        if set(params) != set(state):
            raise ValueError("state dict does not match model parameters")
        for name, arr in state.items():
            params[name].data[...] = arr

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def begin_epoch(self):
        pass

    def predict_proba_batch(self, windows: np.ndarray,
                            update_global: bool = True) -> Tensor:
        windows = np.asarray(windows, dtype=np.float64)
        B, T, _ = windows.shape
        states = self.stack.init_state(B)
        h = None
        for t in range(T):
            h, states = self.stack.step(states, ad.constant(windows[:, t, :]))
        logits = ad.add(ad.matmul(h, self.w_out), self.b_out)
        return ad.softmax(logits)


def _batches(n: int, batch_size: int):
    for lo in range(0, n, batch_size):
        yield lo, min(lo + batch_size, n)


def evaluate(model, dataset: LabeledDataset, m: int = 2,
             batch_size: int = 64):
    """Loss, predicted labels, and the probability matrix on a dataset.

    Runs without a tape, so no gradients accumulate and parameters are
    untouched. Windows are processed in chronological order.
    """
    model.begin_epoch()
    y = one_hot(dataset.labels, m)
    probs = np.empty((len(dataset), m))
    total = 0.0
    for lo, hi in _batches(len(dataset), batch_size):
        p = model.predict_proba_batch(dataset.windows[lo:hi])
        probs[lo:hi] = p.data
        loss = categorical_cross_entropy(p, y[lo:hi])
        total += loss.item() * (hi - lo)
    preds = np.argmax(probs, axis=1)
    return total / len(dataset), preds, probs


def train(model, train_data: LabeledDataset, val_data: LabeledDataset,
          config: TrainConfig, m: int = 2,
          checkpoint_path=None) -> TrainReport:
    """Run the training loop until early stopping or the epoch cap.

    Validation loss is checked each epoch; after `lr_patience` epochs
    without improvement the learning rate is multiplied by `lr_factor`,
    and after `early_stop_patience` epochs training stops and the
    best-epoch parameters are restored.
    """
    t0 = time.perf_counter()
    y_train = one_hot(train_data.labels, m)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    report = TrainReport(final_lr=config.learning_rate)

    best_val = np.inf
    best_state = model.state_dict()
    streak = 0

    for epoch in range(1, config.max_epochs + 1):
        model.begin_epoch()
        epoch_loss = 0.0
        for lo, hi in _batches(len(train_data), config.batch_size):
            with ad.Tape() as tape:
                p = model.predict_proba_batch(train_data.windows[lo:hi])
                loss = categorical_cross_entropy(p, y_train[lo:hi])
            val = loss.item()
            if not np.isfinite(val):
                raise NumericalError(f"non-finite loss at epoch {epoch}, "
                                     f"batch [{lo}:{hi}]")
            tape.backward(loss)
            opt.lr = report.final_lr
            opt.step()
            opt.zero_grad()
            epoch_loss += val * (hi - lo)
        epoch_loss /= len(train_data)

        val_loss, _, _ = evaluate(model, val_data, m=m,
                                  batch_size=config.batch_size)
        report.train_losses.append(epoch_loss)
        report.val_losses.append(val_loss)
        report.lrs.append(report.final_lr)

        if val_loss < best_val - config.min_delta:
            best_val = val_loss
            best_state = model.state_dict()
            report.best_epoch = epoch
            streak = 0
        else:
            streak += 1
            if streak >= config.early_stop_patience:
                report.stopped_epoch = epoch
                break
            if streak % config.lr_patience == 0:
                report.final_lr *= config.lr_factor
                logger.info("epoch %d: reducing learning rate to %g",
                            epoch, report.final_lr)
    if report.stopped_epoch == 0:
        report.stopped_epoch = len(report.val_losses)

    model.load_state_dict(best_state)
    report.wall_time = time.perf_counter() - t0
    if checkpoint_path is not None:
        ad.save_checkpoint(checkpoint_path, model.state_dict())
        report.checkpoint_path = str(checkpoint_path)
    return report
