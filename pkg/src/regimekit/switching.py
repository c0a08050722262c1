"""Switching recurrent networks: per-regime cell stacks produce per-regime
conditional-mean predictions, a covariate-only encoder drives a
multiplicative transition-matrix update, and a Bayes filter turns the two
into regime probabilities.

One window recursion is strictly sequential. A batch of windows runs
vectorized with the running deviation statistics frozen at batch start;
each window still applies exact per-step updates to its own local copy,
and the global statistics are rolled forward in chronological order after
the batch. With batch size 1 this reduces to fully sequential semantics.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Parameter
from .cells import CellStack, make_stack

logger = logging.getLogger(__name__)

__all__ = [
    "SwitchingConfig",
    "SwitchingModel",
    "SwitchingOutput",
    "RunningStats",
    "update_transition",
    "predict_pi",
    "filter_update",
    "predict_regime",
]

_SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class SwitchingConfig:
    """Model shape and the assembly flags that resolve ambiguous wiring."""

    m: int = 2
    cell: str = "gru"                 # gru | lstm | tkan
    layers: int = 2
    units: int = 100
    seq_len: int = 10
    n_features: int = 3
    ret_index: int = 0
    encoder_units: int = 0            # 0 means same as units
    rho_mode: str = "offdiag"         # offdiag: z is m(m-1), unit diagonal
    regime_input: str = "full"        # full | returns_only
    sub_layers: int = 3
    sub_out: int = 10
    grid_size: int = 5
    degree: int = 3
    z_clamp: float = 30.0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"need at least 2 regimes, got {self.m}")
        if self.rho_mode not in ("offdiag", "square"):
            raise ValueError(f"unknown rho_mode {self.rho_mode!r}")
        if self.regime_input not in ("full", "returns_only"):
            raise ValueError(f"unknown regime_input {self.regime_input!r}")

    @property
    def o_dim(self) -> int:
        return self.encoder_units or self.units

    @property
    def z_dim(self) -> int:
        return self.m * (self.m - 1) if self.rho_mode == "offdiag" else self.m * self.m

    @property
    def cov_indices(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_features) if i != self.ret_index)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "SwitchingConfig":
        return cls(**json.loads(s))


class RunningStats:
    """Streaming per-regime mean/M2 of the regime prediction history."""

    def __init__(self, m: int):
        self.m = m
        self.count = 0
        self.mean = np.zeros(m)
        self.m2 = np.zeros(m)

    def reset(self):
        self.count = 0
        self.mean[...] = 0.0
        self.m2[...] = 0.0

    def update(self, y: np.ndarray):
        self.count += 1
        delta = y - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (y - self.mean)

    def sigma(self) -> np.ndarray:
        if self.count < 2:
            return np.ones(self.m)
        return np.maximum(np.sqrt(self.m2 / (self.count - 1)), _SIGMA_FLOOR)


class _BatchStats:
    """Per-window copies of the running stats, vectorized over a batch."""

    def __init__(self, base: RunningStats, batch: int):
        self.count = base.count
        self.mean = np.tile(base.mean, (batch, 1))
        self.m2 = np.tile(base.m2, (batch, 1))

    def update(self, y: np.ndarray):
        self.count += 1
        delta = y - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (y - self.mean)

    def sigma(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.maximum(np.sqrt(self.m2 / (self.count - 1)), _SIGMA_FLOOR)


# ---------------------------------------------------------------------------
# mechanism pieces (usable standalone on tensors)


def update_transition(P_prev: Tensor, Z: Tensor, m: int,
                      mode: str = "offdiag", clamp: float = 30.0) -> Tensor:
    """Next transition matrix: rowwise softmax of P_prev scaled by
    exp(Z) placed off-diagonal (row-major) with a unit diagonal.

    In "square" mode Z has m*m entries and fills the whole matrix. Z is
    clamped to +-clamp before exponentiation to keep the scale finite.
    """
    e = ad.exp(ad.clip(Z, -clamp, clamp))
    lead = Z.shape[:-1]
    if mode == "offdiag":
        ones = ad.constant(np.ones(lead + (1,)))
        rows = []
        for i in range(m):
            base = i * (m - 1)
            parts = []
            if i > 0:
                parts.append(ad.slice_axis(e, -1, base, base + i))
            parts.append(ones)
            if i < m - 1:
                parts.append(ad.slice_axis(e, -1, base + i, base + m - 1))
            rows.append(ad.concat(parts, axis=-1))
        rho = ad.reshape(ad.concat(rows, axis=-1), lead + (m, m))
    else:
        rho = ad.reshape(e, lead + (m, m))
    return ad.softmax(ad.mul(P_prev, rho))


def predict_pi(P: Tensor, pi_prev: Tensor) -> Tensor:
    """Transition applied to the filtered distribution: pi_pred = P' pi."""
    shape = pi_prev.shape
    row = ad.reshape(pi_prev, shape[:-1] + (1, shape[-1]))
    return ad.reshape(ad.matmul(row, P), shape)


def filter_update(pi_pred: Tensor, y: np.ndarray, yhat: Tensor,
                  sigma: np.ndarray) -> Tensor:
    """Bayes update of the predicted regime distribution against the
    observed value, with per-regime Gaussian likelihoods evaluated in log
    space. Returns the filtered distribution (rows sum to one).
    """
    y = np.asarray(y, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    dev = ad.sub(ad.constant(y[..., None]), yhat)
    zscore = ad.mul(dev, ad.constant(1.0 / sigma))
    loglike = ad.sub(ad.scale(ad.mul(zscore, zscore), -0.5),
                     ad.constant(np.log(sigma)))
    return ad.softmax(ad.add(loglike, ad.log(pi_pred)))


def predict_regime(pi: np.ndarray) -> int:
    """1-based index of the most probable regime; ties go to the
    smallest index."""
    pi = np.asarray(pi)
    return int(np.argmax(pi)) + 1


# ---------------------------------------------------------------------------
# model assembly


@dataclass
class SwitchingOutput:
    """Per-step diagnostics plus the tape handle used for training."""

    pi_pred: np.ndarray          # [B, T, m] predicted (pre-observation)
    pi_filt: np.ndarray          # [B, T, m] filtered
    yhat: np.ndarray             # [B, T, m] per-regime predictions
    transitions: np.ndarray      # [B, T, m, m]
    sigma: np.ndarray            # [B, T, m] deviations used per step
    final_pi_pred: Tensor        # [B, m] tape tensor at the label step

    @property
    def predicted_regimes(self) -> np.ndarray:
        """0-based argmax class at the label step per window."""
        return np.argmax(self.pi_pred[:, -1, :], axis=-1)


class SwitchingModel:
    """m per-regime cell stacks + scalar heads, a covariate encoder that
    emits the transition update vector, and the filter recursion."""

    def __init__(self, config: SwitchingConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        m = config.m
        tkan_kw = {}
        if config.cell == "tkan":
            tkan_kw = dict(sub_layers=config.sub_layers, sub_out=config.sub_out,
                           grid_size=config.grid_size, degree=config.degree)
        regime_in = config.n_features if config.regime_input == "full" else 1
        self.regime_stacks: list[CellStack] = [
            make_stack(config.cell, regime_in, config.units, config.layers,
                       rng, prefix=f"regime{k}", **tkan_kw)
            for k in range(m)
        ]
        self.head_w = [Parameter(rng.normal(0.0, 0.1, size=(config.units, 1)),
                                 f"head{k}.w") for k in range(m)]
        self.head_b = [Parameter(np.zeros(1), f"head{k}.b") for k in range(m)]
        n_cov = len(config.cov_indices)
        self.encoder = make_stack(config.cell, n_cov, config.o_dim,
                                  config.layers, rng, prefix="encoder",
                                  **tkan_kw)
        self.w_z = Parameter(rng.normal(0.0, 0.1, size=(config.o_dim, config.z_dim)),
                             "wz")
        self.b_z = Parameter(np.zeros(config.z_dim), "bz")
        self.stats = RunningStats(m)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[Parameter]:
        ps = []
        for st in self.regime_stacks:
            ps.extend(st.parameters())
        for w, b in zip(self.head_w, self.head_b):
            ps.extend([w, b])
        ps.extend(self.encoder.parameters())
        ps.extend([self.w_z, self.b_z])
        return ps

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = {p.name: p for p in self.parameters()}
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"state mismatch: missing={missing} extra={extra}")
        for name, arr in state.items():
            p = params[name]
            if p.data.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
            p.data[...] = arr

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def reset_stats(self):
        self.stats.reset()

    def begin_epoch(self):
        self.reset_stats()

    # -- forward ------------------------------------------------------------

    def encode_covariates(self, cov_window: np.ndarray) -> Tensor:
        """Transition update vector from a covariate-only window
        [B, T, n_cov]: affine(relu(final encoder hidden))."""
        B, T, _ = cov_window.shape
        states = self.encoder.init_state(B)
        h = None
        for t in range(T):
            h, states = self.encoder.step(states, ad.constant(cov_window[:, t, :]))
        o = ad.relu(h)
        return ad.add(ad.matmul(o, self.w_z), self.b_z)

    def forward_window(self, windows: np.ndarray, update_global: bool = True,
                       switching_disabled: bool = False) -> SwitchingOutput:
        """Run the recursion over a batch of windows [B, T, F].

        Per step: per-regime cells advance and predict, the encoder emits
        the update vector, the transition matrix and predicted
        distribution update, and the filter absorbs the step's observed
        return. Deviation statistics update after the filter step.
        """
        cfg = self.config
        windows = np.asarray(windows, dtype=np.float64)
        B, T, F = windows.shape
        m = cfg.m
        if cfg.regime_input == "full":
            regime_cols = np.arange(F)
        else:
            regime_cols = np.array([cfg.ret_index])
        cov_cols = np.array(cfg.cov_indices)

        regime_states = [st.init_state(B) for st in self.regime_stacks]
        enc_states = self.encoder.init_state(B)
        P = ad.constant(np.full((B, m, m), 1.0 / m))
        pi = ad.constant(np.full((B, m), 1.0 / m))
        local = _BatchStats(self.stats, B)
        uniform_P = P

        pi_pred_hist = np.empty((B, T, m))
        pi_filt_hist = np.empty((B, T, m))
        yhat_hist = np.empty((B, T, m))
        trans_hist = np.empty((B, T, m, m))
        sigma_hist = np.empty((B, T, m))
        pi_pred_t: Tensor | None = None

        for t in range(T):
            x_reg = ad.constant(windows[:, t, :][:, regime_cols])
            x_cov = ad.constant(windows[:, t, :][:, cov_cols])
            y_obs = windows[:, t, cfg.ret_index]

            # per-regime predictions
            cols = []
            for k in range(m):
                h_k, regime_states[k] = self.regime_stacks[k].step(
                    regime_states[k], x_reg)
                cols.append(ad.add(ad.matmul(h_k, self.head_w[k]), self.head_b[k]))
            yhat = ad.concat(cols, axis=-1)                      # [B, m]

            if switching_disabled:
                P = uniform_P
                pi_pred_t = predict_pi(P, pi)
                pi = pi_pred_t
                sigma_hist[:, t, :] = 1.0
            else:
                h_enc, enc_states = self.encoder.step(enc_states, x_cov)
                o_t = ad.relu(h_enc)
                z_vec = ad.add(ad.matmul(o_t, self.w_z), self.b_z)
                P = update_transition(P, z_vec, m, mode=cfg.rho_mode,
                                      clamp=cfg.z_clamp)
                pi_pred_t = predict_pi(P, pi)
                sigma = local.sigma()
                pi_new = filter_update(pi_pred_t, y_obs, yhat, sigma)
                if not np.isfinite(pi_new.data).all():
                    logger.warning(
                        "filter densities degenerate at step %d; "
                        "falling back to the predicted distribution", t)
                    pi_new = pi_pred_t
                pi = pi_new
                sigma_hist[:, t, :] = sigma

            local.update(yhat.data)
            pi_pred_hist[:, t, :] = pi_pred_t.data
            pi_filt_hist[:, t, :] = pi.data
            yhat_hist[:, t, :] = yhat.data
            trans_hist[:, t, :, :] = P.data

        if update_global:
            for b in range(B):
                for t in range(T):
                    self.stats.update(yhat_hist[b, t])

        return SwitchingOutput(pi_pred=pi_pred_hist, pi_filt=pi_filt_hist,
                               yhat=yhat_hist, transitions=trans_hist,
                               sigma=sigma_hist, final_pi_pred=pi_pred_t)

    def predict_proba_batch(self, windows: np.ndarray,
                            update_global: bool = True) -> Tensor:
        """Label-step predicted distribution for a batch, on the tape."""
        return self.forward_window(windows, update_global=update_global).final_pi_pred
