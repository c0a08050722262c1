"""Gaussian Markov-switching models with constant or covariate-driven
time-varying transition probabilities.

Estimation is maximum likelihood over an unconstrained parameterization
(free means, log variances, multinomial-logit transition rows with the
last destination as the zero reference). The filter recursion is exposed
both as a plain numpy routine and as a single differentiable operation,
so the optimizer gets exact gradients from the reverse-mode tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import erfc

from . import autodiff as ad

__all__ = [
    "MsmSpec",
    "MsmParams",
    "FilterOutput",
    "FitResult",
    "MsmError",
    "transition_matrix_tvtp",
    "regime_density",
    "stationary_distribution",
    "hamilton_filter",
    "kim_smoother",
    "fit_mle",
    "predict_return",
    "simulate",
    "coefficient_table",
]

_PROB_FLOOR = 1e-300


class MsmError(RuntimeError):
    pass


@dataclass(frozen=True)
class MsmSpec:
    """Model shape: number of regimes and transition covariate names."""

    m: int = 2
    covariates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"need at least 2 regimes, got {self.m}")

    @property
    def n_beta_cols(self) -> int:
        # intercept plus one slope per covariate
        return 1 + len(self.covariates)

    @property
    def n_params(self) -> int:
        return 2 * self.m + self.m * (self.m - 1) * self.n_beta_cols


@dataclass
class MsmParams:
    """Per-regime mean/variance and transition-logit coefficient rows.

    beta has shape [m, m-1, 1 + n_cov]: origin regime, free destination
    (destinations 1..m-1; destination m is the fixed zero reference row),
    coefficients over [intercept, covariates].
    """

    alpha: np.ndarray
    sigma2: np.ndarray
    beta: np.ndarray

    @property
    def m(self) -> int:
        return len(self.alpha)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            self.alpha,
            np.log(self.sigma2),
            self.beta.reshape(-1),
        ])

    @classmethod
    def from_vector(cls, theta: np.ndarray, spec: MsmSpec) -> "MsmParams":
        m, k = spec.m, spec.n_beta_cols
        alpha = theta[:m]
        sigma2 = np.exp(theta[m:2 * m])
        beta = theta[2 * m:].reshape(m, m - 1, k)
        return cls(alpha=alpha.copy(), sigma2=sigma2, beta=beta.copy())

    def relabeled(self, perm: np.ndarray) -> "MsmParams":
        """Permute regime indices, renormalizing beta to the new reference.

        perm[k] gives the old index shown at new position k. The implied
        transition probabilities are invariant.
        """
        perm = np.asarray(perm)
        m = self.m
        k = self.beta.shape[2]
        full = np.zeros((m, m, k))
        full[:, :m - 1, :] = self.beta
        new_full = full[np.ix_(perm, perm)]
        new_full = new_full - new_full[:, m - 1:m, :]
        return MsmParams(
            alpha=self.alpha[perm].copy(),
            sigma2=self.sigma2[perm].copy(),
            beta=new_full[:, :m - 1, :].copy(),
        )


@dataclass
class FilterOutput:
    """Predicted, filtered, and (after smoothing) smoothed regime
    probabilities, with the per-step transition matrices used."""

    predicted: np.ndarray            # [T, m]
    filtered: np.ndarray             # [T, m]
    loglik: float
    transitions: np.ndarray          # [T, m, m]
    smoothed: np.ndarray | None = None


def transition_matrix_tvtp(beta: np.ndarray, z_prev: np.ndarray) -> np.ndarray:
    """Multinomial-logit transition matrix for one step.

    beta: [m, m-1, k] free-destination coefficient rows; z_prev: length-k
    covariate vector whose first entry is the intercept term 1. Rows sum
    to one; the last destination uses the fixed zero reference.
    """
    if not np.all(np.isfinite(z_prev)):
        raise MsmError(f"non-finite covariate vector {z_prev}")
    m = beta.shape[0]
    logits = np.zeros((m, m))
    logits[:, :m - 1] = beta @ z_prev
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def regime_density(r: float, alpha: float, sigma2: float) -> float:
    """Gaussian density of a return under one regime."""
    if sigma2 <= 0.0:
        raise MsmError(f"sigma2 must be positive, got {sigma2}")
    return math.exp(-0.5 * math.log(2.0 * math.pi * sigma2)
                    - (r - alpha) ** 2 / (2.0 * sigma2))


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Stationary distribution of a transition matrix via the linear
    system (I - P' + 11') pi = 1."""
    m = P.shape[0]
    M = np.eye(m) - P.T + np.ones((m, m))
    return np.linalg.solve(M, np.ones(m))


def _build_transitions(params: MsmParams, covariates: np.ndarray | None,
                       T: int) -> np.ndarray:
    """Per-step transition matrices [T, m, m]; covariates are lagged one
    step (row t-1 drives the transition into t; the first step reuses the
    earliest available row)."""
    m = params.m
    k = params.beta.shape[2]
    if covariates is None or k == 1:
        z = np.ones(1)
        P = transition_matrix_tvtp(params.beta, z)
        return np.broadcast_to(P, (T, m, m)).copy()
    Z = np.column_stack([np.ones(T), covariates])
    Zlag = np.vstack([Z[:1], Z[:-1]])
    out = np.empty((T, m, m))
    for t in range(T):
        out[t] = transition_matrix_tvtp(params.beta, Zlag[t])
    return out


def _forward_kernel(logf, P, pi0, predicted, filtered):
    """Forward filter recursion in log space; fills `predicted` and
    `filtered` in place and returns the log-likelihood.

    Written as plain loops so the optional numba jit below can compile it;
    un-jitted it is still fast enough for interactive use.
    """
    T, m = logf.shape
    pi = pi0.copy()
    a = np.empty(m)
    loglik = 0.0
    for t in range(T):
        for j in range(m):
            acc = 0.0
            for i in range(m):
                acc += P[t, i, j] * pi[i]
            predicted[t, j] = acc
            if acc < _PROB_FLOOR:
                acc = _PROB_FLOOR
            a[j] = logf[t, j] + np.log(acc)
        amax = a[0]
        for j in range(1, m):
            if a[j] > amax:
                amax = a[j]
        s = 0.0
        for j in range(m):
            a[j] = np.exp(a[j] - amax)
            s += a[j]
        loglik += amax + np.log(s)
        for j in range(m):
            pi[j] = a[j] / s
            filtered[t, j] = pi[j]
    return loglik


def _adjoint_kernel(logf, P, pi0, predicted, filtered, g_loglik,
                    glogf, gP, gpi0):
    """Reverse-mode adjoint of the forward recursion w.r.t. loglik."""
    T, m = logf.shape
    gpi = np.zeros(m)
    ga = np.empty(m)
    gpitilde = np.empty(m)
    for t in range(T - 1, -1, -1):
        dot = 0.0
        for j in range(m):
            dot += gpi[j] * filtered[t, j]
        for j in range(m):
            # d loglik_t / d a_t = pi_t, plus the softmax vjp from the
            # downstream use of pi_t
            ga[j] = g_loglik * filtered[t, j] + filtered[t, j] * (gpi[j] - dot)
            glogf[t, j] = ga[j]
            denom = predicted[t, j]
            if denom < _PROB_FLOOR:
                denom = _PROB_FLOOR
            gpitilde[j] = ga[j] / denom
        for i in range(m):
            prev = pi0[i] if t == 0 else filtered[t - 1, i]
            acc = 0.0
            for j in range(m):
                gP[t, i, j] = prev * gpitilde[j]
                acc += P[t, i, j] * gpitilde[j]
            gpi[i] = acc
        # gpi now holds d loglik / d filtered[t-1]
    for i in range(m):
        gpi0[i] = gpi[i]


try:  # numba shaves the sequential recursions from ~40ms to <1ms at T=5000
    import numba as _numba

    _forward_kernel = _numba.njit(cache=True)(_forward_kernel)
    _adjoint_kernel = _numba.njit(cache=True)(_adjoint_kernel)
except ImportError:  # pragma: no cover - exercised only without numba
    pass


def _filter_core(logf: np.ndarray, P: np.ndarray, pi0: np.ndarray):
    """Run the forward recursion; returns (loglik, predicted, filtered)."""
    T, m = logf.shape
    predicted = np.empty((T, m))
    filtered = np.empty((T, m))
    loglik = _forward_kernel(np.ascontiguousarray(logf),
                             np.ascontiguousarray(P),
                             np.ascontiguousarray(pi0), predicted, filtered)
    if not np.isfinite(loglik):
        t_bad = int(np.argmax(~np.isfinite(filtered).all(axis=1)))
        raise MsmError(f"degenerate filter step at t={t_bad}")
    return float(loglik), predicted, filtered


def _filter_adjoint(logf, P, pi0, predicted, filtered, g_loglik):
    glogf = np.empty_like(logf)
    gP = np.empty_like(P)
    gpi0 = np.empty_like(pi0)
    _adjoint_kernel(np.ascontiguousarray(logf), np.ascontiguousarray(P),
                    np.ascontiguousarray(pi0), predicted, filtered,
                    float(g_loglik), glogf, gP, gpi0)
    return glogf, gP, gpi0


def filter_loglik_op(logf: ad.Tensor, P: ad.Tensor, pi0: ad.Tensor) -> ad.Tensor:
    """Whole-recursion log-likelihood as one differentiable operation."""
    loglik, predicted, filtered = _filter_core(logf.data, P.data, pi0.data)

    def vjp(g):
        g = float(g)
        glogf, gP, gpi0 = _filter_adjoint(
            logf.data, P.data, pi0.data, predicted, filtered, g
        )
        return glogf, gP, gpi0

    return ad.custom_op(np.float64(loglik), (logf, P, pi0), vjp)


def stationary_op(P: ad.Tensor) -> ad.Tensor:
    """Differentiable stationary distribution of a constant transition
    matrix, via implicit differentiation of (I - P' + 11') pi = 1."""
    m = P.shape[0]
    M = np.eye(m) - P.data.T + np.ones((m, m))
    pi = np.linalg.solve(M, np.ones(m))

    def vjp(g):
        w = np.linalg.solve(M.T, g)
        gM = -np.outer(w, pi)
        return (-gM.T,)

    return ad.custom_op(pi, (P,), vjp)


def hamilton_filter(returns: np.ndarray, covariates: np.ndarray | None,
                    params: MsmParams) -> FilterOutput:
    """Run the forward filter over a return series.

    The initial distribution is the stationary distribution of the
    transition matrix when transitions are constant, uniform otherwise.
    """
    r = np.asarray(returns, dtype=np.float64)
    T, m = len(r), params.m
    P = _build_transitions(params, covariates, T)
    tvtp = params.beta.shape[2] > 1
    pi0 = np.full(m, 1.0 / m) if tvtp else stationary_distribution(P[0])
    logf = (-0.5 * np.log(2.0 * np.pi * params.sigma2)
            - (r[:, None] - params.alpha) ** 2 / (2.0 * params.sigma2))
    loglik, predicted, filtered = _filter_core(logf, P, pi0)
    return FilterOutput(predicted=predicted, filtered=filtered,
                        loglik=loglik, transitions=P)


def kim_smoother(fo: FilterOutput) -> np.ndarray:
    """Backward smoothing recursion; also stores the result on `fo`."""
    filtered, predicted, P = fo.filtered, fo.predicted, fo.transitions
    T, m = filtered.shape
    smoothed = np.empty((T, m))
    smoothed[-1] = filtered[-1]
    for t in range(T - 2, -1, -1):
        ratio = smoothed[t + 1] / np.maximum(predicted[t + 1], _PROB_FLOOR)
        smoothed[t] = filtered[t] * (P[t + 1] @ ratio)
        smoothed[t] /= smoothed[t].sum()
    fo.smoothed = smoothed
    return smoothed


def predict_return(fo: FilterOutput, params: MsmParams, t: int) -> float:
    """One-step conditional mean: predicted regime weights dotted with
    the regime means."""
    if not (0 <= t < len(fo.predicted)):
        raise IndexError(f"t={t} outside filtered range {len(fo.predicted)}")
    return float(fo.predicted[t] @ params.alpha)


# ---------------------------------------------------------------------------
# maximum likelihood


def _loglik_tape(theta: np.ndarray, spec: MsmSpec, r: np.ndarray,
                 Zlag: np.ndarray | None):
    """Build the log-likelihood on a fresh tape; returns (value, grad)."""
    m, k = spec.m, spec.n_beta_cols
    T = len(r)
    p_alpha = ad.Parameter(theta[:m], "alpha")
    p_logs2 = ad.Parameter(theta[m:2 * m], "log_sigma2")
    p_beta = ad.Parameter(theta[2 * m:].reshape(m * (m - 1), k), "beta")
    params = [p_alpha, p_logs2, p_beta]

    with ad.Tape() as tape:
        # per-step log densities [T, m]
        rcol = ad.constant(r[:, None])
        alpha_row = ad.reshape(p_alpha, (1, m))
        inv_var = ad.exp(ad.scale(p_logs2, -1.0))
        dev = ad.sub(rcol, alpha_row)
        quad = ad.mul(ad.mul(dev, dev), ad.reshape(inv_var, (1, m)))
        logf = ad.sub(
            ad.scale(ad.reshape(p_logs2, (1, m)), -0.5),
            ad.add(ad.scale(quad, 0.5),
                   ad.constant(0.5 * math.log(2.0 * math.pi))),
        )
        # transition logits with zero reference destination
        if Zlag is None:
            logits_free = ad.reshape(p_beta, (m, m - 1))  # intercept only
            logits = ad.concat([logits_free, ad.constant(np.zeros((m, 1)))], axis=1)
            P = ad.softmax(logits)
            pi0 = stationary_op(P)
            Pfull = ad.reshape(P, (1, m, m))
            # tile the constant matrix across steps; gradient sums back
            Pb = ad.custom_op(
                np.broadcast_to(Pfull.data, (T, m, m)).copy(), (Pfull,),
                lambda g: (g.sum(axis=0, keepdims=True),),
            )
        else:
            zc = ad.constant(Zlag)                        # [T, k]
            bt = ad.reshape(p_beta, (m * (m - 1), k))
            logits_free = ad.matmul(zc, _transpose_op(bt))  # [T, m(m-1)]
            logits_free = ad.reshape(logits_free, (T, m, m - 1))
            zeros = ad.constant(np.zeros((T, m, 1)))
            logits = ad.concat([logits_free, zeros], axis=2)
            Pb = ad.softmax(logits)
            pi0 = ad.constant(np.full(m, 1.0 / m))
        ll = filter_loglik_op(logf, Pb, pi0)
    tape.backward(ll)
    grad = np.concatenate([p.grad.reshape(-1) for p in params])
    return float(ll.data), grad


def _transpose_op(a: ad.Tensor) -> ad.Tensor:
    out = a.data.T.copy()

    def vjp(g):
        return (g.T,)

    return ad.custom_op(out, (a,), vjp)


def loglik_and_grad(theta: np.ndarray, spec: MsmSpec, returns: np.ndarray,
                    covariates: np.ndarray | None):
    """Exact log-likelihood and gradient at an unconstrained parameter
    vector [alpha, log sigma2, vec(beta)]."""
    r = np.asarray(returns, dtype=np.float64)
    Zlag = None
    if spec.covariates:
        Z = np.column_stack([np.ones(len(r)), covariates])
        Zlag = np.vstack([Z[:1], Z[:-1]])
    return _loglik_tape(np.asarray(theta, dtype=np.float64), spec, r, Zlag)


def _random_start(rng: np.random.Generator, spec: MsmSpec,
                  r: np.ndarray) -> np.ndarray:
    """Moment-informed random initialization in the unconstrained space."""
    m, k = spec.m, spec.n_beta_cols
    mu, var = r.mean(), r.var()
    alpha = mu + rng.normal(0.0, math.sqrt(var), size=m)
    spread = np.sort(rng.uniform(0.3, 3.0, size=m))
    log_s2 = np.log(var * spread)
    beta = np.zeros((m, m - 1, k))
    # favor persistent chains: own-destination intercepts positive
    beta[:, :, 0] = rng.normal(0.0, 0.5, size=(m, m - 1))
    for i in range(min(m - 1, m)):
        beta[i, i, 0] += 2.0
    if k > 1:
        beta[:, :, 1:] = rng.normal(0.0, 0.2, size=(m, m - 1, k - 1))
    return np.concatenate([alpha, log_s2, beta.reshape(-1)])


@dataclass
class FitResult:
    params: MsmParams
    std_errors: MsmParams | None     # same layout as params, delta-method scale
    loglik: float
    converged: bool
    spec: MsmSpec
    theta: np.ndarray = field(repr=False, default=None)
    theta_cov: np.ndarray | None = field(repr=False, default=None)
    n_obs: int = 0


def fit_mle(returns: np.ndarray, covariates: np.ndarray | None,
            spec: MsmSpec, init: MsmParams | None = None,
            n_starts: int = 5, seed: int = 0, max_iter: int = 500,
            gtol: float = 1e-6) -> FitResult:
    """Maximize the filter log-likelihood by quasi-Newton ascent.

    Multi-start BFGS over the unconstrained parameterization; ties between
    equally good starts break deterministically by start index. Regimes
    are relabeled in order of ascending variance before reporting.
    """
    r = np.asarray(returns, dtype=np.float64)
    rng = np.random.default_rng(seed)
    T = len(r)

    # optimize the mean log-likelihood: the gradient tolerance then acts on
    # the per-observation score, which is the numerically meaningful scale
    def objective(theta):
        try:
            ll, grad = loglik_and_grad(theta, spec, r, covariates)
        except (MsmError, FloatingPointError):
            return 1e12, np.zeros_like(theta)
        if not np.isfinite(ll):
            return 1e12, np.zeros_like(theta)
        return -ll / T, -grad / T

    starts = []
    if init is not None:
        starts.append(init.to_vector())
    while len(starts) < max(1, n_starts):
        starts.append(_random_start(rng, spec, r))

    best = None
    for i, theta0 in enumerate(starts):
        res = minimize(objective, theta0, jac=True, method="BFGS",
                       options={"gtol": gtol, "maxiter": max_iter})
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best[0] - 1e-12:
            best = (res.fun, i, res)
    if best is None:
        raise MsmError("all optimizer starts failed")
    res = best[2]
    converged = bool(res.success) or float(np.max(np.abs(res.jac))) < 10.0 * gtol

    # relabel by ascending variance for identification
    params = MsmParams.from_vector(res.x, spec)
    order = np.argsort(params.sigma2, kind="stable")
    params = params.relabeled(order)
    theta = params.to_vector()

    cov = _theta_covariance(theta, spec, r, covariates)
    se = None
    if cov is not None:
        se_vec = np.sqrt(np.diag(cov))
        m = spec.m
        se = MsmParams(
            alpha=se_vec[:m],
            # delta method: sigma2 = exp(log sigma2)
            sigma2=params.sigma2 * se_vec[m:2 * m],
            beta=se_vec[2 * m:].reshape(params.beta.shape),
        )
    ll, _ = loglik_and_grad(theta, spec, r, covariates)
    return FitResult(params=params, std_errors=se, loglik=ll,
                     converged=converged, spec=spec, theta=theta,
                     theta_cov=cov, n_obs=len(r))


def _theta_covariance(theta, spec, r, covariates, step=1e-5):
    """Inverse observed information from central differences of the
    analytic gradient; None when the Hessian is singular."""
    n = len(theta)
    H = np.empty((n, n))
    for j in range(n):
        tp = theta.copy()
        tp[j] += step
        _, gp = loglik_and_grad(tp, spec, r, covariates)
        tm = theta.copy()
        tm[j] -= step
        _, gm = loglik_and_grad(tm, spec, r, covariates)
        H[:, j] = (gp - gm) / (2.0 * step)
    H = 0.5 * (H + H.T)
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) < 0.0):
        return None
    return cov


def _zp(coef: float, se: float | None):
    if se is None or se <= 0.0 or not np.isfinite(se):
        return None, None, None, None
    z = coef / se
    p = float(erfc(abs(z) / math.sqrt(2.0)))
    lo = coef - 1.959963984540054 * se
    hi = coef + 1.959963984540054 * se
    return z, p, lo, hi


def coefficient_table(fit: FitResult) -> list[dict]:
    """Rows of coef / std err / z / p>|z| / 95% CI mirroring the classic
    regime-switching report layout.

    Constant-transition fits report transition probabilities p[i->j]
    (delta method from the logit rows); covariate fits report the raw
    logit coefficients per transition and covariate.
    """
    params, se, spec = fit.params, fit.std_errors, fit.spec
    m = spec.m
    rows = []
    for i in range(m):
        for label, coef, s in (
            ("const", params.alpha[i], se.alpha[i] if se else None),
            ("sigma2", params.sigma2[i], se.sigma2[i] if se else None),
        ):
            z, p, lo, hi = _zp(coef, s)
            rows.append({"section": f"regime {i + 1}", "name": label,
                         "coef": coef, "std_err": s, "z": z, "p_value": p,
                         "ci_low": lo, "ci_high": hi})
    if not spec.covariates:
        probs, prob_se = _transition_prob_table(fit)
        for i in range(m):
            for j in range(m - 1):
                s = prob_se[i, j] if prob_se is not None else None
                z, p, lo, hi = _zp(probs[i, j], s)
                rows.append({"section": "transitions",
                             "name": f"p[{i + 1}->{j + 1}]",
                             "coef": probs[i, j], "std_err": s, "z": z,
                             "p_value": p, "ci_low": lo, "ci_high": hi})
    else:
        names = ("const",) + tuple(spec.covariates)
        for i in range(m):
            for j in range(m - 1):
                for c, cname in enumerate(names):
                    coef = params.beta[i, j, c]
                    s = se.beta[i, j, c] if se else None
                    z, p, lo, hi = _zp(coef, s)
                    rows.append({"section": "transitions",
                                 "name": f"p[{i + 1}->{j + 1}].{cname}",
                                 "coef": coef, "std_err": s, "z": z,
                                 "p_value": p, "ci_low": lo, "ci_high": hi})
    return rows


def _transition_prob_table(fit: FitResult):
    """Constant transition probabilities and delta-method standard errors."""
    params, spec = fit.params, fit.spec
    m = spec.m
    P = transition_matrix_tvtp(params.beta, np.ones(1))
    if fit.theta_cov is None:
        return P[:, :m - 1], None
    prob_se = np.full((m, m - 1), np.nan)
    offset = 2 * m
    for i in range(m):
        idx = [offset + (i * (m - 1) + j) for j in range(m - 1)]
        sub = fit.theta_cov[np.ix_(idx, idx)]
        p_row = P[i]
        for j in range(m - 1):
            # d p_ij / d beta_ik = p_ij (delta_jk - p_ik)
            grad = np.array([p_row[j] * ((k == j) - p_row[k]) for k in range(m - 1)])
            var = float(grad @ sub @ grad)
            prob_se[i, j] = math.sqrt(max(var, 0.0))
    return P[:, :m - 1], prob_se


# ---------------------------------------------------------------------------
# simulation


def simulate(params: MsmParams, T: int, seed: int = 0,
             covariates: np.ndarray | None = None):
    """Draw a return path from the model.

    When covariates are supplied they drive the transition logits with a
    one-step lag, matching the filter's convention. Returns (returns,
    states, transition matrices).
    """
    rng = np.random.default_rng(seed)
    m = params.m
    P = _build_transitions(params, covariates, T)
    tvtp = params.beta.shape[2] > 1
    pi0 = np.full(m, 1.0 / m) if tvtp else stationary_distribution(P[0])
    states = np.empty(T, dtype=np.int64)
    s = rng.choice(m, p=pi0)
    returns = np.empty(T)
    for t in range(T):
        s = rng.choice(m, p=P[t, s])
        states[t] = s
        returns[t] = params.alpha[s] + math.sqrt(params.sigma2[s]) * rng.standard_normal()
    return returns, states, P
