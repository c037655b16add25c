"""Telescoping Gibbs sampler for panel regressions with mixture heterogeneity.

One sweep runs, in order: allocations (with relabelling so that filled
components come first), filled-component atoms, the optional ``C0``
hyperparameter, the regression block ``(gamma, beta)``, the number of
components ``K``, the Dirichlet hyperparameter ``e0``, then fresh empty
components and weights, and finally the mixture log-likelihood.

Random draws attached to components are always consumed in a label-invariant
order (components sorted by their atom values), so relabelling the initial
state permutes the output state instead of changing it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.stats import truncnorm

from .errors import SamplerError
from .model import PanelData, _loglik_from_stats, unit_stats
from .priors import PriorConfig, log_density_v, log_eppf, sample_K_conditional

log = logging.getLogger(__name__)

INIT_RULES = ("prior-draw", "kmeans-warmstart")
_GAMMA_REJECTION_CAP = 100


@dataclass(frozen=True)
class SamplerSettings:
    n_iter: int = 2000
    n_burnin: int = 100
    thin: int = 1
    s_v: float = 0.5
    seed: int = 0
    init_rule: str = "prior-draw"
    k_init: Optional[int] = None
    store_allocations: bool = False
    adapt_s_v: bool = True

    def __post_init__(self):
        if self.n_iter < 1 or self.n_burnin < 0 or self.thin < 1:
            raise ValueError("need n_iter >= 1, n_burnin >= 0, thin >= 1")
        if not self.s_v > 0:
            raise ValueError("s_v must be positive")
        if self.init_rule not in INIT_RULES:
            raise ValueError(f"init_rule must be one of {INIT_RULES}")
        if self.k_init is not None and self.k_init < 1:
            raise ValueError("k_init must be >= 1")


@dataclass
class ChainState:
    """Mutable sampler state. Labels are 0-based; ``counts`` has length ``K``."""

    K: int
    alpha: np.ndarray
    sigma2: np.ndarray
    weights: np.ndarray
    chi: np.ndarray
    gamma: Optional[float]
    beta: np.ndarray
    e0: float
    C0: float
    s_v: float = 0.5
    iter: int = 0
    counts: np.ndarray = field(default=None)
    kplus: int = 0
    loglik: float = np.nan
    n_accept_v: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.refresh_counts()

    def refresh_counts(self):
        self.counts = np.bincount(self.chi, minlength=self.K)
        self.kplus = int(np.count_nonzero(self.counts))

    def copy(self) -> "ChainState":
        return replace(self, alpha=self.alpha.copy(), sigma2=self.sigma2.copy(),
                       weights=self.weights.copy(), chi=self.chi.copy(),
                       beta=self.beta.copy(), counts=self.counts.copy())

    def check(self):
        assert abs(self.weights.sum() - 1.0) <= 1e-12
        assert self.K >= self.kplus >= 1
        assert np.all(self.counts[: self.kplus] > 0) and np.all(self.counts[self.kplus:] == 0)
        assert np.all(self.sigma2 > 0)


class Design:
    """Data-side quantities reused by every sweep."""

    def __init__(self, data: PanelData):
        self.data = data
        self.T, self.N, self.p = data.T, data.N, data.p
        self.dynamic = data.dynamic
        self.y = data.y
        self.ylag = data.ylag if data.dynamic else None
        self.ZT = np.ascontiguousarray(data.Z.transpose(1, 0, 2))  # (T, N, p)
        cols = []
        if self.dynamic:
            cols.append(self.ylag[:, :, None])
        if self.p:
            cols.append(self.ZT)
        self.d = (1 if self.dynamic else 0) + self.p
        if self.d:
            X = np.concatenate(cols, axis=2)  # (T, N, d)
            self.XtX = np.einsum("tnd,tne->nde", X, X)
            self.Xty = np.einsum("tnd,tn->nd", X, self.y)
            self.Xt1 = X.sum(axis=0)

    def residuals(self, gamma, beta):
        r = self.y
        if self.p:
            r = r - self.ZT @ beta
        if self.dynamic:
            r = r - gamma * self.ylag
        return r


def _canonical(alpha, sigma2):
    return np.lexsort((sigma2, alpha))


def _logsumexp(x, axis=None):
    # scipy's version carries large per-call overhead on the tiny arrays used here
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out.reshape(()) if axis is None else np.squeeze(out, axis=axis)


def _log_dirichlet(rng, shape):
    # Gamma(a) = Gamma(a+1) * U**(1/a); log form keeps tiny shapes from underflowing
    logg = np.log(rng.gamma(shape + 1.0, 1.0)) + np.log(rng.random(shape.size)) / shape
    return logg - _logsumexp(logg)


# --- steps --------------------------------------------------------------------

def step_allocations(state: ChainState, design: Design, rng) -> ChainState:
    """Draw every label from its categorical full conditional, then relabel."""
    r = design.residuals(state.gamma, state.beta)
    m, ss = unit_stats(r)
    with np.errstate(divide="ignore"):
        logw = np.log(state.weights)
    order = _canonical(state.alpha, state.sigma2)
    ll = _loglik_from_stats(m, ss, design.T, state.alpha[order], state.sigma2[order]) + logw[order]
    ll -= ll.max(axis=1, keepdims=True)
    cdf = np.cumsum(np.exp(ll), axis=1)
    u = rng.random(design.N) * cdf[:, -1]
    j = np.minimum((cdf < u[:, None]).sum(axis=1), state.K - 1)
    state.chi = order[j]
    _relabel(state)
    return state


def _relabel(state: ChainState):
    counts = np.bincount(state.chi, minlength=state.K)
    filled = np.flatnonzero(counts > 0)
    perm = np.concatenate([filled, np.flatnonzero(counts == 0)])
    newlabel = np.empty(state.K, dtype=np.int64)
    newlabel[perm] = np.arange(state.K)
    state.chi = newlabel[state.chi]
    state.alpha = state.alpha[perm]
    state.sigma2 = state.sigma2[perm]
    state.weights = state.weights[perm]
    state.counts = counts[perm]
    state.kplus = filled.size


def alpha_conditional(sum_e, n_obs, sigma2, b0, B0):
    """Mean and variance of ``alpha | sigma2`` given ``n_obs`` residuals summing to ``sum_e``."""
    V = 1.0 / (1.0 / B0 + n_obs / sigma2)
    return V * (b0 / B0 + sum_e / sigma2), V


def step_atoms(state: ChainState, design: Design, priors: PriorConfig, rng,
               update_alpha=True, update_sigma2=True) -> ChainState:
    """Conjugate updates of ``alpha_k | sigma2_k`` then ``sigma2_k | alpha_k`` for filled k."""
    ap = priors.atoms
    kp, T = state.kplus, design.T
    chi = state.chi
    r = design.residuals(state.gamma, state.beta)
    m, ss = unit_stats(r)
    n_obs = state.counts[:kp] * T
    order = _canonical(state.alpha[:kp], state.sigma2[:kp])

    alpha, sigma2 = state.alpha.copy(), state.sigma2.copy()
    if update_alpha:
        z = np.empty(kp)
        z[order] = rng.standard_normal(kp)
        s1 = T * np.bincount(chi, weights=m, minlength=state.K)[:kp]
        mean, V = alpha_conditional(s1, n_obs, sigma2[:kp], ap.b0, ap.B0)
        alpha[:kp] = mean + np.sqrt(V) * z
    if update_sigma2:
        g = np.empty(kp)
        g[order] = rng.gamma(ap.c0 + 0.5 * n_obs[order], 1.0)
        dev = np.bincount(chi, weights=ss + T * (m - alpha[chi]) ** 2, minlength=state.K)[:kp]
        sigma2[:kp] = (state.C0 + 0.5 * dev) / g
    state.alpha, state.sigma2 = alpha, sigma2
    return state


def step_hyper_C0(state: ChainState, priors: PriorConfig, rng) -> ChainState:
    """``C0 | sigma2_{1..K+} ~ Gamma(g0 + K+ c0, rate G0 + sum 1/sigma2_k)``."""
    ap = priors.atoms
    if not ap.random_C0:
        return state
    kp = state.kplus
    shape = ap.g0 + kp * ap.c0
    rate = ap.G0 + np.sum(1.0 / state.sigma2[:kp])
    state.C0 = float(rng.gamma(shape, 1.0 / rate))
    return state


def regression_posterior(state: ChainState, design: Design, priors: PriorConfig):
    """Mean and precision of the Gaussian (untruncated) conditional of ``(gamma, beta)``."""
    rp = priors.regression
    w = 1.0 / state.sigma2[state.chi]
    a = state.alpha[state.chi]
    P0 = np.zeros((design.d, design.d))
    m0 = np.zeros(design.d)
    off = 0
    if design.dynamic:
        P0[0, 0] = 1.0 / rp.Gamma0
        m0[0] = rp.gamma0
        off = 1
    if design.p:
        P0[off:, off:] = np.linalg.inv(rp.Omega0)
        m0[off:] = rp.beta0
    P = P0 + np.tensordot(w, design.XtX, axes=(0, 0))
    b = P0 @ m0 + (w[:, None] * (design.Xty - a[:, None] * design.Xt1)).sum(axis=0)
    return P, b


def step_regression(state: ChainState, design: Design, priors: PriorConfig, rng) -> ChainState:
    """Joint Gaussian draw of ``(gamma, beta)``; ``|gamma| < 1`` by rejection.

    After 100 rejected proposals the block falls back to one exact Gibbs pass:
    ``gamma | beta`` from its truncated-normal conditional, then ``beta | gamma``.
    """
    if design.d == 0:
        return state
    P, b = regression_posterior(state, design, priors)
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise SamplerError("posterior precision of (gamma, beta) is not positive definite") from None
    mu = np.linalg.solve(L.T, np.linalg.solve(L, b))
    if not design.dynamic:
        state.beta = mu + np.linalg.solve(L.T, rng.standard_normal(design.d))
        return state
    for _ in range(_GAMMA_REJECTION_CAP):
        x = mu + np.linalg.solve(L.T, rng.standard_normal(design.d))
        if abs(x[0]) < 1.0:
            state.gamma, state.beta = float(x[0]), x[1:]
            return state
    log.debug("gamma rejection cap hit at iteration %d; using conditional draws", state.iter)
    state.gamma, state.beta = _gamma_beta_gibbs(mu, P, state.beta, rng)
    return state


def _gamma_beta_gibbs(mu, P, beta, rng):
    dev = beta - mu[1:]
    P00 = P[0, 0]
    cmean = mu[0] - P[0, 1:] @ dev / P00
    sd = 1.0 / np.sqrt(P00)
    g = float(truncnorm.rvs((-1 - cmean) / sd, (1 - cmean) / sd, loc=cmean, scale=sd,
                            random_state=rng))
    g = float(np.clip(g, np.nextafter(-1.0, 0.0), np.nextafter(1.0, 0.0)))
    if mu.size == 1:
        return g, beta
    Prr = P[1:, 1:]
    L = np.linalg.cholesky(Prr)
    bmean = mu[1:] - np.linalg.solve(Prr, P[1:, 0] * (g - mu[0]))
    return g, bmean + np.linalg.solve(L.T, rng.standard_normal(mu.size - 1))


def step_K(state: ChainState, priors: PriorConfig, rng) -> ChainState:
    counts = state.counts[: state.kplus]
    state.K = sample_K_conditional(priors.k_prior, state.kplus, counts, priors.weights,
                                   state.e0, int(counts.sum()), rng)
    return state


def _log_target_e0(e0, counts, K, wp):
    v = e0 / K if wp.mode == "dynamic" else e0
    return log_eppf(counts, K, v) + log_density_v(e0, wp)


def step_v(state: ChainState, priors: PriorConfig, rng) -> ChainState:
    """Random-walk MH on ``log e0`` (the Dirichlet parameter is ``e0`` or ``e0/K``)."""
    wp = priors.weights
    if not wp.random:
        return state
    counts = state.counts[: state.kplus]
    old = state.e0
    new = float(np.exp(np.log(old) + state.s_v * rng.standard_normal()))
    log_ratio = (_log_target_e0(new, counts, state.K, wp) + np.log(new)
                 - _log_target_e0(old, counts, state.K, wp) - np.log(old))
    if np.log(rng.random()) < log_ratio:
        state.e0 = new
        state.n_accept_v += 1
    return state


def step_weights_and_empties(state: ChainState, priors: PriorConfig, rng) -> ChainState:
    """Resize to the new K with empty atoms from the prior, then draw Dirichlet weights."""
    kp, K = state.kplus, state.K
    n_empty = K - kp
    a_e, s_e = priors.atoms.sample(rng, n_empty, C0=state.C0)
    state.alpha = np.concatenate([state.alpha[:kp], a_e])
    state.sigma2 = np.concatenate([state.sigma2[:kp], s_e])
    state.counts = np.concatenate([state.counts[:kp], np.zeros(n_empty, dtype=np.int64)])
    wp = priors.weights
    v = state.e0 / K if wp.mode == "dynamic" else state.e0
    order = np.concatenate([_canonical(state.alpha[:kp], state.sigma2[:kp]),
                            np.arange(kp, K)])
    logw = np.empty(K)
    logw[order] = _log_dirichlet(rng, v + state.counts[order].astype(float))
    w = np.exp(logw)
    state.weights = w / w.sum()
    return state


def mixture_loglik(state: ChainState, design: Design) -> float:
    r = design.residuals(state.gamma, state.beta)
    m, ss = unit_stats(r)
    with np.errstate(divide="ignore"):
        logw = np.log(state.weights)
    ll = _loglik_from_stats(m, ss, design.T, state.alpha, state.sigma2) + logw[None, :]
    return float(_logsumexp(ll, axis=1).sum())


def sweep(state: ChainState, design: Design, priors: PriorConfig, rng,
          compute_loglik=True) -> ChainState:
    step_allocations(state, design, rng)
    step_atoms(state, design, priors, rng)
    step_hyper_C0(state, priors, rng)
    step_regression(state, design, priors, rng)
    step_K(state, priors, rng)
    step_v(state, priors, rng)
    step_weights_and_empties(state, priors, rng)
    if compute_loglik:
        state.loglik = mixture_loglik(state, design)
    state.iter += 1
    return state


# --- initialisation -------------------------------------------------------------

def initial_state(design: Design, priors: PriorConfig, settings: SamplerSettings, rng) -> ChainState:
    rp, ap, wp = priors.regression, priors.atoms, priors.weights
    N = design.N
    e0 = wp.initial_e0()
    C0 = ap.C0
    if settings.init_rule == "kmeans-warmstart":
        return _kmeans_state(design, priors, settings, rng, e0, C0)
    K = settings.k_init or priors.k_prior.mode()
    alpha, sigma2 = ap.sample(rng, K, C0=C0)
    v = e0 / K if wp.mode == "dynamic" else e0
    w = np.exp(_log_dirichlet(rng, np.full(K, float(v))))
    chi = rng.integers(0, K, size=N)
    gamma = float(np.clip(rp.gamma0, -0.99, 0.99)) if design.dynamic else None
    return ChainState(K=K, alpha=alpha, sigma2=sigma2, weights=w / w.sum(), chi=chi,
                      gamma=gamma, beta=rp.beta0.copy(), e0=e0, C0=C0, s_v=settings.s_v)


def within_regression(design: Design):
    """Fixed-effects least squares for ``(gamma, beta)``; used only to start chains."""
    rp_gamma, beta = (0.0 if design.dynamic else None), np.zeros(design.p)
    if design.d == 0 or design.T < 2:
        return rp_gamma, beta
    cols = ([design.ylag[:, :, None]] if design.dynamic else []) + ([design.ZT] if design.p else [])
    X = np.concatenate(cols, axis=2)
    Xd = (X - X.mean(axis=0)).reshape(-1, design.d)
    yd = (design.y - design.y.mean(axis=0)).reshape(-1)
    coef, *_ = np.linalg.lstsq(Xd, yd, rcond=None)
    if design.dynamic:
        return float(np.clip(coef[0], -0.95, 0.95)), coef[1:]
    return None, coef


def _kmeans_state(design, priors, settings, rng, e0, C0):
    from sklearn.cluster import KMeans

    gamma, beta = within_regression(design)
    r = design.residuals(gamma, beta)
    m, ss = unit_stats(r)
    k = min(settings.k_init or 10, np.unique(m).size)
    km = KMeans(n_clusters=k, n_init=10, random_state=int(rng.integers(2**31 - 1)))
    labels = km.fit_predict(m[:, None])
    counts = np.bincount(labels, minlength=k)
    keep = np.flatnonzero(counts > 0)
    remap = np.full(k, -1)
    remap[keep] = np.arange(keep.size)
    chi = remap[labels]
    K = keep.size
    alpha = np.bincount(chi, weights=m, minlength=K) / counts[keep]
    T = design.T
    dev = np.bincount(chi, weights=ss + T * (m - alpha[chi]) ** 2, minlength=K)
    total_var = max(float(np.var(r)), 1e-8)
    sigma2 = np.maximum(dev / (counts[keep] * T), 1e-3 * total_var)
    w = counts[keep] / design.N
    return ChainState(K=K, alpha=alpha, sigma2=sigma2, weights=w, chi=chi, gamma=gamma,
                      beta=np.asarray(beta, float), e0=e0, C0=C0, s_v=settings.s_v)


# --- chain driver -----------------------------------------------------------------

@dataclass
class DrawStore:
    """Retained draws. Component blocks are stored per draw with length ``K``;
    the first ``kplus`` components of each draw are the filled ones."""

    dynamic: bool
    p: int
    K: list = field(default_factory=list)
    kplus: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    e0: list = field(default_factory=list)
    C0: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    sigma2: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    chi: Optional[list] = None
    s_v: Optional[float] = None
    accept_rate_v: Optional[float] = None

    def __len__(self):
        return len(self.K)

    def record(self, state: ChainState, store_allocations=False):
        self.K.append(int(state.K))
        self.kplus.append(int(state.kplus))
        self.gamma.append(np.nan if state.gamma is None else float(state.gamma))
        self.beta.append(np.array(state.beta, dtype=float))
        self.e0.append(float(state.e0))
        self.C0.append(float(state.C0))
        self.alpha.append(state.alpha.copy())
        self.sigma2.append(state.sigma2.copy())
        self.weights.append(state.weights.copy())
        self.loglik.append(float(state.loglik))
        if store_allocations:
            if self.chi is None:
                self.chi = []
            self.chi.append(state.chi.copy())

    def subset(self, idx) -> "DrawStore":
        idx = list(idx)
        out = DrawStore(dynamic=self.dynamic, p=self.p, s_v=self.s_v, accept_rate_v=self.accept_rate_v)
        for name in ("K", "kplus", "gamma", "beta", "e0", "C0", "alpha", "sigma2", "weights", "loglik"):
            src = getattr(self, name)
            setattr(out, name, [src[i] for i in idx])
        if self.chi is not None:
            out.chi = [self.chi[i] for i in idx]
        return out

    def beta_matrix(self) -> np.ndarray:
        return np.array(self.beta, dtype=float).reshape(len(self), self.p)


def run_chain(data: PanelData, priors: PriorConfig, settings: SamplerSettings, rng=None,
              init: Optional[ChainState] = None) -> DrawStore:
    """Run ``n_burnin + n_iter`` sweeps and keep every ``thin``-th post-burn-in state."""
    if rng is None:
        rng = np.random.default_rng(settings.seed)
    if data.p != priors.regression.p:
        raise ValueError(f"regression prior has p={priors.regression.p}, data has p={data.p}")
    design = Design(data)
    state = init.copy() if init is not None else initial_state(design, priors, settings, rng)
    store = DrawStore(dynamic=data.dynamic, p=data.p)
    adapt = settings.adapt_s_v and priors.weights.random
    batch_accepts = 0
    total = settings.n_burnin + settings.n_iter
    for it in range(total):
        before = state.n_accept_v
        try:
            sweep(state, design, priors, rng, compute_loglik=it >= settings.n_burnin)
        except SamplerError as exc:
            raise SamplerError(str(exc), iteration=it, snapshot=state.copy()) from exc
        except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            raise SamplerError(f"{type(exc).__name__}: {exc}", iteration=it,
                               snapshot=state.copy()) from exc
        if it < settings.n_burnin:
            batch_accepts += state.n_accept_v - before
            if adapt and (it + 1) % 50 == 0:
                state.s_v *= float(np.exp(batch_accepts / 50.0 - 0.44))
                batch_accepts = 0
            if it + 1 == settings.n_burnin:
                state.n_accept_v = 0
            continue
        if (it - settings.n_burnin) % settings.thin == 0:
            store.record(state, settings.store_allocations)
    store.s_v = state.s_v
    store.accept_rate_v = state.n_accept_v / settings.n_iter if priors.weights.random else None
    return store
