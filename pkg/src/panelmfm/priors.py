"""Priors on K, the Dirichlet concentration, atoms and regression coefficients.

Everything is evaluated in log space through ``gammaln``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import betaln, gammaln, logsumexp

from .errors import ConfigError, SamplerError

K_TAIL_RATIO = 1e-12
K_ENUM_CAP = 10_000
_BLOCK = 64

K_FAMILIES = ("bnb", "poisson", "geometric", "negbin", "uniform", "degenerate")


@dataclass(frozen=True)
class KPrior:
    """Prior on the number of components.

    Unbounded families are placed on ``K - 1`` (translated to support
    ``{1, 2, ...}``). ``uniform`` and ``degenerate`` are stated directly on K:
    ``uniform(lo, hi)`` is uniform on ``{lo, ..., hi}``.
    """

    family: str
    params: tuple

    def __post_init__(self):
        f, p = self.family, tuple(float(x) for x in self.params)
        need = {"bnb": 3, "poisson": 1, "geometric": 1, "negbin": 2, "uniform": 2, "degenerate": 1}
        if f not in need:
            raise ConfigError(f"unknown K prior family {f!r}; choose from {K_FAMILIES}")
        if len(p) != need[f]:
            raise ConfigError(f"K prior {f} takes {need[f]} parameter(s)")
        if f in ("bnb", "poisson", "negbin") and min(p) <= 0:
            raise ConfigError(f"{f} parameters must be positive")
        if f == "geometric" and not 0 < p[0] <= 1:
            raise ConfigError("geometric q must lie in (0, 1]")
        if f == "negbin" and not 0 < p[1] <= 1:
            raise ConfigError("negbin p must lie in (0, 1]")
        if f == "uniform" and not (p[0] == int(p[0]) and p[1] == int(p[1]) and 1 <= p[0] <= p[1]):
            raise ConfigError("uniform bounds must be integers with 1 <= lo <= hi")
        if f == "degenerate" and not (p[0] == int(p[0]) and p[0] >= 1):
            raise ConfigError("degenerate k0 must be a positive integer")
        object.__setattr__(self, "params", p)

    # convenience constructors
    @classmethod
    def bnb(cls, a_lambda, a_pi, b_pi):
        return cls("bnb", (a_lambda, a_pi, b_pi))

    @classmethod
    def poisson(cls, lam):
        return cls("poisson", (lam,))

    @classmethod
    def geometric(cls, q):
        return cls("geometric", (q,))

    @classmethod
    def negbin(cls, r, p):
        return cls("negbin", (r, p))

    @classmethod
    def uniform(cls, lo, hi):
        return cls("uniform", (lo, hi))

    @classmethod
    def degenerate(cls, k0):
        return cls("degenerate", (k0,))

    @property
    def support(self):
        if self.family == "uniform":
            return int(self.params[0]), int(self.params[1])
        if self.family == "degenerate":
            return int(self.params[0]), int(self.params[0])
        return 1, None

    def log_pmf(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        m = k - 1.0
        f, p = self.family, self.params
        with np.errstate(divide="ignore", invalid="ignore"):
            if f == "bnb":
                a_l, a_p, b_p = p
                out = (gammaln(a_l + m) + betaln(a_l + a_p, m + b_p)
                       - gammaln(a_l) - betaln(a_p, b_p) - gammaln(m + 1.0))
            elif f == "poisson":
                out = m * np.log(p[0]) - p[0] - gammaln(m + 1.0)
            elif f == "geometric":
                q = p[0]
                out = np.log(q) + (m * np.log1p(-q) if q < 1 else np.where(m == 0, 0.0, -np.inf))
            elif f == "negbin":
                r, pr = p
                tail = m * np.log1p(-pr) if pr < 1 else np.where(m == 0, 0.0, -np.inf)
                out = gammaln(r + m) - gammaln(r) - gammaln(m + 1.0) + r * np.log(pr) + tail
            elif f == "uniform":
                lo, hi = p
                out = np.where((k >= lo) & (k <= hi), -np.log(hi - lo + 1.0), -np.inf)
            else:
                out = np.where(k == p[0], 0.0, -np.inf)
        out = np.where((k >= 1) & (k == np.floor(k)), out, -np.inf)
        return out

    def sample(self, rng, size=None):
        f, p = self.family, self.params
        if f == "bnb":
            pi = rng.beta(p[1], p[2], size=size)
            m = rng.negative_binomial(p[0], pi, size=size)
        elif f == "poisson":
            m = rng.poisson(p[0], size=size)
        elif f == "geometric":
            m = rng.geometric(p[0], size=size) - 1
        elif f == "negbin":
            m = rng.negative_binomial(p[0], p[1], size=size)
        elif f == "uniform":
            return rng.integers(int(p[0]), int(p[1]) + 1, size=size)
        else:
            return np.full(size, int(p[0])) if size is not None else int(p[0])
        return m + 1

    def mode(self) -> int:
        lo, hi = self.support
        if hi is not None:
            return lo
        ks = np.arange(1, K_ENUM_CAP + 1)
        return int(ks[np.argmax(self.log_pmf(ks))])


def log_pmf_K(kp: KPrior, k) -> float:
    """``log P(K = k)``; ``-inf`` outside the support."""
    return float(kp.log_pmf(k))


@dataclass(frozen=True)
class WeightPrior:
    """Symmetric Dirichlet concentration: ``v = e0`` (static) or ``e0 / K`` (dynamic).

    ``e0`` is either fixed or Gamma distributed. The Gamma is stored with a
    *rate*; pass ``parameterization='scale'`` to give ``e0_scale_or_rate`` as a
    scale instead.
    """

    mode: str = "static"
    e0: Optional[float] = 1.0
    e0_shape: Optional[float] = None
    e0_rate: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("static", "dynamic"):
            raise ConfigError("weight prior mode must be 'static' or 'dynamic'")
        if self.random:
            if self.e0_shape <= 0 or self.e0_rate is None or self.e0_rate <= 0:
                raise ConfigError("e0 Gamma hyperprior needs positive shape and rate")
        elif self.e0 is None or not self.e0 > 0:
            raise ConfigError("fixed e0 must be positive")

    @classmethod
    def gamma(cls, mode, shape, value, parameterization="rate", init=None):
        if parameterization not in ("rate", "scale"):
            raise ConfigError("parameterization must be 'rate' or 'scale'")
        rate = value if parameterization == "rate" else 1.0 / value
        return cls(mode=mode, e0=init, e0_shape=float(shape), e0_rate=float(rate))

    @property
    def random(self) -> bool:
        return self.e0_shape is not None

    def v(self, e0, K):
        return e0 / K if self.mode == "dynamic" else e0 * np.ones_like(np.asarray(K, dtype=float))

    def sample_e0(self, rng, size=None):
        if not self.random:
            return np.full(size, self.e0) if size is not None else self.e0
        return rng.gamma(self.e0_shape, 1.0 / self.e0_rate, size=size)

    def initial_e0(self) -> float:
        if self.e0 is not None:
            return float(self.e0)
        return self.e0_shape / self.e0_rate


def log_density_v(e0: float, wp: WeightPrior) -> float:
    """Log prior density of the concentration hyperparameter ``e0``."""
    if not e0 > 0:
        return -np.inf
    if not wp.random:
        return 0.0 if e0 == wp.e0 else -np.inf
    a, r = wp.e0_shape, wp.e0_rate
    return float(a * np.log(r) - gammaln(a) + (a - 1.0) * np.log(e0) - r * e0)


@dataclass(frozen=True)
class AtomPrior:
    """``alpha ~ N(b0, B0)``, ``sigma2 ~ InvGamma(c0, C0)``, optionally ``C0 ~ Gamma(g0, rate=G0)``."""

    b0: float
    B0: float
    c0: float
    C0: float
    g0: Optional[float] = None
    G0: Optional[float] = None

    def __post_init__(self):
        if not (self.B0 > 0 and self.c0 > 0 and self.C0 > 0):
            raise ConfigError("atom prior needs B0, c0, C0 > 0")
        if (self.g0 is None) != (self.G0 is None):
            raise ConfigError("C0 hyperprior needs both g0 and G0")
        if self.g0 is not None and not (self.g0 > 0 and self.G0 > 0):
            raise ConfigError("C0 hyperprior needs g0, G0 > 0")

    @property
    def random_C0(self) -> bool:
        return self.g0 is not None

    @classmethod
    def from_data(cls, data, c0=2.0, g0=0.2, random_C0=True):
        """Range-based default: centre and spread from the unit time averages of y.

        ``b0`` is the midrange, ``B0 = R**2``, and either ``C0 ~ G(g0, 10/R**2)``
        or ``C0`` fixed at the prior mean of that Gamma.
        """
        ybar = data.y.mean(axis=0)
        lo, hi = float(ybar.min()), float(ybar.max())
        R = hi - lo
        if not R > 0:
            R = max(float(np.std(data.y)), 1.0)
        G0 = 10.0 / R ** 2
        C0 = g0 / G0
        if random_C0:
            return cls(b0=0.5 * (lo + hi), B0=R ** 2, c0=c0, C0=C0, g0=g0, G0=G0)
        return cls(b0=0.5 * (lo + hi), B0=R ** 2, c0=c0, C0=C0)

    def sample(self, rng, n, C0=None):
        C0 = self.C0 if C0 is None else C0
        alpha = self.b0 + np.sqrt(self.B0) * rng.standard_normal(n)
        sigma2 = C0 / rng.gamma(self.c0, 1.0, size=n)
        return alpha, sigma2


@dataclass(frozen=True)
class RegressionPrior:
    """``gamma ~ N(gamma0, Gamma0)`` truncated to ``(-1, 1)``; ``beta ~ N_p(beta0, Omega0)``."""

    beta0: np.ndarray
    Omega0: np.ndarray
    gamma0: float = 0.0
    Gamma0: float = 1.0

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta0, dtype=float)).reshape(-1)
        O = np.asarray(self.Omega0, dtype=float).reshape(b.size, b.size)
        if not self.Gamma0 > 0:
            raise ConfigError("Gamma0 must be positive")
        if b.size:
            if not np.allclose(O, O.T):
                raise ConfigError("Omega0 must be symmetric")
            try:
                np.linalg.cholesky(O)
            except np.linalg.LinAlgError:
                raise ConfigError("Omega0 must be positive definite") from None
        object.__setattr__(self, "beta0", b)
        object.__setattr__(self, "Omega0", O)

    @classmethod
    def default(cls, p, omega=100.0, gamma0=0.0, Gamma0=1.0):
        return cls(beta0=np.zeros(p), Omega0=omega * np.eye(p), gamma0=gamma0, Gamma0=Gamma0)

    @property
    def p(self) -> int:
        return self.beta0.size

    def sample_gamma(self, rng):
        from scipy.stats import truncnorm

        sd = np.sqrt(self.Gamma0)
        a, b = (-1 - self.gamma0) / sd, (1 - self.gamma0) / sd
        return float(truncnorm.rvs(a, b, loc=self.gamma0, scale=sd, random_state=rng))

    def sample_beta(self, rng):
        if self.p == 0:
            return np.zeros(0)
        L = np.linalg.cholesky(self.Omega0)
        return self.beta0 + L @ rng.standard_normal(self.p)


@dataclass(frozen=True)
class PriorConfig:
    k_prior: KPrior
    weights: WeightPrior
    atoms: AtomPrior
    regression: RegressionPrior


# --- partition probabilities -------------------------------------------------

def log_eppf(counts, K, v) -> float:
    """Log probability of an (unlabelled) partition with cluster sizes ``counts``.

    ``K!/(K-k)! * Gamma(vK)/Gamma(vK+N) * prod_j Gamma(N_j+v)/Gamma(v)``; the
    falling factorial counts the labelled allocations that induce the same
    partition. ``-inf`` when ``K < k``.
    """
    return float(_log_eppf_vec(np.asarray(counts, dtype=float), np.asarray([K], float),
                               np.asarray([v], float))[0])


def _log_eppf_vec(counts, K, v):
    k = counts.size
    N = counts.sum()
    with np.errstate(invalid="ignore"):
        out = (gammaln(K + 1.0) - gammaln(K - k + 1.0)
               + gammaln(v * K) - gammaln(v * K + N)
               + gammaln(counts[None, :] + v[:, None]).sum(axis=1) - k * gammaln(v))
    return np.where(K >= k, out, -np.inf)


def K_conditional(kp: KPrior, counts, wp: WeightPrior, e0: float):
    """Support and normalized log-probabilities of ``K`` given the partition.

    Enumerates ``K = kplus, kplus+1, ...`` until the running unnormalized term
    falls below ``1e-12`` of the accumulated mass while decreasing, capped at
    10**4 terms.
    """
    counts = np.asarray(counts, dtype=float)
    kplus = counts.size
    lo, hi = kp.support
    start = max(kplus, lo)
    if hi is not None and hi < start:
        raise SamplerError(f"K prior has no mass at K >= K+ = {kplus}")
    stop = start + K_ENUM_CAP if hi is None else min(hi + 1, start + K_ENUM_CAP)
    chunks = []
    total = -np.inf
    k0 = start
    converged = hi is not None and hi + 1 <= stop
    prev_last = -np.inf
    while k0 < stop:
        Ks = np.arange(k0, min(k0 + _BLOCK, stop), dtype=float)
        lp = kp.log_pmf(Ks) + _log_eppf_vec(counts, Ks, wp.v(e0, Ks))
        chunks.append(lp)
        m = lp.max()
        if np.isfinite(m):
            total = np.logaddexp(total, m + np.log(np.exp(lp - m).sum()))
        k0 = int(Ks[-1]) + 1
        if hi is None:
            last = lp[-1]
            decreasing = last <= (lp[-2] if lp.size > 1 else prev_last)
            if np.isfinite(total) and decreasing and last - total < np.log(K_TAIL_RATIO):
                converged = True
                break
            prev_last = last
    lp = np.concatenate(chunks)
    if not np.isfinite(total):
        raise SamplerError(f"K conditional has zero mass for K+ = {kplus}")
    if not converged:
        raise SamplerError(
            f"K conditional tail not converged after {K_ENUM_CAP} terms "
            f"(K+={kplus}, N={int(counts.sum())}, e0={e0:.4g})")
    Ks = np.arange(start, start + lp.size)
    return Ks, lp - total


def sample_K_conditional(kp: KPrior, kplus: int, counts, wp: WeightPrior, e0: float,
                         N: int, rng) -> int:
    counts = np.asarray(counts)
    if counts.size != kplus or counts.sum() != N or np.any(counts < 1):
        raise ValueError("counts must hold kplus positive sizes summing to N")
    Ks, lp = K_conditional(kp, counts, wp, e0)
    cdf = np.cumsum(np.exp(lp))
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return int(Ks[min(idx, Ks.size - 1)])


# --- induced prior on the number of clusters -------------------------------

def log_dirichlet_rows(rng, v, K):
    """Log of Dirichlet(v, ..., v) rows, robust for tiny ``v``.

    ``G = Gamma(v+1) * U**(1/v)`` is Gamma(v) distributed; working with
    ``log G`` avoids underflow to an all-zero row.
    """
    v = np.asarray(v, dtype=float).reshape(-1, 1)
    n = v.shape[0]
    logg = np.log(rng.gamma(v + 1.0, 1.0, size=(n, K))) + np.log(rng.random((n, K))) / v
    return logg - logsumexp(logg, axis=1, keepdims=True)


def induced_kplus_mean(kp: KPrior, wp: WeightPrior, N: int, nsim: int, rng) -> float:
    """Monte Carlo estimate of the prior mean of the number of filled components."""
    if nsim < 1:
        raise ValueError("nsim must be >= 1")
    K = np.asarray(kp.sample(rng, size=nsim), dtype=np.int64)
    e0 = np.asarray(wp.sample_e0(rng, size=nsim), dtype=float)
    v = wp.v(e0, K)
    kplus = np.empty(nsim)
    max_cells = 2_000_000
    for k in np.unique(K):
        idx = np.flatnonzero(K == k)
        step = max(1, max_cells // int(k))
        for s in range(0, idx.size, step):
            sub = idx[s:s + step]
            if k == 1:
                kplus[sub] = 1.0
                continue
            w = np.exp(log_dirichlet_rows(rng, v[sub], int(k)))
            w /= w.sum(axis=1, keepdims=True)
            c = rng.multinomial(N, w)
            kplus[sub] = np.count_nonzero(c, axis=1)
    return float(kplus.mean())


def check_assumption_A3(kp: KPrior, N: int, A: float, c3: float, kmax: int) -> bool:
    """True iff ``P(K=k+1)/P(K=k) <= c3 * N**(-A)`` for every ``k <= kmax``."""
    if not (A > 0 and c3 > 0):
        raise ValueError("A and c3 must be positive")
    ks = np.arange(1, kmax + 1, dtype=float)
    lp, lp_next = kp.log_pmf(ks), kp.log_pmf(ks + 1.0)
    bound = np.log(c3) - A * np.log(N)
    for a, b in zip(lp, lp_next):
        if not np.isfinite(b):
            continue
        if not np.isfinite(a):
            return False
        if b - a > bound + 1e-12:
            return False
    return True
