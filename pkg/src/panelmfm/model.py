"""Domain types and the Gaussian mixture likelihood for dynamic panels.

Conventions used throughout the package:

* ``y`` has shape ``(T, N)`` (time by unit), ``y0`` shape ``(N,)``.
* ``Z`` has shape ``(N, T, p)`` and is already lag-aligned, i.e. ``Z[i, t]``
  holds ``z_{i, t-h}``.  Kernels never see ``h``.
* Component labels are 0-based in memory (``0..K-1``); files use 1-based labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


def _as_float_array(x, ndim, name):
    a = np.asarray(x, dtype=float)
    if a.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimension(s), got shape {a.shape}")
    return a


@dataclass(frozen=True)
class PanelData:
    """Balanced panel ``(y, y0, Z)``.

    ``dynamic`` marks that the lagged outcome enters the regression, in which
    case ``y0`` is mandatory. ``h`` is kept as metadata only.
    """

    y: np.ndarray
    Z: np.ndarray
    y0: Optional[np.ndarray] = None
    h: int = 0
    dynamic: bool = False
    unit_ids: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        y = _as_float_array(self.y, 2, "y")
        T, N = y.shape
        Z = np.asarray(self.Z, dtype=float)
        if Z.size == 0:
            Z = np.zeros((N, T, 0))
        if Z.ndim != 3 or Z.shape[:2] != (N, T):
            raise ValueError(f"Z must have shape (N, T, p) = ({N}, {T}, p), got {Z.shape}")
        if T < 1 or N < 1:
            raise ValueError("panel needs T >= 1 and N >= 1")
        y0 = self.y0
        if y0 is not None:
            y0 = _as_float_array(y0, 1, "y0")
            if y0.shape != (N,):
                raise ValueError(f"y0 must have length N={N}")
            if not np.all(np.isfinite(y0)):
                raise ValueError("y0 has non-finite entries")
        elif self.dynamic:
            raise ValueError("dynamic panel requires y0")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(Z))):
            raise ValueError("panel has non-finite entries")
        if self.h < 0:
            raise ValueError("lag offset h must be nonnegative")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "y0", y0)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def N(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.Z.shape[2]

    @property
    def ylag(self) -> np.ndarray:
        """``(T, N)`` matrix of ``y_{i,t-1}`` with ``y0`` in the first row."""
        y0 = self.y0 if self.y0 is not None else np.zeros(self.N)
        return np.vstack([y0[None, :], self.y[:-1]])

    def select_covariates(self, columns) -> "PanelData":
        """Copy of the panel keeping only the covariate columns in ``columns``."""
        columns = list(columns)
        return PanelData(
            y=self.y,
            Z=self.Z[:, :, columns],
            y0=self.y0,
            h=self.h,
            dynamic=self.dynamic,
            unit_ids=self.unit_ids,
        )

    def as_static(self) -> "PanelData":
        return PanelData(y=self.y, Z=self.Z, y0=self.y0, h=self.h, dynamic=False,
                         unit_ids=self.unit_ids)


@dataclass(frozen=True)
class MixingMeasure:
    """Finite atomic measure on ``(alpha, sigma2)``; atoms need not be distinct."""

    alpha: np.ndarray
    sigma2: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if not (alpha.shape == sigma2.shape == w.shape) or alpha.ndim != 1 or alpha.size == 0:
            raise ValueError("alpha, sigma2 and weights must be equal-length nonempty vectors")
        _check_atoms(alpha, sigma2, w)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "weights", w)

    @property
    def K(self) -> int:
        return self.alpha.size

    @property
    def atoms(self):
        return list(zip(self.alpha.tolist(), self.sigma2.tolist()))


def _check_atoms(alpha, sigma2, w):
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(sigma2))):
        raise ValueError("atoms must be finite")
    if np.any(sigma2 <= 0):
        raise ValueError("atom variances must be positive")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights must be a probability vector (sum={w.sum()!r})")


@dataclass(frozen=True)
class ModelParams:
    """Regression coefficients plus the atomic mixing measure.

    ``gamma`` is ``None`` for static panels.
    """

    beta: np.ndarray
    alpha: np.ndarray
    sigma2: np.ndarray
    weights: np.ndarray
    gamma: Optional[float] = None

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).reshape(-1)
        m = MixingMeasure(self.alpha, self.sigma2, self.weights)
        if self.gamma is not None:
            g = float(self.gamma)
            if not abs(g) < 1:
                raise ValueError("gamma must lie in (-1, 1)")
            object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", m.alpha)
        object.__setattr__(self, "sigma2", m.sigma2)
        object.__setattr__(self, "weights", m.weights)

    @property
    def K(self) -> int:
        return self.alpha.size

    @property
    def atoms(self):
        return list(zip(self.alpha.tolist(), self.sigma2.tolist()))

    @property
    def measure(self) -> MixingMeasure:
        return MixingMeasure(self.alpha, self.sigma2, self.weights)


@dataclass(frozen=True)
class Allocations:
    """Latent labels ``chi`` (0-based) for ``K`` components."""

    chi: np.ndarray
    K: int

    def __post_init__(self):
        chi = np.asarray(self.chi, dtype=np.int64).reshape(-1)
        if chi.size and (chi.min() < 0 or chi.max() >= self.K):
            raise ValueError("allocation labels out of range")
        object.__setattr__(self, "chi", chi)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.chi, minlength=self.K)

    @property
    def kplus(self) -> int:
        return int(np.count_nonzero(self.counts))


def residuals(data: PanelData, gamma, beta) -> np.ndarray:
    """``y_it - gamma*y_{i,t-1} - beta'z_{i,t-h}`` as a ``(T, N)`` matrix."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float)).reshape(-1)
    if beta.size != data.p:
        raise ValueError(f"beta has length {beta.size}, panel has p={data.p}")
    if data.dynamic and gamma is None:
        raise ValueError("dynamic panel needs gamma")
    if not data.dynamic and gamma is not None:
        raise ValueError("static panel takes no gamma")
    r = data.y - (data.Z @ beta).T if data.p else data.y.copy()
    if data.dynamic:
        r = r - gamma * data.ylag
    return r


def unit_stats(r: np.ndarray):
    """Per-unit mean and within-unit sum of squares of a ``(T, N)`` residual matrix."""
    m = r.mean(axis=0)
    ss = ((r - m) ** 2).sum(axis=0)
    return m, ss


def component_loglik(r: np.ndarray, alpha, sigma2) -> np.ndarray:
    """``(N, K)`` matrix of unit log-likelihoods under each atom.

    Uses the decomposition ``sum_t (r_t - a)^2 = SS + T (rbar - a)^2`` which
    stays accurate for large residual magnitudes.
    """
    T = r.shape[0]
    m, ss = unit_stats(r)
    return _loglik_from_stats(m, ss, T, np.asarray(alpha, float), np.asarray(sigma2, float))


def _loglik_from_stats(m, ss, T, alpha, sigma2):
    dev = ss[:, None] + T * (m[:, None] - alpha[None, :]) ** 2
    return -0.5 * T * (LOG_2PI + np.log(sigma2))[None, :] - dev / (2.0 * sigma2[None, :])


def log_component_likelihood(data: PanelData, i: int, gamma, beta, theta) -> float:
    theta_alpha, theta_sigma2 = theta
    if not theta_sigma2 > 0:
        raise ValueError("component variance must be positive")
    r = residuals(data, gamma, beta)[:, i]
    e = r - theta_alpha
    return float(np.sum(-0.5 * (LOG_2PI + np.log(theta_sigma2)) - e * e / (2.0 * theta_sigma2)))


def log_mixture_likelihood(data: PanelData, params: ModelParams) -> float:
    r = residuals(data, params.gamma, params.beta)
    return mixture_loglik_from_residuals(r, params.alpha, params.sigma2, params.weights)


def mixture_loglik_from_residuals(r, alpha, sigma2, weights) -> float:
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    ll = component_loglik(r, alpha, sigma2) + logw[None, :]
    return float(np.sum(logsumexp(ll, axis=1)))
