"""Simulation of panels from the hierarchical mixture model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .model import Allocations, MixingMeasure, ModelParams, PanelData

MIN_SIGMA2 = 1e-10
Y0_RULES = ("zero", "stationary", "user")


@dataclass(frozen=True)
class DgpConfig:
    """Design of one simulated panel.

    The covariate law ``N(covariate_mean, covariate_sd**2)`` is used for every
    design; only the omitted-covariate experiment states it explicitly.
    ``y0_rule='stationary'`` draws ``y_i0`` from the stationary law of the
    unit's AR(1) given its atom; it is ignored for static designs.
    """

    true_params: ModelParams
    N: int
    T: int
    covariate_mean: float = 1.0
    covariate_sd: float = 1.0
    y0_rule: str = "stationary"
    y0: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if self.N < 1 or self.T < 1:
            raise ConfigError("N and T must be >= 1")
        if self.covariate_sd < 0:
            raise ConfigError("covariate_sd must be nonnegative")
        if self.y0_rule not in Y0_RULES:
            raise ConfigError(f"y0_rule must be one of {Y0_RULES}")
        if np.any(self.true_params.sigma2 <= MIN_SIGMA2):
            raise ConfigError(f"atom variances must exceed {MIN_SIGMA2}")
        if self.y0_rule == "user":
            if self.y0 is None or np.asarray(self.y0).shape != (self.N,):
                raise ConfigError("y0_rule='user' needs a y0 vector of length N")

    @property
    def dynamic(self) -> bool:
        return self.true_params.gamma is not None


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for a replication/stream.

    Rule: ``SeedSequence(seed, spawn_key=keys)`` and the first 63 bits of its
    state. Distinct key tuples give independent streams.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def simulate_panel(cfg: DgpConfig):
    """Draw ``(PanelData, Allocations)``; the allocations are the true labels."""
    rng = np.random.default_rng(cfg.seed)
    par = cfg.true_params
    N, T, p = cfg.N, cfg.T, par.beta.size

    chi = rng.choice(par.K, size=N, p=par.weights)
    alpha = par.alpha[chi]
    sig = np.sqrt(par.sigma2[chi])
    Z = cfg.covariate_mean + cfg.covariate_sd * rng.standard_normal((N, T, p))
    xb = Z @ par.beta  # (N, T)
    u = rng.standard_normal((T, N)) * sig

    if cfg.dynamic:
        g = par.gamma
        if cfg.y0_rule == "zero":
            y0 = np.zeros(N)
        elif cfg.y0_rule == "user":
            y0 = np.asarray(cfg.y0, dtype=float).copy()
        else:
            loc = (alpha + cfg.covariate_mean * par.beta.sum()) / (1.0 - g)
            y0 = loc + sig / np.sqrt(1.0 - g * g) * rng.standard_normal(N)
        y = np.empty((T, N))
        prev = y0
        for t in range(T):
            prev = g * prev + xb[:, t] + alpha + u[t]
            y[t] = prev
    else:
        y0 = None
        y = xb.T + alpha[None, :] + u

    data = PanelData(y=y, Z=Z, y0=y0, h=0, dynamic=cfg.dynamic)
    return data, Allocations(chi, par.K)


def realized_measure(alloc: Allocations, params: ModelParams) -> MixingMeasure:
    """True measure restricted to components that received at least one unit."""
    if alloc.chi.size == 0:
        raise ValueError("empty allocation")
    if alloc.K != params.K:
        raise ValueError("allocation and parameters disagree on K")
    keep = alloc.counts > 0
    w = params.weights[keep]
    return MixingMeasure(params.alpha[keep], params.sigma2[keep], w / w.sum())
