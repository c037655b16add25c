"""Run configuration: YAML file validated by pydantic, unknown keys rejected.

Unset atom-prior fields (``null``) are filled from the fitted data's unit
means of y: ``b0`` at the midrange, ``B0 = R**2`` and ``G0 = 10/R**2`` with R
the range.
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dgp import DgpConfig
from .errors import ConfigError
from .model import ModelParams, PanelData
from .priors import AtomPrior, KPrior, PriorConfig, RegressionPrior, WeightPrior
from .sampler import SamplerSettings


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    mode: Literal["static", "dynamic"] = "static"
    h: int = Field(0, ge=0)
    # "all", "none" or 1-based indices of the z columns used in the fit
    covariates: Union[Literal["all", "none"], List[int]] = "all"

    @field_validator("covariates")
    @classmethod
    def _pos(cls, v):
        if isinstance(v, list) and any(c < 1 for c in v):
            raise ValueError("covariate indices are 1-based")
        return v


class KPriorSection(_Strict):
    family: Literal["bnb", "poisson", "geometric", "negbin", "uniform", "degenerate"] = "bnb"
    params: List[float] = [1.0, 4.0, 3.0]


class GammaHyper(_Strict):
    shape: float = Field(gt=0)
    value: float = Field(gt=0)
    parameterization: Literal["rate", "scale"]
    init: Optional[float] = Field(None, gt=0)


class WeightsSection(_Strict):
    mode: Literal["static", "dynamic"] = "static"
    e0: Optional[float] = Field(1.0, gt=0)
    e0_gamma: Optional[GammaHyper] = None


class AtomsSection(_Strict):
    b0: Optional[float] = None
    B0: Optional[float] = Field(None, gt=0)
    c0: float = Field(2.0, gt=0)
    random_C0: bool = True
    C0: Optional[float] = Field(None, gt=0)
    g0: float = Field(0.2, gt=0)
    G0: Optional[float] = Field(None, gt=0)


class RegressionSection(_Strict):
    gamma0: float = 0.0
    Gamma0: float = Field(1.0, gt=0)
    beta0: Union[float, List[float]] = 0.0
    omega: Union[float, List[List[float]]] = 100.0


class PriorSection(_Strict):
    k_prior: KPriorSection = KPriorSection()
    weights: WeightsSection = WeightsSection()
    atoms: AtomsSection = AtomsSection()
    regression: RegressionSection = RegressionSection()


class SamplerSection(_Strict):
    n_iter: int = Field(2000, ge=1)
    n_burnin: int = Field(200, ge=0)
    thin: int = Field(1, ge=1)
    s_v: float = Field(0.5, gt=0)
    adapt_s_v: bool = True
    init_rule: Literal["prior-draw", "kmeans-warmstart"] = "kmeans-warmstart"
    k_init: Optional[int] = Field(None, ge=1)
    store_allocations: bool = False


class DgpSection(_Strict):
    N: int = Field(ge=1)
    T: int = Field(ge=1)
    alpha: List[float]
    sigma2: List[float]
    weights: List[float]
    beta: List[float] = []
    gamma: Optional[float] = None
    covariate_mean: float = 1.0
    covariate_sd: float = Field(1.0, ge=0)
    y0_rule: Literal["stationary", "zero"] = "stationary"

    @model_validator(mode="after")
    def _lengths(self):
        if not (len(self.alpha) == len(self.sigma2) == len(self.weights)):
            raise ValueError("alpha, sigma2 and weights need equal lengths")
        return self


class McSection(_Strict):
    replications: int = Field(20, ge=0)
    contraction: bool = False


class PostprocessSection(_Strict):
    strategy: Literal["ordering", "clustering"] = "ordering"
    features: Literal["alpha", "alpha-logsigma2"] = "alpha"


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    threads: int = Field(1, ge=1)
    model: ModelSection = ModelSection()
    prior: PriorSection = PriorSection()
    sampler: SamplerSection = SamplerSection()
    dgp: Optional[DgpSection] = None
    mc: McSection = McSection()
    postprocess: PostprocessSection = PostprocessSection()

    @model_validator(mode="after")
    def _consistent(self):
        if self.dgp is not None and self.model.mode == "dynamic" and self.dgp.gamma is None:
            raise ValueError("dynamic model mode needs dgp.gamma for simulation")
        return self


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(raw or {})


def parse_config(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from None


# --- builders ---------------------------------------------------------------------

def fit_view(cfg: RunConfig, data: PanelData) -> PanelData:
    """The panel as seen by the fitted model (covariate selection, static/dynamic)."""
    cov = cfg.model.covariates
    if cov == "none":
        data = data.select_covariates([])
    elif cov != "all":
        if max(cov) > data.p:
            raise ConfigError(f"covariate index {max(cov)} exceeds p={data.p}")
        data = data.select_covariates([c - 1 for c in cov])
    if cfg.model.mode == "static" and data.dynamic:
        data = data.as_static()
    elif cfg.model.mode == "dynamic" and not data.dynamic:
        raise ConfigError("dynamic model needs a panel loaded in dynamic mode")
    return data


def build_priors(cfg: RunConfig, data: PanelData) -> PriorConfig:
    pc = cfg.prior
    kp = KPrior(pc.k_prior.family, tuple(pc.k_prior.params))
    ws = pc.weights
    if ws.e0_gamma is not None:
        g = ws.e0_gamma
        wp = WeightPrior.gamma(ws.mode, g.shape, g.value, g.parameterization, init=g.init)
    else:
        wp = WeightPrior(mode=ws.mode, e0=ws.e0)

    a = pc.atoms
    auto = AtomPrior.from_data(data, c0=a.c0, g0=a.g0, random_C0=True)
    b0 = auto.b0 if a.b0 is None else a.b0
    B0 = auto.B0 if a.B0 is None else a.B0
    G0 = auto.G0 if a.G0 is None else a.G0
    C0 = a.g0 / G0 if a.C0 is None else a.C0
    if a.random_C0:
        ap = AtomPrior(b0=b0, B0=B0, c0=a.c0, C0=C0, g0=a.g0, G0=G0)
    else:
        ap = AtomPrior(b0=b0, B0=B0, c0=a.c0, C0=C0)

    r = pc.regression
    p = data.p
    beta0 = np.broadcast_to(np.asarray(r.beta0, dtype=float), (p,)).copy() if p else np.zeros(0)
    if isinstance(r.omega, list):
        Omega0 = np.asarray(r.omega, dtype=float)
        if Omega0.shape != (p, p):
            raise ConfigError(f"omega must be {p}x{p}")
    else:
        Omega0 = float(r.omega) * np.eye(p)
    rp = RegressionPrior(beta0=beta0, Omega0=Omega0, gamma0=r.gamma0, Gamma0=r.Gamma0)
    return PriorConfig(k_prior=kp, weights=wp, atoms=ap, regression=rp)


def build_settings(cfg: RunConfig, seed: int) -> SamplerSettings:
    s = cfg.sampler
    return SamplerSettings(n_iter=s.n_iter, n_burnin=s.n_burnin, thin=s.thin, s_v=s.s_v,
                           seed=seed, init_rule=s.init_rule, k_init=s.k_init,
                           store_allocations=s.store_allocations, adapt_s_v=s.adapt_s_v)


def build_dgp(cfg: RunConfig, seed: int) -> DgpConfig:
    d = cfg.dgp
    if d is None:
        raise ConfigError("configuration has no dgp section")
    try:
        tp = ModelParams(beta=np.asarray(d.beta, dtype=float), alpha=d.alpha, sigma2=d.sigma2,
                         weights=np.asarray(d.weights, dtype=float) / np.sum(d.weights),
                         gamma=d.gamma)
    except ValueError as exc:
        raise ConfigError(f"invalid dgp parameters: {exc}") from None
    return DgpConfig(true_params=tp, N=d.N, T=d.T, covariate_mean=d.covariate_mean,
                     covariate_sd=d.covariate_sd, y0_rule=d.y0_rule, seed=seed)
