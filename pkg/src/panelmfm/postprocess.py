"""Point estimates, label-switching resolution and summaries of stored draws."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

log = logging.getLogger(__name__)

STRATEGIES = ("ordering", "clustering")
FEATURES = ("alpha", "alpha-logsigma2")
DISCARD_WARN_FRACTION = 0.5


def map_estimate(draws) -> int:
    """Most frequent value; ties go to the smaller value."""
    draws = np.asarray(draws)
    if draws.size == 0:
        raise ValueError("no draws")
    vals, counts = np.unique(draws, return_counts=True)
    return int(vals[np.argmax(counts)])


def int_quartiles(draws):
    """(q1, q3) as the smallest values whose empirical CDF reaches 1/4 and 3/4."""
    q = np.quantile(np.asarray(draws), [0.25, 0.75], method="inverted_cdf")
    return int(q[0]), int(q[1])


def _mean(x, axis=0):
    # correctly rounded, so constant draws give back their value exactly
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return math.fsum(x) / x.size
    return np.apply_along_axis(math.fsum, axis, x) / x.shape[axis]


def _interval(x, level=0.95):
    lo, hi = np.quantile(x, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return lo, hi


@dataclass
class IdentifiedDraws:
    """Draws with ``kplus_target`` filled components in a common label order."""

    kplus: int
    alpha: np.ndarray
    sigma2: np.ndarray
    weights: np.ndarray
    draw_index: np.ndarray
    n_candidates: int
    n_discarded: int = 0
    warning: Optional[str] = None

    @property
    def empty(self) -> bool:
        return self.draw_index.size == 0


def _filled(store, kplus_target):
    idx = np.flatnonzero(np.asarray(store.kplus) == kplus_target)
    k = kplus_target
    a = np.array([store.alpha[i][:k] for i in idx]).reshape(idx.size, k)
    s = np.array([store.sigma2[i][:k] for i in idx]).reshape(idx.size, k)
    w = np.array([store.weights[i][:k] for i in idx]).reshape(idx.size, k)
    w = w / w.sum(axis=1, keepdims=True) if idx.size else w
    return idx, a, s, w


def _empty_set(k, n):
    z = np.zeros((0, k))
    return IdentifiedDraws(k, z, z.copy(), z.copy(), np.zeros(0, dtype=int), n,
                           warning=f"no draws with K+ = {k}")


def identify_by_ordering(store, kplus_target: int) -> IdentifiedDraws:
    """Sort the filled components of each matching draw by alpha (stable on ties)."""
    if kplus_target < 1:
        raise ValueError("kplus_target must be >= 1")
    idx, a, s, w = _filled(store, kplus_target)
    if idx.size == 0:
        return _empty_set(kplus_target, 0)
    order = np.argsort(a, axis=1, kind="stable")
    take = lambda m: np.take_along_axis(m, order, axis=1)
    return IdentifiedDraws(kplus_target, take(a), take(s), take(w), idx, idx.size)


def identify_by_clustering(store, kplus_target: int, rng=None, features="alpha",
                           n_init=20) -> IdentifiedDraws:
    """k-means on the pooled filled components; keep draws whose components map one-to-one."""
    from sklearn.cluster import KMeans

    if kplus_target < 1:
        raise ValueError("kplus_target must be >= 1")
    if features not in FEATURES:
        raise ValueError(f"features must be one of {FEATURES}")
    idx, a, s, w = _filled(store, kplus_target)
    k = kplus_target
    if idx.size == 0:
        return _empty_set(k, 0)
    if k == 1:
        return IdentifiedDraws(1, a, s, w, idx, idx.size)
    rng = np.random.default_rng(rng)

    X = a.reshape(-1, 1) if features == "alpha" else np.column_stack([a.ravel(), np.log(s.ravel())])
    sd = X.std(axis=0)
    X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    # sort the pooled cloud so the fit does not depend on draw order
    perm = np.lexsort(X.T[::-1])
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init,
                random_state=int(rng.integers(2**31 - 1)))
    lab_sorted = km.fit_predict(X[perm])
    labels = np.empty_like(lab_sorted)
    labels[perm] = lab_sorted
    labels = labels.reshape(idx.size, k)

    centre_alpha = np.array([a.ravel()[labels.ravel() == c].mean() if np.any(labels == c) else np.inf
                             for c in range(k)])
    rank = np.empty(k, dtype=int)
    rank[np.argsort(centre_alpha, kind="stable")] = np.arange(k)
    labels = rank[labels]

    ok = np.all(np.sort(labels, axis=1) == np.arange(k), axis=1)
    n_disc = int((~ok).sum())
    order = np.argsort(labels[ok], axis=1)
    take = lambda m: np.take_along_axis(m[ok], order, axis=1)
    warn = None
    if n_disc > DISCARD_WARN_FRACTION * idx.size:
        warn = (f"clustering identification discarded {n_disc} of {idx.size} draws; "
                "labels may be unreliable")
        warnings.warn(warn, RuntimeWarning, stacklevel=2)
    return IdentifiedDraws(k, take(a), take(s), take(w), idx[ok], idx.size, n_disc, warn)


def identify(store, kplus_target, strategy="ordering", rng=None, features="alpha"):
    if strategy == "ordering":
        return identify_by_ordering(store, kplus_target)
    if strategy == "clustering":
        return identify_by_clustering(store, kplus_target, rng=rng, features=features)
    raise ValueError(f"strategy must be one of {STRATEGIES}")


@dataclass
class Interval:
    mean: float
    lower: float
    upper: float


@dataclass
class PosteriorSummary:
    n_draws: int
    k_map: int
    kplus_map: int
    k_quartiles: tuple
    kplus_quartiles: tuple
    kplus_pmf: dict
    atoms_mean: list
    weights_mean: np.ndarray
    gamma: Optional[Interval]
    beta: list
    cumulative_effect: list
    n_identified: int = 0
    n_discarded: int = 0
    warning: Optional[str] = None
    atoms_interval: list = field(default_factory=list)

    def to_rows(self):
        """Long rows ``(quantity, component, value, lower, upper)``."""
        nan = float("nan")
        rows = [("K", "", self.k_map, self.k_quartiles[0], self.k_quartiles[1]),
                ("Kplus", "", self.kplus_map, self.kplus_quartiles[0], self.kplus_quartiles[1])]
        for k, p in sorted(self.kplus_pmf.items()):
            rows.append(("Kplus_pmf", k, p, nan, nan))
        for j, (a, s) in enumerate(self.atoms_mean, 1):
            lo, hi = self.atoms_interval[j - 1] if self.atoms_interval else ((nan, nan), (nan, nan))
            rows.append(("alpha", j, a, lo[0], hi[0]))
            rows.append(("sigma2", j, s, lo[1], hi[1]))
            rows.append(("weight", j, float(self.weights_mean[j - 1]), nan, nan))
        if self.gamma is not None:
            rows.append(("gamma", "", self.gamma.mean, self.gamma.lower, self.gamma.upper))
        for l, b in enumerate(self.beta, 1):
            rows.append(("beta", l, b.mean, b.lower, b.upper))
        for l, c in enumerate(self.cumulative_effect, 1):
            rows.append(("cumulative_effect", l, c.mean, c.lower, c.upper))
        return rows


def summarize(store, strategy="ordering", kplus_target=None, rng=None, features="alpha",
              level=0.95) -> PosteriorSummary:
    """Single-chain summary: K/K+ MAP, quartiles and pmf, identified atoms and weights,
    and regression coefficients with equal-tailed intervals."""
    n = len(store)
    if n == 0:
        raise ValueError("empty draw store")
    K = np.asarray(store.K)
    kp = np.asarray(store.kplus)
    kplus_map = map_estimate(kp)
    vals, counts = np.unique(kp, return_counts=True)
    pmf = {int(v): c / n for v, c in zip(vals, counts)}

    target = kplus_target or kplus_map
    ident = identify(store, target, strategy, rng=rng, features=features)
    if ident.empty:
        atoms, wmean, atom_iv = [], np.zeros(0), []
    else:
        am, sm = _mean(ident.alpha), _mean(ident.sigma2)
        atoms = list(zip(am.tolist(), sm.tolist()))
        wm = _mean(ident.weights)
        wmean = wm / wm.sum()
        alo, ahi = _interval(ident.alpha, level)
        slo, shi = _interval(ident.sigma2, level)
        atom_iv = [((alo[j], slo[j]), (ahi[j], shi[j])) for j in range(target)]

    gamma_iv = None
    beta = store.beta_matrix()
    beta_iv, cum_iv = [], []
    for l in range(beta.shape[1]):
        lo, hi = _interval(beta[:, l], level)
        beta_iv.append(Interval(_mean(beta[:, l]), float(lo), float(hi)))
    if store.dynamic:
        g = np.asarray(store.gamma, dtype=float)
        lo, hi = _interval(g, level)
        gamma_iv = Interval(_mean(g), float(lo), float(hi))
        cum = beta / (1.0 - g)[:, None]
        for l in range(cum.shape[1]):
            lo, hi = _interval(cum[:, l], level)
            cum_iv.append(Interval(_mean(cum[:, l]), float(lo), float(hi)))

    return PosteriorSummary(
        n_draws=n, k_map=map_estimate(K), kplus_map=kplus_map,
        k_quartiles=int_quartiles(K), kplus_quartiles=int_quartiles(kp), kplus_pmf=pmf,
        atoms_mean=atoms, weights_mean=wmean, gamma=gamma_iv, beta=beta_iv,
        cumulative_effect=cum_iv, n_identified=int(ident.draw_index.size),
        n_discarded=ident.n_discarded, warning=ident.warning, atoms_interval=atom_iv)


# --- Monte Carlo aggregation ------------------------------------------------------

@dataclass
class McAggregate:
    n_replications: int
    kplus_hat: int
    kplus_hat_quartiles: tuple
    k_hat: int
    k_hat_quartiles: tuple
    averaging_set: str
    n_averaged: int
    atoms_mean: list
    weights_mean: np.ndarray
    gamma: Optional[Interval]
    beta: list
    cumulative_effect: list


def _mean_interval(ivs):
    return Interval(float(np.mean([i.mean for i in ivs])), float(np.mean([i.lower for i in ivs])),
                    float(np.mean([i.upper for i in ivs])))


def aggregate_mc(summaries, k_true=None) -> McAggregate:
    """Combine per-replication summaries.

    ``K+`` hat is the rounded mean of the per-replication MAPs. Atoms and weights
    are averaged over replications whose MAP is at most that value, provided at
    least one replication hits it exactly; otherwise over replications whose MAP
    equals ``k_true``. Replications with fewer components contribute only to the
    slots their components are matched to (assignment on alpha against the
    average of the full-size replications).
    """
    summaries = [s for s in summaries if s is not None]
    if not summaries:
        raise ValueError("no replication summaries")
    kmap = np.array([s.kplus_map for s in summaries])
    kmaps = np.array([s.k_map for s in summaries])
    kplus_hat = int(np.floor(kmap.mean() + 0.5))
    if np.any(kmap == kplus_hat):
        chosen = [s for s in summaries if s.kplus_map <= kplus_hat]
        slots, rule = kplus_hat, "le_kplus_hat"
    elif k_true is not None and np.any(kmap == k_true):
        chosen = [s for s in summaries if s.kplus_map == k_true]
        slots, rule = int(k_true), "eq_k_true"
    else:
        chosen, slots, rule = [], kplus_hat, "none"

    full = [s for s in chosen if len(s.atoms_mean) == slots]
    sums = np.zeros((slots, 3))
    cnt = np.zeros(slots)
    ref = np.mean([[a for a, _ in s.atoms_mean] for s in full], axis=0) if full else None
    for s in chosen:
        if not s.atoms_mean:
            continue
        a = np.array([x for x, _ in s.atoms_mean])
        vals = np.column_stack([a, [x for _, x in s.atoms_mean], s.weights_mean])
        if len(a) == slots:
            cols = np.arange(slots)
        elif ref is not None:
            _, cols = linear_sum_assignment(np.abs(a[:, None] - ref[None, :]))
        else:
            continue
        sums[cols] += vals
        cnt[cols] += 1
    with np.errstate(invalid="ignore"):
        means = sums / cnt[:, None]
    atoms = [(float(m[0]), float(m[1])) for m in means]
    w = means[:, 2]
    if np.all(np.isfinite(w)) and w.sum() > 0:
        w = w / w.sum()

    base = chosen or summaries
    gamma = _mean_interval([s.gamma for s in base]) if base[0].gamma is not None else None
    p = len(base[0].beta)
    beta = [_mean_interval([s.beta[l] for s in base]) for l in range(p)]
    cum = ([_mean_interval([s.cumulative_effect[l] for s in base]) for l in range(p)]
           if base[0].cumulative_effect else [])
    return McAggregate(
        n_replications=len(summaries), kplus_hat=kplus_hat, kplus_hat_quartiles=int_quartiles(kmap),
        k_hat=int(np.floor(kmaps.mean() + 0.5)), k_hat_quartiles=int_quartiles(kmaps),
        averaging_set=rule, n_averaged=len(chosen), atoms_mean=atoms, weights_mean=w,
        gamma=gamma, beta=beta, cumulative_effect=cum)


def format_interval(iv: Interval, digits=2) -> str:
    return f"{iv.mean:.{digits}f} ({iv.lower:.{digits}f},{iv.upper:.{digits}f})"


def format_summary_table(summary: PosteriorSummary, digits=2) -> str:
    """Plain-text table of one posterior summary."""
    lines = [f"draws: {summary.n_draws}  identified: {summary.n_identified}  "
             f"discarded: {summary.n_discarded}"]
    lines.append(f"K hat : {summary.k_map} {summary.k_quartiles}")
    lines.append(f"K+ hat: {summary.kplus_map} {summary.kplus_quartiles}")
    for j, (a, s) in enumerate(summary.atoms_mean, 1):
        lines.append(f"theta_{j}: ({a:.{digits}f}, {s:.{digits}f})  w_{j}: "
                     f"{summary.weights_mean[j - 1]:.{digits}f}")
    if summary.gamma is not None:
        lines.append(f"gamma : {format_interval(summary.gamma, digits)}")
    for l, b in enumerate(summary.beta, 1):
        lines.append(f"beta_{l}: {format_interval(b, digits)}")
    for l, c in enumerate(summary.cumulative_effect, 1):
        lines.append(f"beta_{l}/(1-gamma): {format_interval(c, digits)}")
    if summary.warning:
        lines.append(f"warning: {summary.warning}")
    return "\n".join(lines) + "\n"
