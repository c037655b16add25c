"""Monte Carlo studies: simulate, fit and summarize many replications.

Seeds: replication ``r`` simulates with ``derive_seed(seed, r, 0)``, runs its
chain with ``derive_seed(seed, r, 1)`` and identifies labels with
``derive_seed(seed, r, 2)``. A single ``fit`` with the same seed matches
replication 0.
"""
from __future__ import annotations

import datetime as _dt
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, build_dgp, build_priors, build_settings, fit_view
from .dgp import derive_seed, realized_measure, simulate_panel
from .errors import PanelMFMError, SamplerError
from .io import write_rows
from .model import ModelParams, PanelData
from .ot import avg_conditional_w1
from .postprocess import (McAggregate, PosteriorSummary, aggregate_mc, format_interval,
                          summarize)
from .sampler import DrawStore, run_chain

log = logging.getLogger(__name__)

SUMMARY_HEADER = ["quantity", "component", "value", "lower", "upper"]


def fit_panel(cfg: RunConfig, data: PanelData, seed: int, rep: int = 0):
    """Run one chain and summarize it; returns ``(DrawStore, PosteriorSummary)``."""
    view = fit_view(cfg, data)
    priors = build_priors(cfg, view)
    settings = build_settings(cfg, derive_seed(seed, rep, 1))
    store = run_chain(view, priors, settings)
    summary = summarize_store(cfg, store, seed, rep)
    return store, summary


def summarize_store(cfg: RunConfig, store: DrawStore, seed: int, rep: int = 0) -> PosteriorSummary:
    pp = cfg.postprocess
    return summarize(store, strategy=pp.strategy, features=pp.features,
                     rng=np.random.default_rng(derive_seed(seed, rep, 2)))


def posterior_mean_params(summary: PosteriorSummary, dynamic: bool) -> Optional[ModelParams]:
    if not summary.atoms_mean:
        return None
    a = np.array([x for x, _ in summary.atoms_mean])
    s = np.array([x for _, x in summary.atoms_mean])
    w = np.asarray(summary.weights_mean, dtype=float)
    beta = np.array([b.mean for b in summary.beta])
    gamma = summary.gamma.mean if dynamic and summary.gamma is not None else None
    return ModelParams(beta=beta, alpha=a, sigma2=s, weights=w / w.sum(), gamma=gamma)


def contraction_distance(cfg: RunConfig, data: PanelData, alloc, summary) -> float:
    """Average conditional W1 between the identified posterior-mean measure and the
    realized true measure; NaN when the fitted model drops covariates or dynamics."""
    truth = build_dgp(cfg, 0).true_params
    view = fit_view(cfg, data)
    dynamic = view.dynamic
    if view.p != data.p or dynamic != (truth.gamma is not None):
        return math.nan
    est = posterior_mean_params(summary, dynamic)
    if est is None:
        return math.nan
    rm = realized_measure(alloc, truth)
    true_p = ModelParams(beta=truth.beta, alpha=rm.alpha, sigma2=rm.sigma2, weights=rm.weights,
                         gamma=truth.gamma)
    return avg_conditional_w1(est, true_p, view, "dynamic" if dynamic else "static")


@dataclass
class ReplicationResult:
    rep: int
    status: str
    kplus_true: Optional[int] = None
    summary: Optional[PosteriorSummary] = None
    w1: float = math.nan
    error: Optional[str] = None


def run_replication(cfg: RunConfig, seed: int, rep: int) -> ReplicationResult:
    try:
        data, alloc = simulate_panel(build_dgp(cfg, derive_seed(seed, rep, 0)))
        _, summary = fit_panel(cfg, data, seed, rep)
        w1 = contraction_distance(cfg, data, alloc, summary) if cfg.mc.contraction else math.nan
        return ReplicationResult(rep, "ok", alloc.kplus, summary, w1)
    except (SamplerError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("replication %d failed: %s", rep, exc)
        return ReplicationResult(rep, "failed", error=str(exc))


def _run_one(args):
    return run_replication(*args)


def run_mc_study(cfg: RunConfig, seed: Optional[int] = None, threads: Optional[int] = None):
    """All replications in index order; failures are recorded, not raised."""
    seed = cfg.seed if seed is None else seed
    threads = threads or cfg.threads
    n = cfg.mc.replications
    if cfg.dgp is None:
        raise PanelMFMError("mc study needs a dgp section")
    jobs = [(cfg, seed, r) for r in range(n)]
    if threads > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    return results


def aggregate_results(cfg: RunConfig, results) -> Optional[McAggregate]:
    ok = [r.summary for r in results if r.status == "ok"]
    if not ok:
        return None
    return aggregate_mc(ok, k_true=len(cfg.dgp.alpha))


def write_mc_report(out_dir, cfg: RunConfig, results, seed, timestamp=None):
    """``mc_replications.csv``, ``mc_summary.csv`` and ``table.txt`` in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in results:
        rows.append((r.rep, "status", "", r.status, "", ""))
        if r.status != "ok":
            rows.append((r.rep, "error", "", r.error, "", ""))
            continue
        rows.append((r.rep, "Kplus_true", "", r.kplus_true, math.nan, math.nan))
        if cfg.mc.contraction:
            rows.append((r.rep, "avg_conditional_w1", "", r.w1, math.nan, math.nan))
        rows.extend((r.rep,) + row for row in r.summary.to_rows())
    write_rows(out / "mc_replications.csv", ["replication"] + SUMMARY_HEADER, rows)

    agg = aggregate_results(cfg, results)
    n_fail = sum(r.status != "ok" for r in results)
    srows = [("replications", "", len(results), math.nan, math.nan),
             ("failed", "", n_fail, math.nan, math.nan)]
    if agg is not None:
        srows += aggregate_rows(agg)
        if cfg.mc.contraction:
            w = np.array([r.w1 for r in results if r.status == "ok"])
            w = w[np.isfinite(w)]
            if w.size:
                srows.append(("avg_conditional_w1_median", "", float(np.median(w)),
                              float(w.min()), float(w.max())))
    write_rows(out / "mc_summary.csv", SUMMARY_HEADER, srows)

    stamp = timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    text = [f"# generated {stamp}", f"seed {seed}, replications {len(results)}, failed {n_fail}"]
    text += format_mc_table(agg, cfg)
    (out / "table.txt").write_text("\n".join(text) + "\n")
    return agg


def aggregate_rows(agg: McAggregate):
    nan = math.nan
    rows = [("K", "", agg.k_hat, agg.k_hat_quartiles[0], agg.k_hat_quartiles[1]),
            ("Kplus", "", agg.kplus_hat, agg.kplus_hat_quartiles[0], agg.kplus_hat_quartiles[1]),
            ("averaged_replications", agg.averaging_set, agg.n_averaged, nan, nan)]
    for j, (a, s) in enumerate(agg.atoms_mean, 1):
        rows.append(("alpha", j, a, nan, nan))
        rows.append(("sigma2", j, s, nan, nan))
        rows.append(("weight", j, float(agg.weights_mean[j - 1]), nan, nan))
    if agg.gamma is not None:
        rows.append(("gamma", "", agg.gamma.mean, agg.gamma.lower, agg.gamma.upper))
    for l, b in enumerate(agg.beta, 1):
        rows.append(("beta", l, b.mean, b.lower, b.upper))
    for l, c in enumerate(agg.cumulative_effect, 1):
        rows.append(("cumulative_effect", l, c.mean, c.lower, c.upper))
    return rows


def format_mc_table(agg: Optional[McAggregate], cfg: RunConfig):
    if agg is None:
        return ["no successful replications"]
    d = cfg.dgp
    lines = [f"N={d.N} T={d.T}", f"{'':10s}{'estimate':>28s}{'truth':>20s}"]
    for j, (a, s) in enumerate(agg.atoms_mean, 1):
        truth = f"({d.alpha[j - 1]:.2f},{d.sigma2[j - 1]:.2f})" if j <= len(d.alpha) else ""
        lines.append(f"{'theta_' + str(j):10s}{f'({a:.2f},{s:.2f})':>28s}{truth:>20s}")
    for j, w in enumerate(agg.weights_mean, 1):
        tw = np.asarray(d.weights) / np.sum(d.weights)
        truth = f"{tw[j - 1]:.2f}" if j <= len(d.alpha) else ""
        lines.append(f"{'w_' + str(j):10s}{w:>28.2f}{truth:>20s}")
    if agg.gamma is not None:
        lines.append(f"{'gamma':10s}{format_interval(agg.gamma):>28s}{d.gamma if d.gamma is not None else '':>20}")
    for l, b in enumerate(agg.beta, 1):
        truth = f"{d.beta[l - 1]:g}" if l <= len(d.beta) else ""
        lines.append(f"{'beta_' + str(l):10s}{format_interval(b):>28s}{truth:>20s}")
    lines.append(f"{'K hat':10s}{f'{agg.k_hat} {agg.k_hat_quartiles}':>28s}")
    lines.append(f"{'K+ hat':10s}{f'{agg.kplus_hat} {agg.kplus_hat_quartiles}':>28s}{len(d.alpha):>20d}")
    lines.append(f"averaged over {agg.n_averaged} replications ({agg.averaging_set})")
    return lines
