"""Command-line interface: simulate, fit, mc, prior-kplus, summarize.

Exit codes: 0 success, 1 configuration or data error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, build_dgp, load_config, parse_config
from .dgp import derive_seed, simulate_panel
from .errors import ConfigError, SamplerError
from .io import read_draws, read_panel, write_draws, write_panel, write_rows
from .postprocess import format_summary_table
from .priors import KPrior, WeightPrior, induced_kplus_mean
from .study import (SUMMARY_HEADER, fit_panel, run_mc_study, summarize_store, write_mc_report)

log = logging.getLogger("panelmfm")


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else parse_config({})


def _seed(args, cfg):
    return cfg.seed if args.seed is None else args.seed


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    data, alloc = simulate_panel(build_dgp(cfg, derive_seed(seed, 0, 0)))
    out = _out(args)
    write_panel(out / "panel.csv", data)
    tp = cfg.dgp
    rows = [("label", i + 1, int(c) + 1, math.nan, math.nan) for i, c in enumerate(alloc.chi)]
    rows += [("alpha", j + 1, a, math.nan, math.nan) for j, a in enumerate(tp.alpha)]
    rows += [("sigma2", j + 1, s, math.nan, math.nan) for j, s in enumerate(tp.sigma2)]
    rows += [("weight", j + 1, w, math.nan, math.nan) for j, w in enumerate(tp.weights)]
    rows += [("beta", l + 1, b, math.nan, math.nan) for l, b in enumerate(tp.beta)]
    if tp.gamma is not None:
        rows.append(("gamma", "", tp.gamma, math.nan, math.nan))
    write_rows(out / "truth.csv", SUMMARY_HEADER, rows)
    print(f"wrote {out / 'panel.csv'} (N={data.N}, T={data.T}, p={data.p}, K+={alloc.kplus})")
    return 0


def _write_summary(out, summary):
    write_rows(out / "summary.csv", SUMMARY_HEADER, summary.to_rows())
    text = format_summary_table(summary)
    (out / "table.txt").write_text(text)
    print(text, end="")


def cmd_fit(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    load = read_panel(args.data, cfg.model.mode, cfg.model.h)
    print(f"loaded {args.data}: {load.report()}")
    store, summary = fit_panel(cfg, load.data, seed)
    out = _out(args)
    write_draws(out / "draws.csv", store)
    _write_summary(out, summary)
    return 0


def cmd_summarize(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    store = read_draws(args.draws)
    summary = summarize_store(cfg, store, seed)
    _write_summary(_out(args), summary)
    return 0


def cmd_mc(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    if cfg.dgp is None:
        raise ConfigError("mc needs a dgp section in the configuration")
    if cfg.mc.replications == 0:
        log.warning("zero replications requested; writing an empty report")
    results = run_mc_study(cfg, seed=seed, threads=args.threads)
    write_mc_report(_out(args), cfg, results, seed)
    print((Path(args.out) / "table.txt").read_text(), end="")
    return 0


def _parse_kprior(text) -> KPrior:
    name, _, params = text.partition(":")
    try:
        vals = tuple(float(x) for x in params.split(",")) if params else ()
    except ValueError:
        raise ConfigError(f"bad K prior spec {text!r}; use family:p1,p2,...") from None
    return KPrior(name.strip(), vals)


def _kprior_label(kp: KPrior) -> str:
    return f"{kp.family}({','.join(f'{p:g}' for p in kp.params)})"


def cmd_prior_kplus(args):
    seed = 0 if args.seed is None else args.seed
    priors = [_parse_kprior(s) for s in (args.k_prior or ["bnb:1,4,3"])]
    weight_specs = []
    for e0 in args.e0 or []:
        weight_specs.append((f"e0={e0:g}", WeightPrior(mode=args.v_mode, e0=e0)))
    for g in args.e0_gamma or []:
        try:
            shape, value = (float(x) for x in g.split(","))
        except ValueError:
            raise ConfigError(f"bad --e0-gamma {g!r}; use SHAPE,VALUE") from None
        wp = WeightPrior.gamma(args.v_mode, shape, value, args.gamma_param)
        weight_specs.append((f"e0~G({shape:g},{value:g};{args.gamma_param})", wp))
    if not weight_specs:
        weight_specs.append(("e0=1", WeightPrior(mode=args.v_mode, e0=1.0)))
    header = ["weights"] + [f"{_kprior_label(kp)} N={n}" for kp in priors for n in args.n]
    rows = []
    for w_i, (label, wp) in enumerate(weight_specs):
        row = [f"{args.v_mode} {label}"]
        for k_i, kp in enumerate(priors):
            for n_i, n in enumerate(args.n):
                rng = np.random.default_rng(derive_seed(seed, w_i, k_i, n_i))
                row.append(round(induced_kplus_mean(kp, wp, n, args.nsim, rng), 6))
        rows.append(row)
    out = _out(args)
    write_rows(out / "prior_kplus.csv", header, rows)
    width = max(len(h) for h in header)
    for r in rows:
        print(r[0])
        for h, v in zip(header[1:], r[1:]):
            print(f"  {h:<{width}s} {v:.3f}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="panelmfm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="simulate a panel from the dgp section")
    s.set_defaults(func=cmd_simulate)
    s = sub.add_parser("fit", parents=[common], help="run the sampler on a panel CSV")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_fit)
    s = sub.add_parser("mc", parents=[common], help="Monte Carlo study over simulated panels")
    s.set_defaults(func=cmd_mc)
    s = sub.add_parser("summarize", parents=[common], help="summarize a long-format draws file")
    s.add_argument("--draws", required=True)
    s.set_defaults(func=cmd_summarize)
    s = sub.add_parser("prior-kplus", parents=[common], help="prior mean of the number of clusters")
    s.add_argument("--k-prior", action="append", help="family:params, e.g. negbin:4,0.5 (repeatable)")
    s.add_argument("--n", type=int, nargs="+", default=[50, 200])
    s.add_argument("--v-mode", choices=["static", "dynamic"], default="static")
    s.add_argument("--e0", type=float, action="append", help="fixed e0 (repeatable)")
    s.add_argument("--e0-gamma", action="append", help="SHAPE,VALUE Gamma hyperprior on e0 (repeatable)")
    s.add_argument("--gamma-param", choices=["rate", "scale"], default="rate")
    s.add_argument("--nsim", type=int, default=200_000)
    s.set_defaults(func=cmd_prior_kplus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 1
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except SamplerError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
