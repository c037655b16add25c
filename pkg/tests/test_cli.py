import csv
from pathlib import Path

import numpy as np
import pytest
import yaml

from panelmfm.cli import main
from panelmfm.config import build_priors, fit_view, load_config, parse_config
from panelmfm.errors import ConfigError
from panelmfm.io import read_panel
from panelmfm.model import PanelData

ROOT = Path(__file__).resolve().parents[1]

SMALL = {
    "seed": 11,
    "model": {"mode": "static"},
    "sampler": {"n_iter": 150, "n_burnin": 30},
    "dgp": {"N": 24, "T": 3, "alpha": [-4.0, 4.0], "sigma2": [1.0, 1.0], "weights": [0.5, 0.5],
            "beta": [0.5]},
    "mc": {"replications": 2},
}


def write_config(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# --- configuration ----------------------------------------------------------------------

def test_defaults_parse():
    cfg = parse_config({})
    assert cfg.prior.k_prior.family == "bnb" and cfg.sampler.init_rule == "kmeans-warmstart"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        parse_config({"sampler": {"n_iters": 10}})


def test_gamma_hyperprior_needs_parameterization():
    with pytest.raises(ConfigError):
        parse_config({"prior": {"weights": {"e0_gamma": {"shape": 1, "value": 20}}}})


@pytest.mark.parametrize("param,rate", [("rate", 20.0), ("scale", 0.05)])
def test_gamma_hyperprior_parameterization(param, rate):
    cfg = parse_config({"prior": {"weights": {"mode": "dynamic", "e0_gamma":
                                              {"shape": 1, "value": 20, "parameterization": param}}}})
    data = PanelData(y=np.arange(6.0).reshape(2, 3), Z=np.zeros((3, 2, 0)))
    wp = build_priors(cfg, data).weights
    assert wp.random and wp.e0_rate == pytest.approx(rate)


def test_data_driven_atom_prior_and_overrides():
    data = PanelData(y=np.array([[0.0, 4.0, 10.0]]), Z=np.zeros((3, 1, 0)))
    ap = build_priors(parse_config({}), data).atoms
    assert (ap.b0, ap.B0, ap.G0) == (5.0, 100.0, 0.1)
    assert ap.C0 == pytest.approx(0.2 / 0.1)
    ap = build_priors(parse_config({"prior": {"atoms": {"b0": 1.0, "random_C0": False, "C0": 3.0}}}),
                      data).atoms
    assert ap.b0 == 1.0 and ap.C0 == 3.0 and not ap.random_C0


def test_covariate_selection():
    data = PanelData(y=np.zeros((2, 3)), Z=np.arange(18.0).reshape(3, 2, 3))
    assert fit_view(parse_config({"model": {"covariates": "none"}}), data).p == 0
    view = fit_view(parse_config({"model": {"covariates": [3, 1]}}), data)
    assert np.array_equal(view.Z, data.Z[:, :, [2, 0]])
    with pytest.raises(ConfigError):
        fit_view(parse_config({"model": {"covariates": [4]}}), data)


def test_dynamic_model_needs_dynamic_data():
    data = PanelData(y=np.zeros((2, 3)), Z=np.zeros((3, 2, 0)))
    with pytest.raises(ConfigError):
        fit_view(parse_config({"model": {"mode": "dynamic"}}), data)


@pytest.mark.parametrize("path", sorted((ROOT / "configs").rglob("*.yaml")), ids=lambda p: p.name)
def test_shipped_configs_validate(path):
    cfg = load_config(path)
    assert cfg.sampler.n_iter >= 1


# --- subcommands -------------------------------------------------------------------------

def test_simulate_writes_panel_and_truth(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    data = read_panel(tmp_path / "panel.csv").data
    assert (data.N, data.T, data.p) == (24, 3, 1)
    truth = read_csv(tmp_path / "truth.csv")
    assert truth[0] == ["quantity", "component", "value", "lower", "upper"]
    assert sum(r[0] == "label" for r in truth) == 24


def test_unknown_config_key_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "bogus": 1})
    assert main(["mc", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "bogus" in capsys.readouterr().err


def test_missing_data_exits_1(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 1


def test_bad_seed_exits_1(tmp_path):
    assert main(["simulate", "--seed", "-3", "--out", str(tmp_path)]) == 1


def test_numerical_failure_exits_2(tmp_path, capsys):
    cfg = dict(SMALL, prior={"k_prior": {"family": "degenerate", "params": [1]}},
               sampler={"n_iter": 5, "n_burnin": 0, "init_rule": "kmeans-warmstart", "k_init": 3})
    path = write_config(tmp_path, cfg)
    assert main(["simulate", "--config", path, "--out", str(tmp_path)]) == 0
    code = main(["fit", "--config", path, "--data", str(tmp_path / "panel.csv"),
                 "--out", str(tmp_path / "fit")])
    assert code == 2
    assert "iteration 0" in capsys.readouterr().err


def test_fit_then_summarize_equals_single_replication(tmp_path):
    cfg = dict(SMALL, model={"mode": "dynamic"},
               dgp=dict(SMALL["dgp"], gamma=0.3), mc={"replications": 1})
    path = write_config(tmp_path, cfg)
    seed = "987654321"
    assert main(["simulate", "--config", path, "--seed", seed, "--out", str(tmp_path / "sim")]) == 0
    assert main(["fit", "--config", path, "--seed", seed, "--data", str(tmp_path / "sim/panel.csv"),
                 "--out", str(tmp_path / "fit")]) == 0
    assert main(["summarize", "--config", path, "--seed", seed,
                 "--draws", str(tmp_path / "fit/draws.csv"), "--out", str(tmp_path / "sum")]) == 0
    assert main(["mc", "--config", path, "--seed", seed, "--out", str(tmp_path / "mc")]) == 0

    fit_rows = read_csv(tmp_path / "fit/summary.csv")
    assert read_csv(tmp_path / "sum/summary.csv") == fit_rows
    rep = [r[1:] for r in read_csv(tmp_path / "mc/mc_replications.csv")[1:]
           if r[0] == "0" and r[1] not in ("status", "Kplus_true")]
    assert rep == fit_rows[1:]


def test_mc_is_deterministic_up_to_timestamp(tmp_path):
    path = write_config(tmp_path, SMALL)
    for out in ("a", "b"):
        assert main(["mc", "--config", path, "--out", str(tmp_path / out)]) == 0
    assert main(["mc", "--config", path, "--threads", "2", "--out", str(tmp_path / "c")]) == 0
    for name in ("mc_replications.csv", "mc_summary.csv"):
        ref = (tmp_path / "a" / name).read_bytes()
        assert (tmp_path / "b" / name).read_bytes() == ref
        assert (tmp_path / "c" / name).read_bytes() == ref
    tables = [(tmp_path / d / "table.txt").read_text().splitlines() for d in "abc"]
    assert tables[0][0].startswith("# generated")
    assert tables[0][1:] == tables[1][1:] == tables[2][1:]


def test_mc_contraction_column(tmp_path):
    cfg = dict(SMALL, mc={"replications": 1, "contraction": True})
    assert main(["mc", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "mc_summary.csv")
    w1 = [r for r in rows if r[0] == "avg_conditional_w1_median"]
    assert w1 and float(w1[0][2]) >= 0


def test_zero_replications_is_success_with_warning(tmp_path, caplog):
    cfg = dict(SMALL, mc={"replications": 0})
    assert main(["mc", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)]) == 0
    assert "zero replications" in caplog.text
    rows = read_csv(tmp_path / "mc_replications.csv")
    assert rows == [["replication", "quantity", "component", "value", "lower", "upper"]]
    assert "no successful replications" in (tmp_path / "table.txt").read_text()


def test_mc_without_dgp_exits_1(tmp_path):
    cfg = {k: v for k, v in SMALL.items() if k != "dgp"}
    assert main(["mc", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)]) == 1


def test_prior_kplus_table(tmp_path):
    code = main(["prior-kplus", "--k-prior", "degenerate:1", "--k-prior", "negbin:1,0.5",
                 "--n", "10", "50", "--e0", "1", "--e0-gamma", "1,2", "--gamma-param", "scale",
                 "--nsim", "20000", "--seed", "1", "--out", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "prior_kplus.csv")
    assert rows[0] == ["weights", "degenerate(1) N=10", "degenerate(1) N=50",
                       "negbin(1,0.5) N=10", "negbin(1,0.5) N=50"]
    assert len(rows) == 3
    for r in rows[1:]:
        assert float(r[1]) == float(r[2]) == 1.0
        assert 1.0 < float(r[3]) <= float(r[4]) + 0.05


def test_prior_kplus_bad_spec_exits_1(tmp_path):
    assert main(["prior-kplus", "--k-prior", "zeta:1", "--out", str(tmp_path)]) == 1
    assert main(["prior-kplus", "--e0-gamma", "1", "--out", str(tmp_path)]) == 1


def test_fit_on_shipped_sample(tmp_path, capsys):
    cfg = write_config(tmp_path, {"model": {"mode": "dynamic", "h": 1},
                                  "sampler": {"n_iter": 100, "n_burnin": 20}})
    code = main(["fit", "--config", cfg, "--data", str(ROOT / "testdata/sample_panel.csv"),
                 "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "dropped=1" in out and "gamma" in out
    assert (tmp_path / "draws.csv").exists() and (tmp_path / "table.txt").exists()
