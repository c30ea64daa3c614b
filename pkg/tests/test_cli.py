import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose

from maxsmooth import cli
from maxsmooth.cli import (
    BENCH_COLUMNS,
    CONFIG_SCHEMA,
    EXIT_INPUT,
    EXIT_NUMERIC,
    EXIT_OK,
    derive_rng,
    main,
    read_data_csv,
)
from maxsmooth.models import default_spec, simulate


def read_csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_derive_rng_stage_separation():
    a = derive_rng(0, 0).standard_normal(4)
    b = derive_rng(0, 1).standard_normal(4)
    again = derive_rng(0, 0).standard_normal(4)
    assert_allclose(a, again, rtol=0, atol=0)
    assert not np.allclose(a, b)


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--model", "weibull", "--out", str(tmp_path)])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_missing_data_file_exits_2(tmp_path, capsys):
    rc = main([
        "fit", "--model", "logvar", "--data", str(tmp_path / "nope.csv"),
        "--out", str(tmp_path),
    ])
    assert rc == EXIT_INPUT
    assert "error:" in capsys.readouterr().err


def test_invalid_config_reports_json_pointer(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"T": "many", "bogus": 1}))
    rc = main([
        "simulate", "--model", "logvar", "--config", str(cfg),
        "--out", str(tmp_path),
    ])
    assert rc == EXIT_INPUT
    err = capsys.readouterr().err
    assert "/T:" in err
    assert "bogus" in err
    cfg.write_text("{not json")
    rc = main([
        "simulate", "--model", "logvar", "--config", str(cfg),
        "--out", str(tmp_path),
    ])
    assert rc == EXIT_INPUT


def test_simulate_outputs_and_seed_determinism(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n1": 3, "n2": 3, "T": 6}))
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        rc = main([
            "simulate", "--model", "logvar", "--config", str(cfg),
            "--seed", "7", "--out", str(out),
        ])
        assert rc == EXIT_OK
        for name in ("data.csv", "truth.csv", "resolved_config.json",
                     "run_manifest.json"):
            assert (out / name).exists()
        outs.append(json.loads((out / "run_manifest.json").read_text()))
    # same seed: identical hashes of every deterministic output
    assert outs[0]["outputs_sha256"] == outs[1]["outputs_sha256"]
    assert outs[0]["seed"] == 7
    assert outs[0]["command"] == "simulate"
    assert "numpy" in outs[0]["versions"]
    out_c = tmp_path / "c"
    main([
        "simulate", "--model", "logvar", "--config", str(cfg),
        "--seed", "8", "--out", str(out_c),
    ])
    other = json.loads((out_c / "run_manifest.json").read_text())
    assert other["outputs_sha256"]["data.csv"] != outs[0]["outputs_sha256"]["data.csv"]
    resolved = json.loads((tmp_path / "a" / "resolved_config.json").read_text())
    assert resolved["n1"] == 3 and resolved["T"] == 6 and resolved["seed"] == 7
    capsys.readouterr()


def test_data_csv_roundtrip_every_family(tmp_path, capsys):
    cases = {
        "logvar": {"n1": 3, "n2": 4, "T": 5},
        "linreg": {"n1": 3, "n2": 3, "T": 7},
        "treg": {"n_groups": 4, "T": 12},
        "poisson": {"n1": 3, "n2": 3, "n_times": 3},
    }
    for family, cfg_dict in cases.items():
        out = tmp_path / family
        cfg = tmp_path / f"{family}.json"
        cfg.write_text(json.dumps(cfg_dict))
        rc = main([
            "simulate", "--model", family, "--config", str(cfg),
            "--seed", "3", "--out", str(out),
        ])
        assert rc == EXIT_OK
        spec, data = read_data_csv(family, out / "data.csv")
        direct_spec = default_spec(family, seed=3, **cfg_dict)
        direct = simulate(direct_spec, derive_rng(3, cli.STAGE_SIMULATE))
        # repr() serialization makes the roundtrip bit-exact
        assert_allclose(data.y, direct.y, rtol=0, atol=0)
        if direct.covariates is not None:
            assert_allclose(data.covariates, direct.covariates, rtol=0, atol=0)
        assert (spec.n1, spec.n2) == (direct_spec.n1, direct_spec.n2)
    capsys.readouterr()


def test_truth_csv_contents(tmp_path, capsys):
    out = tmp_path / "sim"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n1": 3, "n2": 3, "T": 4}))
    main([
        "simulate", "--model", "logvar", "--config", str(cfg),
        "--seed", "5", "--out", str(out),
    ])
    rows = read_csv_rows(out / "truth.csv")
    blocks = {r["block"] for r in rows}
    assert blocks == {"x", "tau"}
    xs = [float(r["value"]) for r in rows if r["block"] == "x"]
    direct = simulate(
        default_spec("logvar", n1=3, n2=3, T=4), derive_rng(5, cli.STAGE_SIMULATE)
    )
    assert_allclose(np.array(xs), direct.truth["x"], rtol=0, atol=0)
    capsys.readouterr()


def fit_fixture(tmp_path, capsys, extra=(), samples="40"):
    sim = tmp_path / "sim"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n1": 4, "n2": 4, "T": 8}))
    main([
        "simulate", "--model", "logvar", "--config", str(cfg),
        "--seed", "1", "--out", str(sim),
    ])
    fitdir = tmp_path / "fit"
    rc = main([
        "fit", "--model", "logvar", "--data", str(sim / "data.csv"),
        "--samples", samples, "--seed", "2", "--out", str(fitdir), *extra,
    ])
    capsys.readouterr()
    return rc, fitdir


def test_fit_outputs(tmp_path, capsys):
    rc, fitdir = fit_fixture(tmp_path, capsys, extra=["--full-draws", "--dump-density"])
    assert rc == EXIT_OK
    theta_rows = read_csv_rows(fitdir / "theta_draws.csv")
    assert len(theta_rows) == 40
    assert set(theta_rows[0]) == {"tau", "log_posterior"}
    assert all(float(r["tau"]) > 0 for r in theta_rows)
    summary = read_csv_rows(fitdir / "latent_summary.csv")
    assert len(summary) == 16
    assert set(summary[0]) == {"block", "index", "mean", "sd", "q025", "q50", "q975"}
    assert all(r["block"] == "x" for r in summary)
    draws = read_csv_rows(fitdir / "latent_draws.csv")
    assert len(draws) == 40 * 16
    assert set(draws[0]) == {"draw", "block", "index", "value"}
    dens = json.loads((fitdir / "density.json").read_text())
    assert dens["hyper_names"] == ["tau"]
    assert len(dens["axes_log_scale"][0]) == 41
    assert len(dens["blocks"][0]["log_density"]) == 41
    manifest = json.loads((fitdir / "run_manifest.json").read_text())
    assert manifest["sampler"] == "grid"
    assert manifest["n_draws"] == 40
    assert set(manifest["timings_seconds"]) == {"max_step", "smooth_step"}
    for name in ("theta_draws.csv", "latent_summary.csv", "latent_draws.csv",
                 "density.json"):
        assert name in manifest["outputs_sha256"]


def test_fit_same_seed_same_hashes(tmp_path, capsys):
    rc1, fit1 = fit_fixture(tmp_path, capsys)
    fit2 = tmp_path / "fit2"
    sim = tmp_path / "sim"
    rc2 = main([
        "fit", "--model", "logvar", "--data", str(sim / "data.csv"),
        "--samples", "40", "--seed", "2", "--out", str(fit2),
    ])
    capsys.readouterr()
    assert rc1 == rc2 == EXIT_OK
    m1 = json.loads((fit1 / "run_manifest.json").read_text())
    m2 = json.loads((fit2 / "run_manifest.json").read_text())
    assert m1["outputs_sha256"] == m2["outputs_sha256"]


def test_fit_validation_only(tmp_path, capsys):
    rc, fitdir = fit_fixture(tmp_path, capsys, samples="0")
    assert rc == EXIT_OK
    report = json.loads((fitdir / "validation.json").read_text())
    assert report["ratio_identity_max_dev"] < 1e-8
    assert not (fitdir / "theta_draws.csv").exists()


def test_fit_numerical_failure_exits_1(tmp_path, capsys):
    # zero counts without a stabilizing prior cannot be approximated
    sim = tmp_path / "sim"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n1": 2, "n2": 2, "n_times": 2, "u0": math.log(0.05)}))
    main([
        "simulate", "--model", "poisson", "--config", str(cfg),
        "--seed", "0", "--out", str(sim),
    ])
    rc = main([
        "fit", "--model", "poisson", "--data", str(sim / "data.csv"),
        "--config", str(cfg), "--samples", "10", "--out", str(tmp_path / "fit"),
    ])
    assert rc == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_fit_metropolis_sampler(tmp_path, capsys):
    rc, fitdir = fit_fixture(
        tmp_path, capsys, extra=["--sampler", "metropolis"], samples="30"
    )
    assert rc == EXIT_OK
    manifest = json.loads((fitdir / "run_manifest.json").read_text())
    assert manifest["sampler"] == "metropolis"
    assert 0.0 < manifest["diagnostics"]["accept_rate"] <= 1.0


def test_bench_csv_contract(tmp_path, capsys, monkeypatch):
    calls = {}

    def fake_benchmark(lattice_sizes, n_draws, seed, exact_draws):
        calls["sizes"] = lattice_sizes
        calls["n_draws"] = n_draws
        calls["exact_draws"] = exact_draws
        return [
            {"n_lattice": 100, "t_reps": 10, "method": "max_smooth",
             "seconds_per_10k": 1.5, "max_step_seconds": 0.2},
            {"n_lattice": 100, "t_reps": 10, "method": "exact_mcmc",
             "seconds_per_10k": 30.0, "max_step_seconds": 0.0},
        ]

    monkeypatch.setattr("maxsmooth.exact.timing_benchmark", fake_benchmark)
    rc = main(["bench", "--quick", "--out", str(tmp_path / "bench")])
    assert rc == EXIT_OK
    assert calls["sizes"] == ((10, 10),)
    assert calls["n_draws"] == 2000 and calls["exact_draws"] == 1000
    with open(tmp_path / "bench" / "bench.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == BENCH_COLUMNS
        rows = list(reader)
    assert len(rows) == 2
    assert {r["method"] for r in rows} == {"max_smooth", "exact_mcmc"}
    # explicit .csv path puts the table there and the manifest beside it
    rc = main(["bench", "--quick", "--out", str(tmp_path / "custom" / "table.csv")])
    assert rc == EXIT_OK
    assert (tmp_path / "custom" / "table.csv").exists()
    assert (tmp_path / "custom" / "run_manifest.json").exists()
    capsys.readouterr()


def test_forecast_synth_and_ingest(tmp_path, capsys):
    out = tmp_path / "fc"
    rc = main([
        "forecast", "--synth", "3,3,5", "--scheme", "clim",
        "--samples", "30", "--seed", "4", "--out", str(out),
    ])
    assert rc == EXIT_OK
    scores = json.loads((out / "scores.json").read_text())
    assert set(scores) == {"clim"}
    assert set(scores["clim"]) == {"mse", "crps", "w95", "cov05", "cov50", "cov95"}
    assert (out / "grid.csv").exists()
    assert not (out / "bootstrap.json").exists()  # needs a scheme pair
    # feeding the written grid back through --data reproduces the scores
    out2 = tmp_path / "fc2"
    rc = main([
        "forecast", "--data", str(out / "grid.csv"), "--scheme", "clim",
        "--samples", "30", "--seed", "4", "--out", str(out2),
    ])
    assert rc == EXIT_OK
    scores2 = json.loads((out2 / "scores.json").read_text())
    assert scores2 == scores
    capsys.readouterr()


def test_forecast_pair_bootstrap_and_draws(tmp_path, capsys):
    out = tmp_path / "fc"
    rc = main([
        "forecast", "--synth", "3,3,6", "--scheme", "all",
        "--samples", "12", "--blocks", "4", "--full-draws",
        "--seed", "1", "--out", str(out),
    ])
    assert rc == EXIT_OK
    scores = json.loads((out / "scores.json").read_text())
    assert set(scores) == {"clim", "mle", "spat1", "spat2"}
    boot = json.loads((out / "bootstrap.json").read_text())
    assert set(boot) == {
        "clim_minus_mle", "mle_minus_spat1", "mle_minus_spat2", "spat1_minus_spat2",
    }
    for stats in boot.values():
        assert 0.0 <= stats["p_value"] <= 1.0
        assert stats["n_blocks_realized"] >= stats["n_blocks_requested"] - 1
    for scheme in scores:
        pred = read_csv_rows(out / f"predictive_samples_{scheme}.csv")
        assert len(pred) == 9 * 6 * 12
        assert set(pred[0]) == {"cell_index", "year", "sample_index", "value"}
    capsys.readouterr()


def test_forecast_bad_inputs(tmp_path, capsys):
    rc = main([
        "forecast", "--synth", "3,3,2", "--scheme", "clim",
        "--out", str(tmp_path),
    ])
    assert rc == EXIT_INPUT  # too few years
    bad = tmp_path / "bad.csv"
    bad.write_text("lat,lon,year,forecast,observation\n40,-10,2001,1.0,oops\n")
    rc = main([
        "forecast", "--data", str(bad), "--scheme", "clim", "--out", str(tmp_path),
    ])
    assert rc == EXIT_INPUT
    assert "row 2" in capsys.readouterr().err


def test_shipped_schema_matches_source():
    shipped = json.loads(
        (Path(__file__).resolve().parents[1] / "docs" / "config.schema.json").read_text()
    )
    assert shipped == CONFIG_SCHEMA


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    from maxsmooth import __version__

    assert __version__ in capsys.readouterr().out
