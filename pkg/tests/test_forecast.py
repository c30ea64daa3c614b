import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from maxsmooth.errors import DataFormatError
from maxsmooth.forecast import (
    SCHEMES,
    GridDataset,
    Predictions,
    block_bootstrap_crps_diff,
    crps,
    crps_field,
    drop_year,
    fold_predict,
    ingest,
    loyo_fit_predict,
    score,
    synth_grid,
    write_csv,
)


def crps_double_sum(samples, y):
    s = np.asarray(samples, dtype=np.float64)
    return float(np.mean(np.abs(s - y)) - 0.5 * np.mean(np.abs(s[:, None] - s[None, :])))


def test_crps_matches_double_sum():
    rng = np.random.default_rng(0)
    for size in (1, 2, 7, 40):
        s = rng.standard_normal(size) * 3.0
        y = rng.standard_normal()
        assert_allclose(crps(s, y), crps_double_sum(s, y), rtol=1e-12, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=25),
    st.floats(-1e4, 1e4),
)
def test_crps_sorted_identity_property(samples, y):
    assert_allclose(crps(samples, y), crps_double_sum(samples, y), atol=1e-8)


def test_crps_degenerate_ensemble():
    # all samples equal v: crps = |v - y| exactly
    assert crps(np.full(10, 2.5), 4.0) == 1.5
    assert crps(np.full(3, -1.0), -1.0) == 0.0


def test_crps_gaussian_closed_form():
    # N(0,1) ensemble at y=0: crps -> sigma (2 phi(0) - 1/sqrt(pi)) = 0.2337
    rng = np.random.default_rng(1)
    val = crps(rng.standard_normal(4000), 0.0)
    assert abs(val - 0.23369497725510913) < 0.02


def test_crps_field_matches_scalar():
    rng = np.random.default_rng(2)
    samples = rng.standard_normal((3, 4, 30))
    obs = rng.standard_normal((3, 4))
    field = crps_field(samples, obs)
    assert field.shape == (3, 4)
    for i in range(3):
        for t in range(4):
            assert_allclose(field[i, t], crps(samples[i, t], obs[i, t]), rtol=1e-12)


def test_synth_roundtrip_through_csv(tmp_path):
    ds = synth_grid(3, 4, 5, np.random.default_rng(3))
    assert ds.n1 == 3 and ds.n2 == 4 and ds.n_years == 5
    assert ds.fcst.shape == (12, 5)
    path = tmp_path / "grid.csv"
    write_csv(ds, path)
    back = ingest(path)
    assert_allclose(back.lats, ds.lats, rtol=0, atol=0)
    assert_allclose(back.lons, ds.lons, rtol=0, atol=0)
    assert_allclose(back.years, ds.years, rtol=0, atol=0)
    assert_allclose(back.fcst, ds.fcst, rtol=0, atol=0)
    assert_allclose(back.obs, ds.obs, rtol=0, atol=0)
    with pytest.raises(ValueError):
        synth_grid(3, 3, 3, np.random.default_rng(0))


def test_synth_grid_deterministic():
    a = synth_grid(4, 4, 6, np.random.default_rng(4))
    b = synth_grid(4, 4, 6, np.random.default_rng(4))
    assert_allclose(a.obs, b.obs, rtol=0, atol=0)


def write_rows(path, rows, header="lat,lon,year,forecast,observation"):
    path.write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))


def test_ingest_error_reporting(tmp_path):
    p = tmp_path / "bad.csv"
    # bad value on file row 3 (header is row 1)
    write_rows(p, ["40.0,-10.0,2001,1.0,2.0", "40.0,-10.0,2002,oops,2.0"])
    with pytest.raises(DataFormatError, match="row 3"):
        ingest(p)
    write_rows(p, ["40.0,-10.0,2001,1.0,2.0", "40.0,-10.0,2001,1.0,2.0"])
    with pytest.raises(DataFormatError, match="row 3: duplicate"):
        ingest(p)
    write_rows(p, ["40.0,-10.0,2001,inf,2.0"])
    with pytest.raises(DataFormatError, match="row 2: non-finite"):
        ingest(p)
    write_rows(p, ["40.0,-10.0,2001,1.0"], header="lat,lon,year,forecast")
    with pytest.raises(DataFormatError, match="missing columns.*observation"):
        ingest(p)
    p.write_text("")
    with pytest.raises(DataFormatError, match="empty file"):
        ingest(p)
    write_rows(p, [])
    with pytest.raises(DataFormatError, match="no data rows"):
        ingest(p)
    # incomplete rectangle: 2 lons x 1 lat x 4 years needs 8 rows, give 7
    rows = [
        f"40.0,{lon},{yr},1.0,2.0"
        for lon in (-10.0, -9.5)
        for yr in (2001, 2002, 2003, 2004)
    ][:-1]
    write_rows(p, rows)
    with pytest.raises(DataFormatError, match="incomplete grid"):
        ingest(p)
    # full rectangle but fewer than 4 years
    rows = [
        f"40.0,{lon},{yr},1.0,2.0" for lon in (-10.0, -9.5) for yr in (2001, 2002)
    ]
    write_rows(p, rows)
    with pytest.raises(DataFormatError, match="at least 4 years"):
        ingest(p)


def test_clim_on_constant_observations():
    # constant obs: climatology predicts the constant with zero spread
    years = np.arange(2001, 2007)
    n1 = n2 = 2
    obs = np.full((4, 6), 3.25)
    fcst = np.random.default_rng(5).standard_normal((4, 6))
    ds = GridDataset(40 + 0.5 * np.arange(n2), -10 + 0.5 * np.arange(n1),
                     years, fcst, obs)
    out = fold_predict(ds, "clim", 2003, n_samples=40, seed=0)
    assert_allclose(out, 3.25, rtol=0, atol=0)
    pred = loyo_fit_predict(ds, "clim", n_samples=40, seed=0)
    rep = score([pred], ds)
    assert rep.metrics["clim"]["crps"] == 0.0
    assert rep.metrics["clim"]["mse"] == 0.0


def test_fold_predict_validation():
    ds = synth_grid(3, 3, 5, np.random.default_rng(6))
    with pytest.raises(ValueError, match="unknown scheme"):
        fold_predict(ds, "emos", 2001)
    with pytest.raises(ValueError, match="not in dataset"):
        fold_predict(ds, "clim", 1999)
    tiny = GridDataset(ds.lats, ds.lons, ds.years[:3],
                       ds.fcst[:, :3], ds.obs[:, :3])
    with pytest.raises(DataFormatError, match="fewer than 3 training years"):
        fold_predict(tiny, "clim", int(tiny.years[0]))
    with pytest.raises(ValueError, match="unknown scheme"):
        loyo_fit_predict(ds, "emos")


def test_fold_isolation_bit_exact():
    # a fold's predictions depend only on (seed, scheme, year label, training
    # data), not on which other years sit in the dataset
    ds = synth_grid(3, 3, 6, np.random.default_rng(7))
    year = int(ds.years[2])
    test_fcst = ds.fcst[:, 2].copy()
    for scheme in ("clim", "mle", "spat1"):
        kw = dict(n_samples=30, seed=11, theta_points=7)
        via_loyo = loyo_fit_predict(ds, scheme, **kw).samples[:, 2, :]
        direct = fold_predict(ds, scheme, year, **kw)
        reduced = fold_predict(
            drop_year(ds, year), scheme, year, test_fcst=test_fcst, **kw
        )
        assert_allclose(via_loyo, direct, rtol=0, atol=0)
        assert_allclose(direct, reduced, rtol=0, atol=0)


def test_loyo_deterministic_and_scheme_streams_differ():
    ds = synth_grid(3, 3, 5, np.random.default_rng(8))
    a = loyo_fit_predict(ds, "mle", n_samples=25, seed=3)
    b = loyo_fit_predict(ds, "mle", n_samples=25, seed=3)
    assert_allclose(a.samples, b.samples, rtol=0, atol=0)
    c = loyo_fit_predict(ds, "mle", n_samples=25, seed=4)
    assert not np.allclose(a.samples, c.samples)


def test_mle_student_t_widens_tails():
    ds = synth_grid(3, 3, 6, np.random.default_rng(9))
    plain = loyo_fit_predict(ds, "mle", n_samples=400, seed=0)
    fat = loyo_fit_predict(ds, "mle", n_samples=400, seed=0, mle_student_t=True)
    rep = score([plain], ds).metrics["mle"]["w95"]
    rep_t = score([fat], ds).metrics["mle"]["w95"]
    assert rep_t > rep


def test_score_quantile_coverage_calibrated():
    # obs ~ same distribution as samples: coverages match nominal levels
    rng = np.random.default_rng(42)
    n1 = n2 = 4
    years = np.arange(2001, 2041)
    obs = rng.standard_normal((16, 40))
    ds = GridDataset(40 + 0.5 * np.arange(n2), -10 + 0.5 * np.arange(n1),
                     years, np.zeros((16, 40)), obs)
    samples = rng.standard_normal((16, 40, 2000))
    rep = score([Predictions("clim", samples)], ds)
    m = rep.metrics["clim"]
    assert abs(m["cov05"] - 0.05) < 0.03
    assert abs(m["cov50"] - 0.50) < 0.05
    assert abs(m["cov95"] - 0.95) < 0.03
    assert abs(m["mse"] - 1.0) < 0.08  # predictive mean ~ 0, obs variance 1
    # wider ensembles widen the interval metric
    rep2 = score([Predictions("clim", 2.0 * samples)], ds)
    assert rep2.metrics["clim"]["w95"] > m["w95"]
    assert rep.crps_cells["clim"].shape == (16, 40)


def test_forecast_beats_climatology_end_to_end():
    # strong signal (beta=0.8): regression schemes must beat climatology
    ds = synth_grid(5, 5, 8, np.random.default_rng(12))
    clim = loyo_fit_predict(ds, "clim", n_samples=300, seed=1)
    mle = loyo_fit_predict(ds, "mle", n_samples=300, seed=1)
    rep = score([clim, mle], ds)
    assert rep.metrics["mle"]["crps"] < rep.metrics["clim"]["crps"]
    assert rep.metrics["mle"]["mse"] < rep.metrics["clim"]["mse"]


def test_block_bootstrap_contract():
    rng = np.random.default_rng(13)
    diff_pos = np.full((16, 5), 0.3)
    zeros = np.zeros((16, 5))
    out = block_bootstrap_crps_diff(diff_pos, zeros, 4, 4, 10, rng)
    # requested 10 blocks tile as 3 x 4 = 12 realized
    assert out["n_blocks_requested"] == 10
    assert out["n_blocks_realized"] == 12
    assert out["mean"] == pytest.approx(0.3)
    assert out["p_value"] == 0.0  # every bootstrap mean is positive
    # identical inputs: all means are exactly zero, ties count half
    out = block_bootstrap_crps_diff(zeros, zeros, 4, 4, 9, rng)
    assert out["p_value"] == 0.5
    with pytest.raises(ValueError, match="exceeds"):
        block_bootstrap_crps_diff(zeros, zeros, 4, 4, 17, rng)
    with pytest.raises(DataFormatError):
        block_bootstrap_crps_diff(np.zeros((9, 5)), np.zeros((9, 5)), 4, 4, 4, rng)


def test_block_bootstrap_deterministic():
    rng = np.random.default_rng(14)
    a = rng.standard_normal((16, 6))
    b = rng.standard_normal((16, 6))
    r1 = block_bootstrap_crps_diff(a, b, 4, 4, 8, np.random.default_rng(0))
    r2 = block_bootstrap_crps_diff(a, b, 4, 4, 8, np.random.default_rng(0))
    assert r1 == r2
    assert r1["boot_sd"] > 0.0


def test_schemes_tuple_order():
    # the scheme order is part of the fold seeding contract
    assert SCHEMES == ("clim", "mle", "spat1", "spat2")
