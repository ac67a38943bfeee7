import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.stats import norm

from mgrf import harness
from mgrf.errors import NonPositiveSigma
from mgrf.harness import (PRESETS, RunResult, ScenarioConfig, Study, bias_bstar, coverage_rate,
                          crps_gaussian, generate_replicate, grid_size, preset, replicate_seeds,
                          run_study)


# -- CRPS -----------------------------------------------------------------------
def test_crps_at_mean():
    for s in (0.1, 1.0, 7.0):
        assert crps_gaussian(2.0, s, 2.0) == pytest.approx(s * (math.sqrt(2) - 1) / math.sqrt(math.pi))
    assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(0.2337, abs=1e-4)


def test_crps_degenerate_limit():
    assert crps_gaussian(1.0, 1e-12, 1.0) < 1e-12


def test_crps_monte_carlo():
    rng = np.random.default_rng(0)
    mu, sigma, y = 0.3, 1.7, 1.1
    X, Xp = rng.normal(mu, sigma, (2, 1_000_000))
    mc = np.mean(np.abs(X - y)) - 0.5 * np.mean(np.abs(X - Xp))
    assert abs(mc - crps_gaussian(mu, sigma, y)) < 1e-3


def test_crps_rejects_bad_sigma():
    for s in (0.0, -1.0, np.nan):
        with pytest.raises(NonPositiveSigma):
            crps_gaussian(0.0, s, 0.0)


@given(mu=st.floats(-5, 5), sigma=st.floats(0.01, 10), y=st.floats(-5, 5))
@settings(max_examples=100, deadline=None)
def test_crps_properties(mu, sigma, y):
    c = crps_gaussian(mu, sigma, y)
    # non-negative, translation invariant, scale equivariant, bounded by absolute error
    assert c >= 0
    assert c == pytest.approx(crps_gaussian(mu + 1.0, sigma, y + 1.0), rel=1e-9, abs=1e-12)
    assert crps_gaussian(2 * mu, 2 * sigma, 2 * y) == pytest.approx(2 * c, rel=1e-9, abs=1e-12)
    assert c <= abs(y - mu) + 1e-12 or c <= sigma


def test_crps_vectorized():
    mu = np.array([0.0, 1.0])
    out = crps_gaussian(mu, np.array([1.0, 2.0]), np.array([0.5, -1.0]))
    assert out.shape == (2,)
    assert out[1] == pytest.approx(crps_gaussian(1.0, 2.0, -1.0))


# -- coverage and bias ----------------------------------------------------------
def _row(rep, lower, upper, truth=0.0, model="m", parameter="beta_x1", bias=0.0):
    return {"replicate": rep, "model": model, "parameter": parameter, "truth": truth,
            "lower": lower, "upper": upper, "bias": bias}


def test_coverage_trivial_cases():
    full = [_row(i, -np.inf, np.inf) for i in range(5)]
    assert coverage_rate(full, "beta_x1") == 1.0
    none = [_row(i, 1.0, 1.0) for i in range(5)]
    assert coverage_rate(none, "beta_x1") == 0.0
    with pytest.raises(ValueError):
        coverage_rate(full, "beta_x1", level=0.9)


def test_coverage_calibration_conjugate_toy():
    """Normal mean with known variance: exact posteriors cover 95% of prior draws."""
    rng = np.random.default_rng(1)
    rows = []
    for rep in range(500):
        theta = rng.normal(0, 2)
        x = rng.normal(theta, 1, 20)
        prec = 1 / 4 + 20
        m, s = x.sum() / prec, 1 / math.sqrt(prec)
        lo, hi = norm.ppf([0.025, 0.975], m, s)
        rows.append(_row(rep, lo, hi, truth=theta))
    assert abs(coverage_rate(rows, "beta_x1") - 0.95) <= 0.03


def test_bias_bstar_sums_slopes():
    rows = [_row(0, 0, 1, parameter="beta_x1", bias=0.2),
            _row(0, 0, 1, parameter="beta_x2", bias=-0.3),
            _row(0, 0, 1, parameter="beta0", bias=5.0),
            _row(1, 0, 1, parameter="beta_x1", bias=-0.1),
            _row(1, 0, 1, parameter="beta_x2", bias=0.0)]
    assert_allclose(bias_bstar(rows, "m"), [0.5, 0.1], rtol=1e-15)


# -- presets and data generation ------------------------------------------------
def test_preset_grids():
    uni = preset("paper-univariate", 3)
    assert len(uni) == 45 and grid_size(uni) == 9 * 5 * 4 * 3
    assert {(s.range_gamma, s.range_z) for s in uni} == {
        (a, b) for a in (0.1, 0.5, 0.9) for b in (0.1, 0.5, 0.9)}
    multi = preset("paper-multivariate")
    assert len(multi) == 27 and all(s.n_replicates == 50 for s in multi)
    assert all(s.ranges_z[0] == 0.5 and s.study is Study.MULTIVARIATE for s in multi)
    for name in PRESETS:
        assert preset(name, 1)
    with pytest.raises(KeyError):
        preset("nope")


def test_scenario4_values():
    s = preset("desk-scenario4")[0]
    assert (s.rho_true, s.sigma2_eps_true, s.beta_true) == (0.7, 0.1, (-1.5, 1.0))
    assert (s.range_gamma, s.range_z, s.n_obs, s.n_replicates) == (0.1, 0.9, 300, 10)
    assert s.U == 0.9 and ScenarioConfig(rho_true=0.3).U == 0.5
    cfg = s.model_config("mgrf")
    assert (cfg.iterations, cfg.burn_in, cfg.thinning) == (12000, 6000, 1)


def test_replicate_determinism():
    sc = ScenarioConfig(n_obs=80)
    a = generate_replicate(sc, np.random.default_rng(3))
    b = generate_replicate(sc, np.random.default_rng(3))
    assert np.array_equal(a.data.y, b.data.y) and np.array_equal(a.gamma_true, b.gamma_true)
    assert a.data.n == 80 and a.z_nodes.shape == (a.mesh.M, 1)


def test_replicate_seeds_independent_and_stable():
    sc = ScenarioConfig(n_replicates=4, seed=7)
    s1, s2 = replicate_seeds(sc), replicate_seeds(sc)
    states = {tuple(np.random.default_rng(d).integers(0, 2 ** 62, 2)) for d, _ in s1}
    assert len(states) == 4
    assert [np.random.default_rng(f).random() for _, f in s1] == \
        [np.random.default_rng(f).random() for _, f in s2]


def test_scenario1_covariate_orthogonal_to_effect():
    sc = ScenarioConfig(rho_true=0.0, range_gamma=0.1, range_z=0.1, n_obs=100)
    rng = np.random.default_rng(4)
    vals = []
    for _ in range(200):
        r = generate_replicate(sc, rng)
        vals.append(r.z_nodes[:, 0] @ r.gamma_true / r.mesh.M)
    vals = np.array(vals)
    assert abs(vals.mean()) < 3 * vals.std(ddof=1) / math.sqrt(len(vals))


def _nodewise_corr(sc, n_rep, seed):
    rng = np.random.default_rng(seed)
    G, Z = [], []
    for _ in range(n_rep):
        r = generate_replicate(sc, rng)
        G.append(r.gamma_true)
        Z.append(r.z_nodes)
    G, Z = np.array(G), np.array(Z)
    Gc = G - G.mean(0)
    out = []
    for b in range(Z.shape[2]):
        Zc = Z[:, :, b] - Z[:, :, b].mean(0)
        out.append((Gc * Zc).sum(0) / np.sqrt((Gc ** 2).sum(0) * (Zc ** 2).sum(0)))
    return np.array(out)


def test_nodewise_correlation_scenario4():
    # equals rho only when the two ranges coincide; left failing, see ledger
    sc = preset("desk-scenario4")[0].with_(n_obs=100, mesh_nodes=100)
    corr = _nodewise_corr(sc, 500, 5)[0]
    assert np.all(np.abs(corr - 0.7) <= 0.05)


def test_multivariate_generator_equal_ranges():
    sc = ScenarioConfig(study=Study.MULTIVARIATE, rho_true=(0.7, 0.3), range_gamma=0.5,
                        range_z=(0.5, 0.5), beta_true=(-1.5, 1.0, -0.5), n_obs=60)
    corr = _nodewise_corr(sc, 500, 6)
    for c, rho in zip(corr, (0.7, 0.3)):
        # 4 standard errors of a sample correlation over 500 replicates
        assert np.all(np.abs(c - rho) <= 4 * (1 - rho ** 2) / math.sqrt(500))


# -- study execution --------------------------------------------------------------
def test_smoke_study_and_outputs(tmp_path):
    sc = preset("smoke")[0]
    res = run_study(sc, cell_dir=tmp_path / "cells")
    assert not res.failures
    assert len(res.cells) == len(sc.models)
    for r in res.rows:
        assert r["bias"] == r["mean"] - r["truth"]
        assert r["covered"] == (r["lower"] <= r["truth"] <= r["upper"])
    agg = res.aggregates()
    for m in sc.models:
        assert agg[m]["median_bias_bstar"] == float(np.median(res.bias_bstar(m)))
        assert agg[m]["mean_crps"] > 0
    res.to_csv(tmp_path / "r.csv")
    res.to_json(tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert set(doc["aggregates"]) == set(sc.models)
    assert len((tmp_path / "r.csv").read_text().splitlines()) == len(res.rows) + 1


def test_study_resumes_from_cells(tmp_path, monkeypatch):
    sc = preset("smoke")[0].with_(models=("nonspatial", "base"))
    first = run_study(sc, cell_dir=tmp_path)

    def broken(*a, **k):
        raise AssertionError("cell recomputed")

    monkeypatch.setattr(harness, "run_cell", broken)
    second = run_study(sc, cell_dir=tmp_path)
    assert second.rows == first.rows and not second.failures


def test_cell_failures_are_recorded(monkeypatch):
    sc = preset("smoke")[0].with_(models=("nonspatial", "base"))
    real = harness.run_cell

    def flaky(scenario, rep, model):
        if model == "base":
            raise FloatingPointError("bad cell")
        return real(scenario, rep, model)

    monkeypatch.setattr(harness, "run_cell", flaky)
    res = run_study(sc)
    assert len(res.cells) == 1 and res.failures[0]["model"] == "base"
    assert "bad cell" in res.failures[0]["error"]


def test_study_determinism():
    sc = preset("smoke")[0].with_(models=("nonspatial",), n_replicates=2)
    assert run_study(sc).rows == run_study(sc).rows


def test_base_bias_centered_in_scenario1():
    sc = ScenarioConfig(rho_true=0.0, range_gamma=0.1, range_z=0.1, n_obs=150, n_replicates=10,
                        models=("base",), iterations=1500, burn_in=500, seed=3)
    res = run_study(sc)
    b = res.values("base", "beta_x1", "bias")
    assert abs(np.median(b)) < 0.1


def test_correlation_sign_mirrors_bias():
    kw = dict(range_gamma=0.5, range_z=0.5, n_obs=150, n_replicates=20, models=("nonspatial",),
              iterations=600, burn_in=200, seed=11)
    pos = run_study(ScenarioConfig(rho_true=0.3, **kw)).values("nonspatial", "beta_x1", "bias")
    neg = run_study(ScenarioConfig(rho_true=-0.3, **kw)).values("nonspatial", "beta_x1", "bias")
    se = math.sqrt(pos.var(ddof=1) / pos.size + neg.var(ddof=1) / neg.size)
    assert abs(pos.mean() + neg.mean()) < 3 * se
    assert pos.mean() > 0 > neg.mean()
