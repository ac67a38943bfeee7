import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st_
from numpy.testing import assert_allclose

from mgrf import sampler
from mgrf.errors import ChainError, ConfigError
from mgrf.mesh import build_mesh
from mgrf.mgrf_prior import Reformulation
from mgrf.sampler import (Block, ModelConfig, ModelKind, Priors, beta_moments, ess_initial_monotone,
                          gamma_system, gamma_z_moments_likelihood_form,
                          gamma_z_moments_prior_form, gibbs_gamma, gibbs_gamma_z, gibbs_sigma2,
                          mu_z_moments, n_retained, run_chain, sigma2_moments)

from conftest import make_data
from oracles import DenseModel, toy_state

TOL = 1e-8


@pytest.fixture(scope="module")
def mesh30():
    return build_mesh(target_nodes=30, extension_fraction=0.2)


@pytest.fixture(scope="module")
def data30(mesh30):
    return make_data(mesh30, 60, seed=3)


@pytest.fixture(scope="module")
def data25():
    return make_data(build_mesh(target_nodes=25, extension_fraction=0.2), 25, seed=4)


# -- conjugate blocks against dense covariance-form conditioning ----------------
@pytest.mark.parametrize("kind", [ModelKind.NON_SPATIAL, ModelKind.BASE, ModelKind.MGRF])
def test_beta_conditional_dense(data25, kind):
    ctx, st = toy_state(data25, kind)
    r = data25.y - (ctx.psi @ st.gamma if ctx.spatial else 0.0)
    mean, cov, _ = beta_moments(r, ctx.X, st.sigma2_eps, ctx.beta_mean, ctx.beta_var)
    m_ref, C_ref = DenseModel(ctx, st).beta()
    assert np.max(np.abs(mean - m_ref)) < TOL
    assert np.max(np.abs(cov - C_ref)) < TOL


def test_beta_tight_prior_returns_prior_mean(data25):
    pr = Priors(mu_beta0=0.5, sigma2_beta0=1e-12, mu_beta=-2.0, sigma2_beta=1e-12)
    ctx, st = toy_state(data25, ModelKind.BASE, priors=pr)
    mean, _, _ = beta_moments(data25.y, ctx.X, st.sigma2_eps, ctx.beta_mean, ctx.beta_var)
    assert_allclose(mean, [0.5, -2.0], atol=1e-6)


def test_beta_flat_prior_recovers_ols():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(2000), rng.normal(size=2000)])
    y = X @ [-1.5, 1.0] + rng.normal(0, 0.3, 2000)
    mean, cov, _ = beta_moments(y, X, 0.09, np.zeros(2), np.full(2, 1e4))
    ols = np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.all(np.abs(mean - ols) < 3 * np.sqrt(np.diag(cov)))


def test_sigma2_shape_and_rate():
    shape, rate = sigma2_moments(np.zeros(280), 0.001, 0.001)
    assert shape == pytest.approx(140.001)
    assert rate == 0.001
    r = np.arange(5.0)
    assert sigma2_moments(r, 1.0, 2.0) == (1.0 + 2.5, 2.0 + 0.5 * 30.0)


def test_sigma2_monte_carlo_mean():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(30), rng.normal(size=30)])
    y = X @ [1.0, 2.0] + rng.normal(size=30)

    class Ctx:
        pass

    ctx = Ctx()
    ctx.data, ctx.X, ctx.spatial, ctx.priors = type("D", (), {"y": y}), X, False, Priors()
    st = type("S", (), {"beta": np.array([1.0, 2.0])})
    shape, rate = sigma2_moments(y - X @ st.beta, 0.001, 0.001)
    draws = np.array([gibbs_sigma2(ctx, st, rng) for _ in range(100_000)])
    assert abs(draws.mean() / (rate / (shape - 1)) - 1) < 0.01


@pytest.mark.parametrize("ref", [Reformulation.I, Reformulation.II])
def test_mu_z_conditional_dense(data30, ref):
    ctx, st = toy_state(data30, ref=ref, rho=0.5)
    m, v = mu_z_moments(ctx, st)
    m_ref, v_ref = DenseModel(ctx, st).mu_z()
    assert abs(m - m_ref) < TOL and abs(v - v_ref) < TOL


def test_mu_z_flat_prior_gls_mean(data30):
    ctx, st = toy_state(data30, ref=Reformulation.II, priors=Priors(sigma2_mu_z=1e14))
    st.gamma_z = ctx.z_star.copy()
    m, _ = mu_z_moments(ctx, st)
    Q = ctx.precision(st.theta_z).toarray()
    one = np.ones(ctx.M)
    assert m == pytest.approx(one @ Q @ ctx.z_star / (one @ Q @ one), rel=1e-6)


@pytest.mark.parametrize("kind,ref", [(ModelKind.BASE, Reformulation.II),
                                      (ModelKind.MGRF, Reformulation.I),
                                      (ModelKind.MGRF, Reformulation.II)])
def test_gamma_conditional_dense(data30, kind, ref):
    ctx, st = toy_state(data30, kind, ref, rho=0.7)
    P, rhs = gamma_system(ctx, st)
    Pd = P.toarray()
    mean, cov = np.linalg.solve(Pd, rhs), np.linalg.inv(Pd)
    m_ref, C_ref = DenseModel(ctx, st).gamma()
    assert np.max(np.abs(mean - m_ref)) < TOL
    assert np.max(np.abs(cov - C_ref)) < TOL


def test_gamma_reformulations_agree_at_zero(data30):
    out = []
    for ref in Reformulation:
        ctx, st = toy_state(data30, ref=ref, rho=0.0)
        P, rhs = gamma_system(ctx, st)
        out.append((P.data, rhs))
    assert_allclose(out[0][0], out[1][0], rtol=1e-14)
    assert_allclose(out[0][1], out[1][1], rtol=1e-13)


def test_gamma_no_data_limit(data30):
    ctx, st = toy_state(data30, ModelKind.BASE)
    st.sigma2_eps = 1e14
    P, rhs = gamma_system(ctx, st)
    Q = ctx.precision(st.theta_gamma).toarray()
    assert_allclose(P.toarray(), Q, rtol=1e-10, atol=1e-10)
    assert np.max(np.abs(rhs)) < 1e-10


def test_gamma_z_prior_form_dense(data30):
    ctx, st = toy_state(data30, rho=0.8)
    mean, h = gamma_z_moments_prior_form(ctx, st)
    m_ref, C_ref = DenseModel(ctx, st).gamma_z_given_gamma_star()
    Qz = ctx.precision(st.theta_z).toarray()
    assert np.max(np.abs(mean - m_ref)) < TOL
    assert np.max(np.abs(np.linalg.inv(h * Qz) - C_ref)) < TOL


def test_gamma_z_likelihood_form_dense(data30):
    ctx, st = toy_state(data30, rho=0.8, gamma_z_form="likelihood")
    mean, P, gamma_raw = gamma_z_moments_likelihood_form(ctx, st)
    m_ref, C_ref = DenseModel(ctx, st).gamma_z_given_raw(gamma_raw)
    assert np.max(np.abs(mean - m_ref)) < TOL
    assert np.max(np.abs(np.linalg.inv(P) - C_ref)) < TOL


@pytest.mark.parametrize("form", ["prior", "likelihood"])
def test_gamma_z_reduces_to_prior_at_zero(data30, form):
    ctx, st = toy_state(data30, rho=0.0, gamma_z_form=form)
    if form == "prior":
        mean, h = gamma_z_moments_prior_form(ctx, st)
        assert h == 1.0
        assert_allclose(mean, st.mu_z, rtol=1e-15)
    else:
        mean, P, _ = gamma_z_moments_likelihood_form(ctx, st)
        assert_allclose(mean, st.mu_z, rtol=1e-12)
        assert_allclose(P, ctx.precision(st.theta_z).toarray(), rtol=1e-14)


def test_shift_operator_identity(data30):
    ctx, st = toy_state(data30, rho=0.6)
    Fg, Fz = ctx.factor(st.theta_gamma), ctx.factor(st.theta_z)
    S = 0.6 * Fg.solve_upper(Fz.mul_upper(np.eye(ctx.M)))
    Qg = ctx.precision(st.theta_gamma).toarray()
    Qz = ctx.precision(st.theta_z).toarray()
    assert np.max(np.abs(S.T @ Qg @ S - 0.36 * Qz)) < 1e-10


@pytest.mark.parametrize("form", ["prior", "likelihood"])
def test_pair_subgibbs_stationary_law(form):
    """Alternating gamma_z and gamma updates leaves the dense joint posterior invariant."""
    mesh = build_mesh(target_nodes=20, extension_fraction=0.2)
    data = make_data(mesh, 30, seed=5)
    ctx, st = toy_state(data, rho=0.7, gamma_z_form=form)
    m_ref, C_ref = DenseModel(ctx, st).joint_pair_posterior()
    M, K, burn = ctx.M, 20_000, 200
    rng = np.random.default_rng(6)
    out = np.empty((K, 2 * M))
    for k in range(K + burn):
        st.gamma_z, st.gamma = gibbs_gamma_z(ctx, st, rng)
        st.gamma = gibbs_gamma(ctx, st, rng)
        if k >= burn:
            out[k - burn] = np.concatenate([st.gamma, st.gamma_z])
    sd = np.sqrt(np.diag(C_ref))
    ess = np.array([ess_initial_monotone(out[:, j]) for j in range(2 * M)])
    zm = (out.mean(0) - m_ref) / (sd / np.sqrt(ess))
    assert np.sum(np.abs(zm) > 3.5) <= 1
    ratio = out.var(0) / sd ** 2
    assert np.all(np.abs(ratio - 1) < 0.15)


# -- chain mechanics ------------------------------------------------------------
def test_retained_counts():
    assert n_retained(12000, 6000, 1) == 6000
    assert n_retained(100000, 50000, 20) == 2500
    assert ModelConfig(iterations=100, burn_in=10, thinning=7).n_retained == 13


@given(it=st_.integers(2, 500), burn=st_.integers(0, 499), thin=st_.integers(1, 30))
@settings(max_examples=60, deadline=None)
def test_retained_matches_loop(it, burn, thin):
    if burn >= it:
        return
    assert n_retained(it, burn, thin) == sum(
        1 for t in range(it) if t >= burn and (t - burn) % thin == 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(iterations=10, burn_in=10)
    with pytest.raises(ConfigError):
        ModelConfig(thinning=0)
    with pytest.raises(ConfigError):
        ModelConfig(priors=Priors(sigma2_beta=-1.0))


@pytest.fixture(scope="module")
def short_cfg():
    return ModelConfig(iterations=300, burn_in=100, thinning=2, seed=11)


def test_determinism(tiny_data, short_cfg):
    a = run_chain(short_cfg, tiny_data)
    b = run_chain(short_cfg, tiny_data)
    for k in a.draws:
        assert np.array_equal(a.draws[k], b.draws[k])
    assert a.acceptance == b.acceptance
    assert a.n_retained == 100


def test_base_equals_mgrf_with_rho_frozen(tiny_data, short_cfg):
    base = run_chain(short_cfg.with_(model_kind=ModelKind.BASE), tiny_data)
    frozen = run_chain(short_cfg.with_(fix_rho=0.0), tiny_data)
    for k in base.draws:
        assert np.array_equal(base.draws[k], frozen.draws[k]), k


def test_summary_consistency(tiny_data, short_cfg):
    s = run_chain(short_cfg, tiny_data)
    for name, p in s.params.items():
        assert p.lower <= np.median(s.draws[name]) <= p.upper
        assert 0 < p.ess <= s.n_retained


def test_step_errors_carry_iteration(tiny_data, short_cfg, monkeypatch):
    real = sampler.gibbs_beta

    def flaky(ctx, st, rng):
        if st.iteration == 7:
            raise FloatingPointError("boom")
        return real(ctx, st, rng)

    monkeypatch.setattr(sampler, "gibbs_beta", flaky)
    with pytest.raises(ChainError) as exc:
        run_chain(short_cfg, tiny_data)
    assert exc.value.iteration == 7


def test_trace_csv(tmp_path, tiny_data, short_cfg):
    path = tmp_path / "trace.csv"
    s = run_chain(short_cfg.with_(trace_path=str(path)), tiny_data)
    rows = path.read_text().splitlines()
    assert len(rows) == s.n_retained + 1
    assert rows[0].split(",")[1:] == list(s.draws)
    last = [float(v) for v in rows[-1].split(",")[1:]]
    assert_allclose(last, [s.draws[k][-1] for k in s.draws], rtol=0)


def test_ess_bounds():
    rng = np.random.default_rng(2)
    x = rng.normal(size=4000)
    assert 3000 < ess_initial_monotone(x) <= 4000
    ar = np.empty(4000)
    ar[0] = 0
    for t in range(1, 4000):
        ar[t] = 0.9 * ar[t - 1] + rng.normal()
    # AR(1) with phi = 0.9 has ESS n (1 - phi) / (1 + phi)
    assert ess_initial_monotone(ar) == pytest.approx(4000 * 0.1 / 1.9, rel=0.35)


@pytest.mark.parametrize("ref", [Reformulation.I, Reformulation.II])
def test_acceptance_coercion(tiny_data, ref):
    s = run_chain(ModelConfig(reformulation=ref, iterations=3000, burn_in=500, seed=2), tiny_data)
    for block in (Block.THETA_Z, Block.THETA_GAMMA_RHO):
        assert 0.15 <= s.acceptance[block.value] <= 0.35


def test_reformulation_agreement():
    """Posteriors of (beta_1, rho) under both reformulations on the same data.

    Left failing: the shift construction gives the effective field prior covariance
    (1 + rho^2) Sigma_gamma instead of (1 - rho^2) Sigma_gamma."""
    mesh = build_mesh(target_nodes=60, extension_fraction=0.2)
    data = make_data(mesh, 120, rho=0.7, r_gamma=0.2, r_z=0.8, seed=8)
    cfg = ModelConfig(iterations=6000, burn_in=2000, seed=9)
    a = run_chain(cfg.with_(reformulation=Reformulation.I), data)
    b = run_chain(cfg.with_(reformulation=Reformulation.II), data)
    for name in ("beta_x1", "rho"):
        pa, pb = a[name], b[name]
        se = math.hypot(pa.sd / math.sqrt(pa.ess), pb.sd / math.sqrt(pb.ess))
        assert abs(pa.mean - pb.mean) < 3 * se, (name, pa.mean, pb.mean, se)
