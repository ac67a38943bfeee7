"""MCMC for Gaussian spatial regression with an MGRF prior on the spatial effect.

Each sweep runs, in order: the field-mean Gibbs step, an adaptive Metropolis
step for the covariate-field hyperparameters, (shift construction only) the
latent covariate replica, the noise variance, the regression coefficients,
an adaptive Metropolis step for the spatial hyperparameters together with the
Fisher-z transformed correlation, and finally the spatial effect.

Every update has its own random stream, so model variants that skip some
blocks (for instance the base spatial model) consume identical randomness in
the blocks they share.
"""
from __future__ import annotations

import csv
import enum
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import (ChainError, ConfigError, NotPositiveDefinite, RankDeficientDesign,
                     SingularConditional)
from .mesh import FemMatrices
from .mgrf_prior import RHO_MAX, Aggregation, Reformulation, aggregate_covariates
from .pc_prior import PcRhoPrior
from .ram import RamBlock, ram_step
from .sparse_la import CholFactor, SparseSym, analyze, factorize
from .spde import SQRT8, marginal_variance, spde_structure


class ModelKind(enum.Enum):
    NON_SPATIAL = "nonspatial"
    BASE = "base"
    MGRF = "mgrf"
    MGRF_PCA = "mgrf_pca"
    RSR = "rsr"

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    ModelKind.NON_SPATIAL: "Non-spatial",
    ModelKind.BASE: "Base spatial",
    ModelKind.MGRF: "MGRF spatial",
    ModelKind.MGRF_PCA: "MGRF-PCA spatial",
    ModelKind.RSR: "RSR",
}


class Block(enum.Enum):
    THETA_Z = "theta_z"
    THETA_GAMMA_RHO = "theta_gamma_rho"


STREAMS = ("mu_z", "theta_z", "gamma_z", "sigma2", "beta", "theta_gamma_rho", "gamma")
DEFAULT_ORDER = STREAMS


@lru_cache(maxsize=64)
def _pc_prior(U: float, a: float, w: int) -> PcRhoPrior:
    return PcRhoPrior.calibrated(U, a, w)


@dataclass(frozen=True)
class Priors:
    mu_beta0: float = 0.0
    sigma2_beta0: float = 100.0 ** 4
    mu_beta: float | tuple = 0.0
    sigma2_beta: float | tuple = 100.0 ** 2
    ig_c: float = 0.001
    ig_d: float = 0.001
    theta_tau_box: tuple = (-10.0, 0.0)
    theta_kappa_box: tuple = (1.0, 5.0)
    pc_U: float = 0.8
    pc_a: float = 0.05
    pc_w: int = 2
    mu_mu_z: float = 0.0
    sigma2_mu_z: float = 1.0

    def validate(self) -> None:
        variances = [self.sigma2_beta0, self.sigma2_mu_z, self.ig_c, self.ig_d,
                     *np.atleast_1d(self.sigma2_beta)]
        if min(variances) <= 0:
            raise ConfigError("prior variances and inverse-gamma parameters must be positive")
        for lo, hi in (self.theta_tau_box, self.theta_kappa_box):
            if not lo < hi:
                raise ConfigError("theta boxes need lower < upper")

    def beta_prior(self, B: int) -> tuple[np.ndarray, np.ndarray]:
        mean = np.concatenate([[self.mu_beta0], np.broadcast_to(self.mu_beta, (B,))])
        var = np.concatenate([[self.sigma2_beta0], np.broadcast_to(self.sigma2_beta, (B,))])
        return mean.astype(float), var.astype(float)

    @property
    def pc(self) -> PcRhoPrior:
        return _pc_prior(float(self.pc_U), float(self.pc_a), int(self.pc_w))

    def in_box(self, theta) -> bool:
        (t0, t1), (k0, k1) = self.theta_tau_box, self.theta_kappa_box
        return t0 < theta[0] < t1 and k0 < theta[1] < k1

    def box_mid(self) -> np.ndarray:
        return np.array([sum(self.theta_tau_box) / 2.0, sum(self.theta_kappa_box) / 2.0])


@dataclass(frozen=True)
class ModelConfig:
    model_kind: ModelKind = ModelKind.MGRF
    reformulation: Reformulation = Reformulation.II
    priors: Priors = field(default_factory=Priors)
    iterations: int = 12000
    burn_in: int = 6000
    thinning: int = 1
    seed: int = 0
    fix_rho: float | None = None
    rho_max: float = RHO_MAX
    gamma_z_form: str = "prior"
    adapt: bool = True
    keep_fields: bool = False
    rsr_intercept: bool = True
    t_df: float = 4.0
    trace_path: str | None = None
    init: dict | None = None
    sweep_order: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        object.__setattr__(self, "reformulation", Reformulation(self.reformulation))
        if not self.iterations > self.burn_in >= 0:
            raise ConfigError("need iterations > burn_in >= 0")
        if self.thinning < 1:
            raise ConfigError("thinning must be at least 1")
        if self.gamma_z_form not in ("prior", "likelihood"):
            raise ConfigError("gamma_z_form must be 'prior' or 'likelihood'")
        self.priors.validate()

    @property
    def n_retained(self) -> int:
        return n_retained(self.iterations, self.burn_in, self.thinning)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def n_retained(iterations: int, burn_in: int, thinning: int) -> int:
    return -(-(iterations - burn_in) // thinning)


@dataclass(frozen=True, eq=False)
class SpatialData:
    """Response, design covariates at the observations and nodal covariate fields.

    ``x_obs`` (n x B) enters the linear predictor; ``z_nodes`` (M x B) are the
    covariate fields on the mesh that the MGRF prior conditions on.
    """

    y: np.ndarray
    x_obs: np.ndarray
    psi: sp.csr_matrix | None = None
    z_nodes: np.ndarray | None = None
    fem: FemMatrices | None = None
    covariate_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x_obs, dtype=float).reshape(y.shape[0], -1)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x_obs", x)
        if self.z_nodes is not None:
            z = np.asarray(self.z_nodes, dtype=float)
            object.__setattr__(self, "z_nodes", z.reshape(z.shape[0], -1))
        if not self.covariate_names:
            object.__setattr__(self, "covariate_names", tuple(f"x{j + 1}" for j in range(x.shape[1])))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def B(self) -> int:
        return self.x_obs.shape[1]

    @property
    def M(self) -> int:
        return self.psi.shape[1] if self.psi is not None else 0

    @property
    def design(self) -> np.ndarray:
        return np.column_stack([np.ones(self.n), self.x_obs])


@dataclass
class ChainState:
    beta: np.ndarray
    sigma2_eps: float
    gamma: np.ndarray
    gamma_z: np.ndarray
    mu_z: float
    theta_gamma: np.ndarray
    theta_z: np.ndarray
    rho_star: float
    ram: dict = field(default_factory=dict)
    iteration: int = 0

    @property
    def beta0(self) -> float:
        return float(self.beta[0])

    @property
    def rho(self) -> float:
        return math.tanh(self.rho_star / 2.0)

    def copy(self) -> "ChainState":
        return ChainState(self.beta.copy(), self.sigma2_eps, self.gamma.copy(), self.gamma_z.copy(),
                          self.mu_z, self.theta_gamma.copy(), self.theta_z.copy(), self.rho_star,
                          {k: v.copy() for k, v in self.ram.items()}, self.iteration)


class ChainContext:
    """Per-chain precomputation: design, projector products, SPDE structure,
    symbolic factorization, aggregated covariate field and a small factor cache."""

    def __init__(self, data: SpatialData, config: ModelConfig):
        self.data = data
        self.config = config
        self.kind = config.model_kind
        self.ref = config.reformulation
        self.priors = config.priors
        self.X = data.design
        self.XtX = self.X.T @ self.X
        self.spatial = self.kind is not ModelKind.NON_SPATIAL
        self.uses_z = self.kind in (ModelKind.MGRF, ModelKind.MGRF_PCA)
        self.beta_mean, self.beta_var = self.priors.beta_prior(data.B)

        if self.uses_z:
            self.rho_fixed = config.fix_rho
        else:
            self.rho_fixed = 0.0
        self.estimate_rho = self.uses_z and self.rho_fixed is None
        self.pc = self.priors.pc if self.estimate_rho else None

        if self.spatial:
            if data.psi is None or data.fem is None:
                raise ConfigError(f"{self.kind.label} model needs a projector and FEM matrices")
            self.psi = sp.csr_matrix(data.psi)
            self.psiT = self.psi.T.tocsr()
            self.M = self.psi.shape[1]
            self.structure = spde_structure(data.fem)
            self.pattern = self.structure.pattern
            self.symbolic = analyze(self.pattern)
            self.ptp = _aligned_values(self.pattern, (self.psiT @ self.psi).tocsc())
            self._factors: OrderedDict = OrderedDict()
        else:
            self.M = 0

        self.z_star = None
        self.loadings = None
        if self.uses_z:
            if data.z_nodes is None:
                raise ConfigError("MGRF models need nodal covariate fields")
            method = Aggregation.PCA_FIRST if self.kind is ModelKind.MGRF_PCA else Aggregation.SUM
            self.z_star, self.loadings = aggregate_covariates(list(data.z_nodes.T), method)

        self.A_rsr = None
        if self.kind is ModelKind.RSR:
            Xc = self.X if config.rsr_intercept else self.X[:, 1:]
            if Xc.shape[1]:
                self.A_rsr = np.asarray((self.psiT @ Xc).T)

    # -- factors -----------------------------------------------------------
    def precision(self, theta) -> SparseSym:
        return self.structure.precision(math.exp(theta[0]), math.exp(theta[1]))

    def factor(self, theta) -> CholFactor:
        """Cached factor of the SPDE precision at ``theta``; may raise NotPositiveDefinite."""
        key = (float(theta[0]), float(theta[1]))
        F = self._factors.get(key)
        if F is None:
            F = factorize(self.precision(theta), symbolic=self.symbolic)
            self._factors[key] = F
            if len(self._factors) > 8:
                self._factors.popitem(last=False)
        else:
            self._factors.move_to_end(key)
        return F

    def try_factor(self, theta):
        try:
            return self.factor(theta)
        except NotPositiveDefinite:
            return None

    def rho_of(self, rho_star: float) -> float:
        return self.rho_fixed if self.rho_fixed is not None else math.tanh(rho_star / 2.0)


def _aligned_values(pattern: SparseSym, A: sp.csc_matrix) -> np.ndarray:
    """Values of ``A`` at the stored entries of ``pattern`` (A's pattern must be a subset)."""
    cols = np.repeat(np.arange(pattern.dim), np.diff(pattern.indptr))
    vals = np.asarray(A[pattern.indices, cols]).ravel()
    lower = sp.tril(A)
    if not np.isclose(np.abs(vals).sum(), np.abs(lower.data).sum(), rtol=1e-12, atol=1e-300):
        raise ValueError("projector cross-product falls outside the precision pattern")
    return vals


# -- exact full-conditional moments -----------------------------------------
def beta_moments(resid: np.ndarray, X: np.ndarray, sigma2: float, prior_mean, prior_var):
    """Mean and covariance of the coefficients given ``resid = y - Psi gamma``."""
    P = X.T @ X / sigma2 + np.diag(1.0 / prior_var)
    rhs = X.T @ resid / sigma2 + prior_mean / prior_var
    try:
        c = sla.cho_factor(P, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularConditional("coefficient full conditional is not positive definite") from exc
    return sla.cho_solve(c, rhs), sla.cho_solve(c, np.eye(P.shape[0])), c


def sigma2_moments(resid: np.ndarray, c: float, d: float) -> tuple[float, float]:
    """Shape and rate of the inverse-gamma full conditional."""
    return c + 0.5 * resid.size, d + 0.5 * float(resid @ resid)


def mu_z_moments(ctx: ChainContext, state: ChainState) -> tuple[float, float]:
    """Mean and variance of the covariate-field mean given everything else."""
    pr = ctx.priors
    F_z = ctx.factor(state.theta_z)
    z = ctx.z_star
    if ctx.ref is Reformulation.I:
        F_g = ctx.factor(state.theta_gamma)
        rho = ctx.rho_of(state.rho_star)
        s = 1.0 - rho * rho
        c = F_z.mul_upper(np.ones(ctx.M))
        b = F_z.mul_upper(z)
        a = F_g.mul_upper(state.gamma) - rho * b
        prec = float(c @ c) / s + 1.0 / pr.sigma2_mu_z
        num = float(c @ b) - rho * float(c @ a) / s + pr.mu_mu_z / pr.sigma2_mu_z
    else:
        q1 = F_z.mul_lower(F_z.mul_upper(np.ones(ctx.M)))
        prec = 2.0 * float(q1.sum()) + 1.0 / pr.sigma2_mu_z
        num = float(q1 @ (z + state.gamma_z)) + pr.mu_mu_z / pr.sigma2_mu_z
    return num / prec, 1.0 / prec


def gamma_system(ctx: ChainContext, state: ChainState) -> tuple[SparseSym, np.ndarray]:
    """Precision and canonical mean (``P mean = rhs``) of the spatial effect."""
    F_g = ctx.factor(state.theta_gamma)
    Q = ctx.precision(state.theta_gamma)
    s2 = state.sigma2_eps
    r = ctx.data.y - ctx.X @ state.beta
    rhs = ctx.psiT @ r / s2
    if ctx.uses_z:
        rho = ctx.rho_of(state.rho_star)
        F_z = ctx.factor(state.theta_z)
        if ctx.ref is Reformulation.I:
            s = 1.0 - rho * rho
            P = Q.with_data(ctx.ptp / s2 + Q.data / s)
            w = F_z.mul_upper(ctx.z_star - state.mu_z)
            rhs = rhs + rho * F_g.mul_lower(w) / s
        else:
            P = Q.with_data(ctx.ptp / s2 + Q.data)
            w = F_z.mul_upper(ctx.z_star - state.gamma_z)
            rhs = rhs + rho * F_g.mul_lower(w)
    else:
        P = Q.with_data(ctx.ptp / s2 + Q.data)
    return P, rhs


def gamma_z_moments_prior_form(ctx: ChainContext, state: ChainState):
    """Mean and precision scale ``(1 + rho^2)`` (times ``Q_z``) of the latent replica
    given the effective spatial field."""
    rho = ctx.rho_of(state.rho_star)
    F_g = ctx.factor(state.theta_gamma)
    F_z = ctx.factor(state.theta_z)
    h = 1.0 + rho * rho
    shift = F_z.solve_upper(F_g.mul_upper(state.gamma))
    mean = (state.mu_z + rho * rho * ctx.z_star - rho * shift) / h
    return mean, h


def gamma_z_moments_likelihood_form(ctx: ChainContext, state: ChainState):
    """Mean and dense precision of the latent replica holding the unshifted field fixed."""
    rho = ctx.rho_of(state.rho_star)
    F_g = ctx.factor(state.theta_gamma)
    F_z = ctx.factor(state.theta_z)
    M = ctx.M
    z = ctx.z_star
    gamma_raw = state.gamma - rho * F_g.solve_upper(F_z.mul_upper(z - state.gamma_z))
    # D = -rho Psi R_g^{-T} R_z^T, so D^T = -rho R_z R_g^{-1} Psi^T
    W = F_g.solve_lower(np.asarray(ctx.psiT.todense()))
    Dt = -rho * np.column_stack([F_z.mul_lower(W[:, j]) for j in range(W.shape[1])])
    r0 = ctx.data.y - ctx.X @ state.beta - ctx.psi @ gamma_raw - ctx.psi @ (
        rho * F_g.solve_upper(F_z.mul_upper(z)))
    Qz = ctx.precision(state.theta_z).toarray()
    P = Qz + Dt @ Dt.T / state.sigma2_eps
    rhs = Qz @ np.full(M, state.mu_z) + Dt @ r0 / state.sigma2_eps
    c = sla.cho_factor(P, lower=True)
    return sla.cho_solve(c, rhs), P, gamma_raw


def rsr_constrain(gamma: np.ndarray, F: CholFactor, A: np.ndarray | None) -> np.ndarray:
    """Conditioning by kriging onto ``A gamma = 0`` with the metric of ``F``."""
    if A is None or A.shape[0] == 0:
        return gamma
    V = F.solve_full(A.T)
    W = A @ V
    try:
        corr = sla.cho_solve(sla.cho_factor(W, lower=True), A @ gamma)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientDesign("constraint matrix is rank deficient") from exc
    return gamma - V @ corr


# -- hyperparameter targets ---------------------------------------------------
def log_target_theta_z(ctx: ChainContext, state: ChainState, theta_z) -> float:
    pr = ctx.priors
    if not pr.in_box(theta_z):
        return -math.inf
    F_z = ctx.try_factor(theta_z)
    if F_z is None:
        return -math.inf
    F_g = ctx.factor(state.theta_gamma)
    rho = ctx.rho_of(state.rho_star)
    z = ctx.z_star
    w1 = F_z.mul_upper(z - state.mu_z)
    a_g = F_g.mul_upper(state.gamma)
    if ctx.ref is Reformulation.I:
        s = 1.0 - rho * rho
        e = a_g - rho * w1
        return 0.5 * F_z.logdet() - 0.5 * float(w1 @ w1) - 0.5 * float(e @ e) / s
    w2 = F_z.mul_upper(state.gamma_z - state.mu_z)
    e = a_g - rho * (w1 - w2)
    return F_z.logdet() - 0.5 * float(w1 @ w1) - 0.5 * float(w2 @ w2) - 0.5 * float(e @ e)


def log_target_theta_gamma_rho(ctx: ChainContext, state: ChainState, x) -> float:
    pr = ctx.priors
    theta = x[:2]
    if not pr.in_box(theta):
        return -math.inf
    lp = 0.0
    if ctx.estimate_rho:
        rho_star = float(x[2])
        lp = ctx.pc.log_density_star(rho_star)
        if not math.isfinite(lp):
            return -math.inf
        rho = math.tanh(rho_star / 2.0)
    else:
        rho = ctx.rho_fixed
    if ctx.ref is Reformulation.I and ctx.uses_z and abs(rho) > ctx.config.rho_max:
        return -math.inf
    F_g = ctx.try_factor(theta)
    if F_g is None:
        return -math.inf
    a_g = F_g.mul_upper(state.gamma)
    if ctx.uses_z:
        F_z = ctx.factor(state.theta_z)
        if ctx.ref is Reformulation.I:
            s = 1.0 - rho * rho
            e = a_g - rho * F_z.mul_upper(ctx.z_star - state.mu_z)
            lp += 0.5 * F_g.logdet() - 0.5 * ctx.M * math.log(s) - 0.5 * float(e @ e) / s
        else:
            e = a_g - rho * F_z.mul_upper(ctx.z_star - state.gamma_z)
            lp += 0.5 * F_g.logdet() - 0.5 * float(e @ e)
    else:
        lp += 0.5 * F_g.logdet() - 0.5 * float(a_g @ a_g)
        if ctx.A_rsr is not None:
            W = ctx.A_rsr @ F_g.solve_full(ctx.A_rsr.T)
            lp += 0.5 * np.linalg.slogdet(W)[1]
    return lp


# -- sweep steps ------------------------------------------------------------
def gibbs_mu_z(ctx, state, rng) -> float:
    mean, var = mu_z_moments(ctx, state)
    return mean + math.sqrt(var) * rng.standard_normal()


def gibbs_sigma2(ctx, state, rng) -> float:
    r = ctx.data.y - ctx.X @ state.beta
    if ctx.spatial:
        r = r - ctx.psi @ state.gamma
    shape, rate = sigma2_moments(r, ctx.priors.ig_c, ctx.priors.ig_d)
    return rate / rng.gamma(shape)


def gibbs_beta(ctx, state, rng) -> np.ndarray:
    r = ctx.data.y if not ctx.spatial else ctx.data.y - ctx.psi @ state.gamma
    mean, _, c = beta_moments(r, ctx.X, state.sigma2_eps, ctx.beta_mean, ctx.beta_var)
    u = rng.standard_normal(mean.size)
    return mean + sla.solve_triangular(c[0], u, lower=True, trans="T")


def gibbs_gamma(ctx, state, rng) -> np.ndarray:
    P, rhs = gamma_system(ctx, state)
    F = factorize(P, symbolic=ctx.symbolic)
    gamma = F.solve_full(rhs) + F.solve_upper(rng.standard_normal(ctx.M))
    if ctx.A_rsr is not None:
        gamma = rsr_constrain(gamma, F, ctx.A_rsr)
    return gamma


def gibbs_gamma_z(ctx, state, rng) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(gamma_z, gamma)``; the effective field changes only in the
    likelihood form, where the unshifted field is held fixed."""
    if ctx.config.gamma_z_form == "prior":
        mean, h = gamma_z_moments_prior_form(ctx, state)
        F_z = ctx.factor(state.theta_z)
        gz = mean + F_z.solve_upper(rng.standard_normal(ctx.M)) / math.sqrt(h)
        return gz, state.gamma
    mean, P, gamma_raw = gamma_z_moments_likelihood_form(ctx, state)
    L = np.linalg.cholesky(P)
    gz = mean + sla.solve_triangular(L, rng.standard_normal(ctx.M), lower=True, trans="T")
    rho = ctx.rho_of(state.rho_star)
    F_g, F_z = ctx.factor(state.theta_gamma), ctx.factor(state.theta_z)
    gamma = gamma_raw + rho * F_g.solve_upper(F_z.mul_upper(ctx.z_star - gz))
    return gz, gamma


def _ram_theta_z(ctx, state, rng) -> bool:
    block = state.ram[Block.THETA_Z]
    f = lambda th: log_target_theta_z(ctx, state, th)
    x, _, acc = ram_step(block, f, state.theta_z, f(state.theta_z), rng)
    state.theta_z = np.array(x)
    return acc


def _ram_theta_gamma_rho(ctx, state, rng) -> bool:
    block = state.ram[Block.THETA_GAMMA_RHO]
    x0 = np.append(state.theta_gamma, state.rho_star) if ctx.estimate_rho else state.theta_gamma
    f = lambda x: log_target_theta_gamma_rho(ctx, state, x)
    x, _, acc = ram_step(block, f, x0, f(x0), rng)
    state.theta_gamma = np.array(x[:2])
    if ctx.estimate_rho:
        state.rho_star = float(x[2])
    return acc


def ram_step_block(block: Block, ctx: ChainContext, state: ChainState, rng) -> bool:
    """One adaptive Metropolis update of ``block``; returns the acceptance flag."""
    if block is Block.THETA_Z:
        return _ram_theta_z(ctx, state, rng)
    return _ram_theta_gamma_rho(ctx, state, rng)


def sweep(ctx: ChainContext, state: ChainState, rngs: dict) -> None:
    order = ctx.config.sweep_order or DEFAULT_ORDER
    for name in order:
        rng = rngs[name]
        if name == "mu_z":
            if ctx.uses_z:
                state.mu_z = gibbs_mu_z(ctx, state, rng)
        elif name == "theta_z":
            if ctx.uses_z:
                _ram_theta_z(ctx, state, rng)
        elif name == "gamma_z":
            if ctx.uses_z and ctx.ref is Reformulation.II:
                state.gamma_z, state.gamma = gibbs_gamma_z(ctx, state, rng)
        elif name == "sigma2":
            state.sigma2_eps = gibbs_sigma2(ctx, state, rng)
        elif name == "beta":
            state.beta = gibbs_beta(ctx, state, rng)
        elif name == "theta_gamma_rho":
            if ctx.spatial:
                _ram_theta_gamma_rho(ctx, state, rng)
        elif name == "gamma":
            if ctx.spatial:
                state.gamma = gibbs_gamma(ctx, state, rng)
        else:
            raise ConfigError(f"unknown sweep step {name!r}")
    state.iteration += 1


def initial_state(ctx: ChainContext) -> ChainState:
    cfg = ctx.config
    mid = ctx.priors.box_mid()
    st = ChainState(
        beta=np.zeros(ctx.data.B + 1),
        sigma2_eps=float(np.var(ctx.data.y)) or 1.0,
        gamma=np.zeros(ctx.M),
        gamma_z=np.zeros(ctx.M),
        mu_z=0.0,
        theta_gamma=mid.copy(),
        theta_z=mid.copy(),
        rho_star=0.0,
    )
    for key, val in (cfg.init or {}).items():
        if not hasattr(st, key):
            raise ConfigError(f"unknown initial value {key!r}")
        cur = getattr(st, key)
        setattr(st, key, np.array(val, dtype=float) if isinstance(cur, np.ndarray) else float(val))
    dim_g = 3 if ctx.estimate_rho else 2
    st.ram = {
        Block.THETA_Z: RamBlock(2, df=cfg.t_df, adapt=cfg.adapt),
        Block.THETA_GAMMA_RHO: RamBlock(dim_g, df=cfg.t_df, adapt=cfg.adapt),
    }
    return st


def block_rngs(seed_or_rng) -> dict:
    """Independent generator per sweep step, derived from one seed."""
    if isinstance(seed_or_rng, np.random.Generator):
        children = seed_or_rng.spawn(len(STREAMS))
        return dict(zip(STREAMS, children))
    ss = seed_or_rng if isinstance(seed_or_rng, np.random.SeedSequence) else np.random.SeedSequence(seed_or_rng)
    return {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(STREAMS, ss.spawn(len(STREAMS)))}


# -- summaries -----------------------------------------------------------------
def ess_initial_monotone(x) -> float:
    """Effective sample size with Geyer's initial monotone sequence estimator."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    xc = x - x.mean()
    var = float(xc @ xc) / n
    if var <= 0 or not np.isfinite(var):
        return float(n)
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n] / n
    rho = acov / acov[0]
    n_pairs = n // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    neg = np.flatnonzero(pairs <= 0)
    k = neg[0] if neg.size else n_pairs
    pairs = np.minimum.accumulate(pairs[:k]) if k else pairs[:0]
    tau = -1.0 + 2.0 * float(pairs.sum())
    tau = max(tau, 1.0 / n)
    return float(min(n, n / tau))


@dataclass(frozen=True)
class ParamSummary:
    mean: float
    sd: float
    lower: float
    upper: float
    ess: float


@dataclass(eq=False)
class PosteriorSummary:
    params: dict
    acceptance: dict
    draws: dict
    n_retained: int
    eta_mean: np.ndarray | None = None
    eta_var: np.ndarray | None = None
    gamma_draws: np.ndarray | None = None
    sigma2_mean: float | None = None
    wall_time: float = 0.0
    model_kind: ModelKind | None = None
    final_state: ChainState | None = None

    @classmethod
    def from_draws(cls, draws: dict, acceptance: dict, **kw) -> "PosteriorSummary":
        params = {}
        for name, x in draws.items():
            x = np.asarray(x)
            lo, hi = np.quantile(x, [0.025, 0.975])
            params[name] = ParamSummary(float(x.mean()), float(x.std(ddof=1)) if x.size > 1 else 0.0,
                                        float(lo), float(hi), ess_initial_monotone(x))
        n = len(next(iter(draws.values()))) if draws else 0
        return cls(params, acceptance, draws, n, **kw)

    def __getitem__(self, name) -> ParamSummary:
        return self.params[name]


def draw_names(ctx: ChainContext) -> list:
    names = ["beta0"] + [f"beta_{c}" for c in ctx.data.covariate_names] + ["sigma2_eps"]
    if ctx.spatial:
        names += ["theta_gamma_tau", "theta_gamma_kappa", "range_gamma", "sigma2_gamma"]
    if ctx.uses_z:
        names += ["rho", "mu_z", "theta_z_tau", "theta_z_kappa", "range_z", "sigma2_z"]
    return names


def _record(ctx: ChainContext, st: ChainState) -> list:
    row = [*st.beta.tolist(), st.sigma2_eps]
    if ctx.spatial:
        tg, kg = st.theta_gamma
        row += [tg, kg, SQRT8 / math.exp(kg), marginal_variance(math.exp(tg), math.exp(kg))]
    if ctx.uses_z:
        tz, kz = st.theta_z
        row += [ctx.rho_of(st.rho_star), st.mu_z, tz, kz, SQRT8 / math.exp(kz),
                marginal_variance(math.exp(tz), math.exp(kz))]
    return row


class TraceWriter:
    """Streams retained draws to CSV, one row per retained iteration."""

    def __init__(self, path, names):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(["iteration", *names])

    def write(self, iteration, row):
        self._w.writerow([iteration, *(repr(float(v)) for v in row)])

    def close(self):
        self._fh.close()


def write_trace_csv(summary: PosteriorSummary, path) -> Path:
    names = list(summary.draws)
    tw = TraceWriter(path, names)
    for i in range(summary.n_retained):
        tw.write(i, [summary.draws[k][i] for k in names])
    tw.close()
    return tw.path


def run_chain(config: ModelConfig, data: SpatialData, rng=None, callback=None) -> PosteriorSummary:
    """Run one chain; ``rng`` (seed, SeedSequence or Generator) defaults to ``config.seed``."""
    t0 = time.perf_counter()
    ctx = ChainContext(data, config)
    rngs = block_rngs(config.seed if rng is None else rng)
    state = initial_state(ctx)
    names = draw_names(ctx)
    keep = config.n_retained
    out = np.empty((keep, len(names)))
    gam = np.empty((keep, ctx.M)) if (config.keep_fields and ctx.spatial) else None
    eta_sum = np.zeros(data.n)
    eta_sq = np.zeros(data.n)
    s2_sum = 0.0
    writer = TraceWriter(config.trace_path, names) if config.trace_path else None
    k = 0
    try:
        for t in range(config.iterations):
            try:
                sweep(ctx, state, rngs)
            except Exception as exc:
                raise ChainError(t, exc) from exc
            if callback is not None:
                callback(t, state)
            if t >= config.burn_in and (t - config.burn_in) % config.thinning == 0:
                row = _record(ctx, state)
                out[k] = row
                if writer:
                    writer.write(t, row)
                eta = ctx.X @ state.beta
                if ctx.spatial:
                    eta = eta + ctx.psi @ state.gamma
                    if gam is not None:
                        gam[k] = state.gamma
                eta_sum += eta
                eta_sq += eta * eta
                s2_sum += state.sigma2_eps
                k += 1
    finally:
        if writer:
            writer.close()
    draws = {name: out[:, j].copy() for j, name in enumerate(names)}
    acceptance = {}
    if ctx.uses_z:
        acceptance[Block.THETA_Z.value] = state.ram[Block.THETA_Z].acceptance_rate
    if ctx.spatial:
        acceptance[Block.THETA_GAMMA_RHO.value] = state.ram[Block.THETA_GAMMA_RHO].acceptance_rate
    eta_mean = eta_sum / keep
    eta_var = np.maximum(eta_sq / keep - eta_mean ** 2, 0.0)
    summary = PosteriorSummary.from_draws(
        draws, acceptance, eta_mean=eta_mean, eta_var=eta_var, gamma_draws=gam,
        sigma2_mean=s2_sum / keep, model_kind=config.model_kind)
    summary.wall_time = time.perf_counter() - t0
    summary.final_state = state
    return summary
