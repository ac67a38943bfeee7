"""Conditional prior of a spatial effect given a confounded covariate field.

Fields share a mesh, so their precision factors share the fill-reducing
permutation. With roots ``R = P^T L`` (``Q = R R^T``) the joint prior of
``(gamma, z)`` has covariance roots ``R^{-T}`` and cross-covariance
``rho R_gamma^{-T} R_z^{-1}``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput, RhoTooExtreme
from .sparse_la import CholFactor, SparseSym, factorize
from .spde import GmrfSpec, precision

RHO_MAX = 0.99
LOG_2PI = math.log(2.0 * math.pi)


class Reformulation(enum.Enum):
    I = "I"
    II = "II"


class Aggregation(enum.Enum):
    SUM = "sum"
    PCA_FIRST = "pca"


@dataclass(frozen=True, eq=False)
class MgrfState:
    rho: float
    gamma: np.ndarray
    z_field: np.ndarray
    spec_gamma: GmrfSpec
    spec_z: GmrfSpec
    mu_z: float = 0.0
    gamma_z: np.ndarray | None = None

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise RhoTooExtreme(f"|rho| must be < 1, got {self.rho}")
        M = self.gamma.shape[0]
        if self.z_field.shape != (M,) or (self.gamma_z is not None and self.gamma_z.shape != (M,)):
            raise DimensionMismatch("gamma, z_field and gamma_z must have equal length")

    @property
    def M(self) -> int:
        return self.gamma.shape[0]

    def factors(self) -> tuple[CholFactor, CholFactor]:
        return prior_factors(self.spec_gamma, self.spec_z)


def prior_factors(spec_gamma: GmrfSpec, spec_z: GmrfSpec) -> tuple[CholFactor, CholFactor]:
    return factorize(precision(spec_gamma)), factorize(precision(spec_z))


def cross_map(F_gamma: CholFactor, F_z: CholFactor, v: np.ndarray) -> np.ndarray:
    """``R_gamma^{-T} R_z^T v``."""
    return F_gamma.solve_upper(F_z.mul_upper(v))


def conditional_moments_I(state: MgrfState, factors=None, rho_max: float = RHO_MAX):
    """Mean and precision of ``gamma | z``:
    ``rho R_gamma^{-T} R_z^T (z - mu_z 1)`` and ``Q_gamma / (1 - rho^2)``."""
    if abs(state.rho) > rho_max:
        raise RhoTooExtreme(f"|rho|={abs(state.rho)} exceeds {rho_max}; use the shift construction")
    F_g, F_z = factors if factors is not None else state.factors()
    mu = state.rho * cross_map(F_g, F_z, state.z_field - state.mu_z)
    Q = precision(state.spec_gamma)
    Q_cond = Q.with_data(Q.data / (1.0 - state.rho ** 2))
    return mu, Q_cond


def apply_shift_II(state: MgrfState, gamma_raw: np.ndarray, factors=None) -> np.ndarray:
    """``gamma_raw + rho R_gamma^{-T} R_z^T (z - gamma_z)``."""
    if state.gamma_z is None:
        raise ValueError("state has no gamma_z")
    F_g, F_z = factors if factors is not None else state.factors()
    return gamma_raw + state.rho * cross_map(F_g, F_z, state.z_field - state.gamma_z)


def sample_joint_pair(spec_gamma: GmrfSpec, spec_z: GmrfSpec, mu_z: float, rho: float, rng,
                      factors=None) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(gamma, z)`` from the joint prior with nodewise correlation ``rho``."""
    if abs(rho) > 1.0:
        raise RhoTooExtreme(f"|rho| must be <= 1, got {rho}")
    F_g, F_z = factors if factors is not None else prior_factors(spec_gamma, spec_z)
    u = rng.standard_normal(F_g.dim)
    v = rng.standard_normal(F_g.dim)
    gamma = F_g.solve_upper(u)
    z = mu_z + F_z.solve_upper(rho * u + math.sqrt(max(0.0, 1.0 - rho * rho)) * v)
    return gamma, z


def aggregate_covariates(z_list, method=Aggregation.SUM) -> tuple[np.ndarray, np.ndarray]:
    """Combine several nodal covariate fields into one.

    ``SUM`` adds them (all loadings 1). ``PCA_FIRST`` returns the first
    principal-component scores of the centered node-by-field matrix with a
    unit-norm loading vector whose first entry is non-negative.
    """
    fields = [np.asarray(z, dtype=float) for z in z_list]
    if not fields:
        raise EmptyInput("no covariate fields given")
    Z = np.column_stack(fields)
    method = Aggregation(method) if not isinstance(method, Aggregation) else method
    if method is Aggregation.SUM:
        return Z.sum(axis=1), np.ones(Z.shape[1])
    Zc = Z - Z.mean(axis=0)
    _, _, vt = np.linalg.svd(Zc, full_matrices=False)
    load = vt[0].copy()
    lead = np.flatnonzero(np.abs(load) > 1e-14)
    if lead.size and load[lead[0]] < 0:
        load = -load
    return Zc @ load, load


# -- log densities --------------------------------------------------------
def gmrf_logpdf(x: np.ndarray, mean, F: CholFactor) -> float:
    """``log N(x; mean, Q^{-1})`` where ``F`` factors ``Q``."""
    r = x - mean if mean is not None else x
    w = F.mul_upper(r)
    return 0.5 * F.logdet() - 0.5 * float(w @ w) - 0.5 * F.dim * LOG_2PI


def conditional_logpdf_I(gamma, z, mu_z, rho, F_gamma: CholFactor, F_z: CholFactor) -> float:
    """``log p(gamma | z)`` under the closed-form conditional prior."""
    e = F_gamma.mul_upper(gamma) - rho * F_z.mul_upper(z - mu_z)
    s = 1.0 - rho * rho
    M = F_gamma.dim
    return 0.5 * F_gamma.logdet() - 0.5 * M * math.log(s) - 0.5 * float(e @ e) / s - 0.5 * M * LOG_2PI
