"""Matern SPDE precision matrices (alpha = 2, nu = 1, d = 2) and parameter maps.

With lumped mass ``C`` and stiffness ``G`` the precision is
``Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)``. Marginal variance and
range follow ``sigma^2 = 1 / (4 pi kappa^2 tau^2)`` and ``r = sqrt(8) / kappa``.
"""
from __future__ import annotations

import math
import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import NonPositiveInput
from .mesh import FemMatrices
from .sparse_la import SparseSym

SQRT8 = math.sqrt(8.0)


@dataclass(frozen=True, eq=False)
class SpdeStructure:
    """Value arrays of ``C``, ``2G`` and ``G C^{-1} G`` on one shared pattern."""

    pattern: SparseSym
    c: np.ndarray
    g2: np.ndarray
    gcg: np.ndarray

    def values(self, tau: float, kappa: float) -> np.ndarray:
        k2 = kappa * kappa
        return (tau * tau) * ((k2 * k2) * self.c + k2 * self.g2 + self.gcg)

    def precision(self, tau: float, kappa: float) -> SparseSym:
        return self.pattern.with_data(self.values(tau, kappa))


_STRUCTURES: "weakref.WeakKeyDictionary[FemMatrices, SpdeStructure]" = weakref.WeakKeyDictionary()


def spde_structure(fem: FemMatrices) -> SpdeStructure:
    hit = _STRUCTURES.get(fem)
    if hit is not None:
        return hit
    C = sp.diags(fem.c_diag, format="csc")
    G = fem.G.to_scipy()
    GCG = (G @ sp.diags(1.0 / fem.c_diag) @ G).tocsc()
    union = (abs(C) + abs(G) + abs(GCG)).tocsc()
    pattern = SparseSym.from_scipy(union)
    # gather each part at the stored (row, col) entries of the union
    cols = np.repeat(np.arange(pattern.dim), np.diff(pattern.indptr))
    rows = pattern.indices
    parts = [np.asarray(sp.csc_matrix(p)[rows, cols]).ravel() for p in (C, 2.0 * G, GCG)]
    struct = SpdeStructure(pattern.with_data(np.zeros(pattern.nnz)), *parts)
    _STRUCTURES[fem] = struct
    return struct


@dataclass(frozen=True, eq=False)
class GmrfSpec:
    """SPDE field parameters on the log scale: ``theta = (log tau, log kappa)``."""

    theta_tau: float
    theta_kappa: float
    fem: FemMatrices | None = None
    alpha: int = 2

    @property
    def tau(self) -> float:
        return math.exp(self.theta_tau)

    @property
    def kappa(self) -> float:
        return math.exp(self.theta_kappa)

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.theta_tau, self.theta_kappa])

    @property
    def sigma2(self) -> float:
        return marginal_variance(self.tau, self.kappa)

    @property
    def range(self) -> float:
        return practical_range(self.kappa)

    def with_fem(self, fem: FemMatrices) -> "GmrfSpec":
        return GmrfSpec(self.theta_tau, self.theta_kappa, fem, self.alpha)

    @classmethod
    def from_tau_kappa(cls, tau: float, kappa: float, fem=None) -> "GmrfSpec":
        if not (tau > 0 and kappa > 0):
            raise NonPositiveInput("tau and kappa must be positive")
        return cls(math.log(tau), math.log(kappa), fem)


def marginal_variance(tau: float, kappa: float) -> float:
    return 1.0 / (4.0 * math.pi * kappa * kappa * tau * tau)


def practical_range(kappa: float) -> float:
    return SQRT8 / kappa


def precision(spec: GmrfSpec, fem: FemMatrices | None = None) -> SparseSym:
    fem = fem if fem is not None else spec.fem
    if fem is None:
        raise ValueError("GmrfSpec carries no FEM matrices")
    return spde_structure(fem).precision(spec.tau, spec.kappa)


def precision_theta(structure: SpdeStructure, theta) -> SparseSym:
    return structure.precision(math.exp(theta[0]), math.exp(theta[1]))


def params_to_interpretable(spec: GmrfSpec) -> tuple[float, float]:
    """(marginal variance, practical range) of the field."""
    return spec.sigma2, spec.range


def interpretable_to_params(sigma2: float, range_: float, fem: FemMatrices | None = None) -> GmrfSpec:
    if not (sigma2 > 0 and range_ > 0):
        raise NonPositiveInput(f"sigma2={sigma2} and range={range_} must be positive")
    kappa = SQRT8 / range_
    tau = (4.0 * math.pi * kappa * kappa * sigma2) ** -0.5
    return GmrfSpec.from_tau_kappa(tau, kappa, fem)


def theta_from_interpretable(sigma2: float, range_: float) -> np.ndarray:
    return interpretable_to_params(sigma2, range_).theta
