"""Comparison models: non-spatial regression, the base spatial model (correlation
fixed at zero) and restricted spatial regression by conditioning on
orthogonality to the design."""
from __future__ import annotations

import numpy as np

from .errors import RankDeficientDesign
from .sampler import (ModelConfig, ModelKind, PosteriorSummary, SpatialData, rsr_constrain,
                      run_chain)
from .sparse_la import CholFactor


def fit_nonspatial(data: SpatialData, config: ModelConfig, rng=None) -> PosteriorSummary:
    return run_chain(config.with_(model_kind=ModelKind.NON_SPATIAL), data, rng)


def fit_base(data: SpatialData, config: ModelConfig, rng=None) -> PosteriorSummary:
    return run_chain(config.with_(model_kind=ModelKind.BASE), data, rng)


def fit_rsr(data: SpatialData, config: ModelConfig, rng=None) -> PosteriorSummary:
    return run_chain(config.with_(model_kind=ModelKind.RSR), data, rng)


def constraint_matrix(design: np.ndarray, projector) -> np.ndarray:
    """``A = design^T Psi`` of shape ``(p, M)``."""
    psi = getattr(projector, "psi", projector)
    return np.asarray((psi.T @ np.asarray(design)).T)


def constrain_orthogonal(gamma_raw: np.ndarray, Q_factor: CholFactor, design: np.ndarray,
                         projector) -> np.ndarray:
    """Correct ``gamma_raw`` so that ``design^T Psi gamma = 0``.

    ``gamma_c = gamma_raw - Q^{-1} A^T (A Q^{-1} A^T)^{-1} A gamma_raw``; when
    ``gamma_raw`` is a draw from ``N(m, Q^{-1})`` the result is a draw from the
    same Gaussian conditioned on the constraint.
    """
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    if design.shape[1] == 0:
        return np.array(gamma_raw, dtype=float)
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficientDesign("design does not have full column rank")
    return rsr_constrain(np.asarray(gamma_raw, dtype=float), Q_factor,
                         constraint_matrix(design, projector))
