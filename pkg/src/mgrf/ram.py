"""Robust adaptive Metropolis with Student-t proposals.

The proposal is ``x' = x + S u`` with ``u`` drawn from a standard multivariate
t distribution. After every step the lower-triangular scale ``S`` is updated
so that ``S S^T`` becomes ``S (I + eta_n (alpha - target) u u^T / |u|^2) S^T``,
which drives the acceptance rate towards ``target``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TARGET_ACCEPT = 0.234


@dataclass
class RamBlock:
    dim: int
    S: np.ndarray = None
    df: float = 4.0
    target: float = TARGET_ACCEPT
    decay: float = 2.0 / 3.0
    adapt: bool = True
    n_steps: int = 0
    n_accepted: int = 0

    def __post_init__(self):
        if self.S is None:
            self.S = 0.1 * np.eye(self.dim)

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_steps if self.n_steps else float("nan")

    def step_size(self) -> float:
        return min(1.0, self.dim * (self.n_steps + 1) ** -self.decay)

    def draw_direction(self, rng) -> np.ndarray:
        # standard multivariate t: normal over sqrt(chi2 / df)
        z = rng.standard_normal(self.dim)
        g = rng.chisquare(self.df)
        return z / math.sqrt(g / self.df)

    def update_scale(self, u: np.ndarray, alpha: float) -> None:
        norm2 = float(u @ u)
        if norm2 == 0.0:
            return
        eta = self.step_size()
        mid = np.eye(self.dim) + eta * (alpha - self.target) * np.outer(u, u) / norm2
        cov = self.S @ mid @ self.S.T
        self.S = np.linalg.cholesky(0.5 * (cov + cov.T))

    def copy(self) -> "RamBlock":
        return RamBlock(self.dim, self.S.copy(), self.df, self.target, self.decay,
                        self.adapt, self.n_steps, self.n_accepted)


def ram_step(block: RamBlock, log_target: Callable[[np.ndarray], float], x: np.ndarray,
             logp: float, rng) -> tuple[np.ndarray, float, bool]:
    """One RAM iteration; returns ``(x, log_target(x), accepted)``."""
    u = block.draw_direction(rng)
    x_new = x + block.S @ u
    logp_new = log_target(x_new)
    log_u = math.log(rng.uniform())
    if math.isfinite(logp_new):
        log_alpha = min(0.0, logp_new - logp)
        alpha = math.exp(log_alpha)
    else:
        log_alpha, alpha = -math.inf, 0.0
    accepted = log_u < log_alpha
    if block.adapt:
        block.update_scale(u, alpha)
    block.n_steps += 1
    if accepted:
        block.n_accepted += 1
        return x_new, logp_new, True
    return x, logp, False


def run_ram(log_target: Callable[[np.ndarray], float], x0, n_iter: int, rng,
            block: RamBlock | None = None) -> tuple[np.ndarray, RamBlock]:
    """Stand-alone RAM chain on a fixed target; used for diagnostics."""
    x = np.asarray(x0, dtype=float)
    block = block or RamBlock(x.size)
    logp = log_target(x)
    out = np.empty((n_iter, x.size))
    for i in range(n_iter):
        x, logp, _ = ram_step(block, log_target, x, logp, rng)
        out[i] = x
    return out, block
