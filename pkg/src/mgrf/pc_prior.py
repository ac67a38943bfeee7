"""Penalized-complexity prior for a correlation parameter with base model 0.

The distance to the base model is ``d(rho) = sqrt(-log R(rho))`` with
``R(rho) = (1 + (w-1) rho) (1 - rho)^(w-1)``, and the prior puts an
exponential(lambda) law on ``d`` separately on each side of zero, each side
carrying mass one half. The support is ``(-1/(w-1), 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate

from .errors import AtBaseModel, NoSolution, OutOfSupport

BASE_TOL = 1e-12
_STAR_MAX = 37.0  # tanh(37/2) rounds to 1 in double precision


def fisher_z(rho: float) -> float:
    if not -1.0 < rho < 1.0:
        raise OutOfSupport(f"rho={rho} outside (-1, 1)")
    return math.log((1.0 + rho) / (1.0 - rho))


def fisher_z_inv(rho_star):
    return np.tanh(np.asarray(rho_star) / 2.0) if np.ndim(rho_star) else math.tanh(rho_star / 2.0)


def log_jacobian(rho_star):
    """``log |d rho / d rho*|``."""
    return math.log(2.0) + rho_star - 2.0 * np.logaddexp(0.0, rho_star)


def neg_log_r(rho, w: int = 2):
    """``-log R(rho)``, accurate near zero."""
    rho = np.asarray(rho, dtype=float)
    k = w - 1.0
    out = -np.log1p(k * rho) - k * np.log1p(-rho)
    small = np.abs(rho) < 1e-4
    if np.any(small):
        r = rho[small] if rho.ndim else rho
        series = w * k * r ** 2 / 2.0 - k * w * (w - 2.0) * r ** 3 / 3.0
        if rho.ndim:
            out[small] = series
        else:
            out = series
    return out


def distance(rho, w: int = 2):
    return np.sqrt(np.maximum(neg_log_r(rho, w), 0.0))


@dataclass(frozen=True)
class PcRhoPrior:
    lam: float
    w: int = 2
    U: float | None = None
    a: float | None = None

    def __post_init__(self):
        if self.w < 2:
            raise ValueError("w must be at least 2")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    @classmethod
    def calibrated(cls, U: float = 0.8, a: float = 0.05, w: int = 2) -> "PcRhoPrior":
        return cls(calibrate_lambda(w, U, a), w, U, a)

    @property
    def lower(self) -> float:
        return -1.0 / (self.w - 1)

    @property
    def lower_star(self) -> float:
        """Lower support bound in Fisher-z coordinates."""
        if self.w == 2:
            return -math.inf
        return math.log((1.0 + self.lower) / (1.0 - self.lower))

    def in_support(self, rho: float) -> bool:
        return self.lower < rho < 1.0

    def _log_pdf(self, rho):
        rho = np.asarray(rho, dtype=float)
        k = self.w - 1.0
        nl = neg_log_r(rho, self.w)
        d = np.sqrt(nl)
        # |(w-1)/2 (1/(1-rho) - 1/(1+(w-1)rho))| = (w-1) w |rho| / (2 (1-rho)(1+(w-1)rho))
        with np.errstate(divide="ignore"):
            log_slope = (math.log(k * self.w / 2.0) + np.log(np.abs(rho))
                         - np.log1p(-rho) - np.log1p(k * rho))
            # printed density has total mass 2 (one per side); halve it
            return math.log(0.5) + log_slope + math.log(self.lam) - np.log(d) - self.lam * d

    def log_density(self, rho: float) -> float:
        if not self.in_support(rho):
            raise OutOfSupport(f"rho={rho} outside ({self.lower}, 1)")
        if abs(rho) < BASE_TOL:
            raise AtBaseModel("density at the base model is only defined as a limit")
        return float(self._log_pdf(rho))

    def pdf(self, rho) -> np.ndarray:
        """Vectorized density; zero outside the support, limit value at 0."""
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        out = np.zeros_like(rho)
        ok = (rho > self.lower) & (rho < 1.0)
        near0 = ok & (np.abs(rho) < BASE_TOL)
        body = ok & ~near0
        out[body] = np.exp(self._log_pdf(rho[body]))
        # d ~ sqrt(w(w-1)/2) |rho| near zero, so the density tends to lam sqrt(w(w-1)/2) / 2
        out[near0] = 0.5 * self.lam * math.sqrt(self.w * (self.w - 1) / 2.0)
        return out

    def _logs_star(self, x, t=None):
        """``log(1 - rho)``, ``log(1 + (w-1) rho)`` and ``-log R`` at ``rho* = x``.

        ``t = x - lower_star`` may be passed separately to resolve points
        closer to the lower support edge than ``x`` itself can represent.
        """
        k = self.w - 1.0
        log_1m = math.log(2.0) - np.logaddexp(0.0, x)
        # 1 + (w-1) rho = (w e^x - (w-2)) / (1 + e^x)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.w == 2:
                num = math.log(2.0) + x
            else:
                if t is None:
                    t = x - self.lower_star
                # w e^x - (w-2) = (w-2) expm1(t)
                near = math.log(self.w - 2.0) + np.log(np.expm1(np.minimum(t, 30.0)))
                far = x + np.log(self.w - (self.w - 2.0) * np.exp(-np.abs(x)))
                num = np.where(t < 30.0, near, far)
        log_1k = num - np.logaddexp(0.0, x)
        nl = -log_1k - k * log_1m
        rho = np.tanh(x / 2.0)
        small = np.abs(rho) < 1e-4
        nl = np.where(small, neg_log_r(np.where(small, rho, 0.0), self.w), nl)
        return log_1m, log_1k, nl

    def _log_pdf_star(self, rho_star, t=None):
        """Log density in Fisher-z space, stable far into the tails."""
        x = np.asarray(rho_star, dtype=float)
        k = self.w - 1.0
        log_1m, log_1k, nl = self._logs_star(x, t)
        d = np.sqrt(nl)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_rho = np.log(np.abs(np.tanh(x / 2.0)))
            log_pdf = (math.log(0.5) + math.log(k * self.w / 2.0) + log_rho - log_1m - log_1k
                       + math.log(self.lam) - np.log(d) - self.lam * d)
        log_pdf = log_pdf + log_jacobian(x)
        # at the lower support edge d is infinite and the density vanishes
        return np.where(np.isnan(log_pdf) | np.isinf(d), -np.inf, log_pdf)

    def log_density_star(self, rho_star: float) -> float:
        """Log density of ``rho* = fisher_z(rho)``; ``-inf`` at the base point."""
        if abs(math.tanh(rho_star / 2.0)) < BASE_TOL or rho_star <= self.lower_star:
            return -math.inf
        return float(self._log_pdf_star(rho_star))

    def pdf_star(self, rho_star) -> np.ndarray:
        x = np.atleast_1d(np.asarray(rho_star, dtype=float))
        out = np.zeros_like(x)
        rho = np.tanh(x / 2.0)
        ok = x > self.lower_star
        near0 = ok & (np.abs(rho) < BASE_TOL)
        body = ok & ~near0
        out[body] = np.exp(self._log_pdf_star(x[body]))
        out[near0] = 0.25 * self.lam * math.sqrt(self.w * (self.w - 1) / 2.0)
        return out

    def tail_mass(self, U: float) -> float:
        return tail_mass(self.lam, self.w, U)

    @cached_property
    def _cdf_grid(self):
        lo = max(self.lower_star, -_STAR_MAX)
        grid = np.linspace(lo, _STAR_MAX, 400_001)
        dens = self.pdf_star(grid)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
        # the left side beyond the grid holds 0.5 exp(-lam d) exactly
        left = 0.0
        if lo > self.lower_star:
            left = 0.5 * math.exp(-self.lam * math.sqrt(float(self._logs_star(np.array(lo))[2])))
        return grid, cdf + left

    def sample(self, rng, size=None):
        """Inverse-CDF draws from a cached trapezoid grid in Fisher-z space.

        Mass beyond the grid ends (where rho rounds to the support edge) is
        mapped to the nearest representable value inside the support.
        """
        grid, cdf = self._cdf_grid
        u = rng.uniform(size=size)
        rho = np.tanh(np.interp(u, cdf, grid) / 2.0)
        rho = np.clip(rho, np.nextafter(self.lower, 1.0), np.nextafter(1.0, 0.0))
        return float(rho) if size is None else rho

    def total_mass(self) -> float:
        """Quadrature of the density over the whole support.

        Carried out in Fisher-z coordinates on geometric sub-intervals, and in
        ``log(rho* - lower_star)`` near a finite lower edge, so that mass lying
        within rounding distance of the support edges is still resolved.
        """
        f = lambda x: float(self.pdf_star(x)[0])
        edges = [0.0] + [10.0 ** k for k in range(-1, 6)] + [math.inf]
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            total += integrate.quad(f, a, b, limit=200)[0]
        lo = self.lower_star
        if lo == -math.inf:
            for a, b in zip(edges[:-1], edges[1:]):
                total += integrate.quad(f, -b, -a, limit=200)[0]
        else:
            # x = lo + e^u, dx = e^u du
            def g(u):
                t = math.exp(u)
                return math.exp(float(self._log_pdf_star(lo + t, t)) + u)
            top = math.log(-lo)
            for a, b in [(-math.inf, -700.0), (-700.0, -50.0), (-50.0, -5.0), (-5.0, top)]:
                total += integrate.quad(g, a, b, limit=200)[0]
        return total


def _side_mass(prior: PcRhoPrior, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    val, _ = integrate.quad(lambda r: float(prior.pdf(r)[0]), lo, hi, limit=400,
                            epsabs=1e-12, epsrel=1e-10)
    return val


def tail_mass(lam: float, w: int, U: float) -> float:
    """``Prob(|rho| > U)`` by adaptive quadrature.

    Each side of zero carries mass one half, so the tails are obtained as one
    half minus the quadrature of the bounded central part, which stays
    accurate even when a small lambda pushes the tail mass towards +-1.
    """
    prior = PcRhoPrior(lam, w)
    upper = 0.5 - _side_mass(prior, 0.0, U)
    lower = 0.5 - _side_mass(prior, -U, 0.0) if -U > prior.lower else 0.0
    return max(upper, 0.0) + max(lower, 0.0)


def calibrate_lambda(w: int, U: float, a: float, tol: float = 1e-10) -> float:
    """Decay rate with ``Prob(|rho| > U) = a`` by bisection on ``log(lambda)``."""
    if not (0.0 < U < 1.0 and 0.0 < a < 1.0):
        raise NoSolution(f"need 0 < U < 1 and 0 < a < 1, got U={U}, a={a}")
    lo, hi = math.log(1e-8), math.log(1e4)
    f_lo = tail_mass(math.exp(lo), w, U) - a
    f_hi = tail_mass(math.exp(hi), w, U) - a
    if f_lo < 0 or f_hi > 0:
        raise NoSolution(f"no lambda gives Prob(|rho| > {U}) = {a} for w={w}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if tail_mass(math.exp(mid), w, U) > a:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))
