"""Simulation scenarios, replicate execution and evaluation metrics.

A scenario draws a spatial effect and one or more covariate fields that are
correlated with it nodewise, observes them at uniformly scattered locations,
fits a list of models to every replicate and records bias, interval coverage
and CRPS per replicate and model.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import NonPositiveSigma
from .mesh import TriMesh, build_mesh, project
from .mgrf_prior import Reformulation, sample_joint_pair
from .sampler import ModelConfig, ModelKind, PosteriorSummary, Priors, SpatialData, run_chain
from .sparse_la import factorize
from .spde import interpretable_to_params, precision

log = logging.getLogger(__name__)

PAPER_RANGES = (0.1, 0.5, 0.9)
PAPER_MESH_NODES = 523
UNIVARIATE_RHOS = (0.0, 0.3, -0.3, 0.7, -0.7)
MULTIVARIATE_RHOS = ((0.0, 0.3), (0.7, 0.3), (-0.3, 0.7))
RANGE_Z1 = 0.5


class Study(enum.Enum):
    UNIVARIATE = "univariate"
    MULTIVARIATE = "multivariate"


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    study: Study = Study.UNIVARIATE
    rho_true: float | tuple = 0.0
    range_gamma: float = 0.1
    range_z: float | tuple = 0.1
    beta_true: tuple = (-1.5, 1.0)
    sigma2_eps_true: float = 0.1
    mu_z_true: float = 0.0
    n_obs: int = 500
    mesh_nodes: int | None = None
    mesh_extension: float = 0.2
    n_replicates: int = 50
    models: tuple = ("nonspatial", "base", "mgrf", "rsr")
    pc_U: float | None = None
    pc_a: float = 0.05
    sigma2_mu_z: float = 0.1 ** 2
    reformulation: Reformulation = Reformulation.II
    iterations: int = 12000
    burn_in: int = 6000
    thinning: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "study", Study(self.study))
        object.__setattr__(self, "reformulation", Reformulation(self.reformulation))
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be at least 1")
        for m in self.models:
            ModelKind(m)
        if len(self.beta_true) != self.n_covariates + 1:
            raise ValueError("beta_true needs an intercept plus one slope per covariate")

    @property
    def rhos(self) -> tuple:
        return tuple(np.atleast_1d(self.rho_true).tolist())

    @property
    def ranges_z(self) -> tuple:
        return tuple(np.atleast_1d(self.range_z).tolist())

    @property
    def n_covariates(self) -> int:
        return len(self.rhos)

    @property
    def U(self) -> float:
        """PC scaling: 0.9 when the strongest true correlation is 0.7, else 0.5."""
        if self.pc_U is not None:
            return self.pc_U
        return 0.9 if math.isclose(max(abs(r) for r in self.rhos), 0.7) else 0.5

    @property
    def M_target(self) -> int:
        return self.mesh_nodes or self.n_obs

    def model_config(self, kind, seed: int = 0) -> ModelConfig:
        B = self.n_covariates
        priors = Priors(pc_U=self.U, pc_a=self.pc_a, sigma2_mu_z=self.sigma2_mu_z,
                        mu_beta=(0.0,) * B, sigma2_beta=(100.0 ** 2,) * B)
        return ModelConfig(model_kind=ModelKind(kind), reformulation=self.reformulation,
                           priors=priors, iterations=self.iterations, burn_in=self.burn_in,
                           thinning=self.thinning, seed=seed)

    def with_(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


def _univariate_grid(name, rhos, N, **kw):
    out = []
    for rho in rhos:
        for rg in PAPER_RANGES:
            for rz in PAPER_RANGES:
                out.append(ScenarioConfig(name=f"{name}:rho={rho}:rg={rg}:rz={rz}", rho_true=rho,
                                          range_gamma=rg, range_z=rz, n_replicates=N, **kw))
    return out


def _multivariate_grid(name, pairs, N, **kw):
    out = []
    for pair in pairs:
        for rg in PAPER_RANGES:
            for rz2 in PAPER_RANGES:
                out.append(ScenarioConfig(
                    name=f"{name}:rho={pair[0]},{pair[1]}:rg={rg}:rz2={rz2}",
                    study=Study.MULTIVARIATE, rho_true=pair, range_gamma=rg,
                    range_z=(RANGE_Z1, rz2), beta_true=(-1.5, 1.0, -0.5), n_replicates=N,
                    models=("nonspatial", "base", "mgrf", "mgrf_pca", "rsr"), **kw))
    return out


def preset(name: str, n_replicates: int | None = None) -> list[ScenarioConfig]:
    """Named scenario lists.

    ``paper-univariate`` and ``paper-multivariate`` are the full grids (five or
    three correlation settings times nine range pairs); the ``desk-*`` presets
    are the reduced settings used by the acceptance suite; ``smoke`` is one tiny
    replicate.
    """
    N = n_replicates
    if name == "paper-univariate":
        return _univariate_grid(name, UNIVARIATE_RHOS, N or 50, mesh_nodes=PAPER_MESH_NODES)
    if name == "paper-multivariate":
        return _multivariate_grid(name, MULTIVARIATE_RHOS, N or 50, mesh_nodes=PAPER_MESH_NODES)
    desk = dict(n_obs=300, mesh_nodes=300, n_replicates=N or 10)
    if name == "desk-scenario4":
        return [ScenarioConfig(name=name, rho_true=0.7, range_gamma=0.1, range_z=0.9,
                               models=("base", "mgrf", "rsr"), **desk)]
    if name == "desk-scenario1":
        return [ScenarioConfig(name=name, rho_true=0.0, range_gamma=0.1, range_z=0.1,
                               models=("mgrf",), **desk)]
    if name == "desk-multivariate2":
        return [ScenarioConfig(name=f"{name}:rz2={rz2}", study=Study.MULTIVARIATE,
                               rho_true=(0.7, 0.3), range_gamma=0.1, range_z=(RANGE_Z1, rz2),
                               beta_true=(-1.5, 1.0, -0.5), models=("mgrf", "rsr"), **desk)
                for rz2 in (0.5, 0.9)]
    if name == "desk-multivariate3":
        return [ScenarioConfig(name=f"{name}:rz2={rz2}", study=Study.MULTIVARIATE,
                               rho_true=(-0.3, 0.7), range_gamma=0.1, range_z=(RANGE_Z1, rz2),
                               beta_true=(-1.5, 1.0, -0.5), models=("mgrf", "mgrf_pca"), **desk)
                for rz2 in (0.5, 0.9)]
    if name == "smoke":
        return [ScenarioConfig(name=name, rho_true=0.7, range_gamma=0.1, range_z=0.9, n_obs=100,
                               mesh_nodes=100, n_replicates=N or 1, iterations=400, burn_in=200)]
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("paper-univariate", "paper-multivariate", "desk-scenario4", "desk-scenario1",
           "desk-multivariate2", "desk-multivariate3", "smoke")


def grid_size(scenarios) -> int:
    return sum(s.n_replicates * len(s.models) for s in scenarios)


# -- data generation ------------------------------------------------------------
@lru_cache(maxsize=8)
def scenario_mesh(M_target: int, extension: float) -> TriMesh:
    return build_mesh(target_nodes=M_target, extension_fraction=extension)


@dataclass(frozen=True, eq=False)
class Replicate:
    locations: np.ndarray
    gamma_true: np.ndarray
    z_nodes: np.ndarray
    mesh: TriMesh
    data: SpatialData


def _sample_covariate_fields(scenario: ScenarioConfig, mesh: TriMesh, rng):
    fem = mesh.fem
    spec_g = interpretable_to_params(1.0, scenario.range_gamma, fem)
    rhos, ranges = scenario.rhos, scenario.ranges_z
    if len(ranges) != len(rhos):
        raise ValueError("need one covariate range per correlation")
    if len(rhos) == 1:
        spec_z = interpretable_to_params(1.0, ranges[0], fem)
        gamma, z = sample_joint_pair(spec_g, spec_z, scenario.mu_z_true, rhos[0], rng)
        return gamma, z[:, None]
    # every covariate shares the spatial effect's driving noise u
    F_g = factorize(precision(spec_g))
    u = rng.standard_normal(mesh.M)
    gamma = F_g.solve_upper(u)
    cols = []
    for rho, r in zip(rhos, ranges):
        F_z = factorize(precision(interpretable_to_params(1.0, r, fem)))
        v = rng.standard_normal(mesh.M)
        cols.append(scenario.mu_z_true + F_z.solve_upper(rho * u + math.sqrt(1.0 - rho * rho) * v))
    return gamma, np.column_stack(cols)


def generate_replicate(scenario: ScenarioConfig, rng) -> Replicate:
    """Draw one synthetic dataset; the same ``rng`` state gives the same data."""
    mesh = scenario_mesh(scenario.M_target, scenario.mesh_extension)
    gamma, Z = _sample_covariate_fields(scenario, mesh, rng)
    loc = rng.uniform(size=(scenario.n_obs, 2))
    psi = project(mesh, loc).psi
    x_obs = np.asarray(psi @ Z)
    beta = np.asarray(scenario.beta_true, dtype=float)
    eps = rng.normal(0.0, math.sqrt(scenario.sigma2_eps_true), scenario.n_obs)
    y = beta[0] + x_obs @ beta[1:] + psi @ gamma + eps
    data = SpatialData(y, x_obs, psi, Z, mesh.fem,
                       covariate_names=tuple(f"x{j + 1}" for j in range(Z.shape[1])))
    return Replicate(loc, gamma, Z, mesh, data)


# -- metrics --------------------------------------------------------------------
def crps_gaussian(mu, sigma, y_obs):
    """CRPS of ``N(mu, sigma^2)`` at ``y_obs``; vectorized."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        raise NonPositiveSigma("predictive standard deviation must be positive")
    z = (np.asarray(y_obs, dtype=float) - np.asarray(mu, dtype=float)) / sigma
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    out = sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - 1.0 / math.sqrt(math.pi))
    return float(out) if out.ndim == 0 else out


def _rows_of(results):
    return results.rows if isinstance(results, RunResult) else list(results)


def coverage_rate(results, parameter: str, level: float = 0.95, model: str | None = None) -> float:
    """Fraction of rows for ``parameter`` whose interval contains the truth.

    Only the stored equal-tailed 95% intervals are available, so ``level`` must
    be 0.95.
    """
    if not math.isclose(level, 0.95):
        raise ValueError("only 95% intervals are recorded")
    rows = [r for r in _rows_of(results) if r["parameter"] == parameter
            and (model is None or r["model"] == model) and np.isfinite(r["truth"])]
    if not rows:
        return float("nan")
    return float(np.mean([r["lower"] <= r["truth"] <= r["upper"] for r in rows]))


def bias_bstar(results, model: str) -> np.ndarray:
    """Per-replicate sum of absolute slope biases, ordered by replicate."""
    by_rep: dict = {}
    for r in _rows_of(results):
        if r["model"] == model and r["parameter"].startswith("beta_"):
            by_rep.setdefault(r["replicate"], 0.0)
            by_rep[r["replicate"]] += abs(r["bias"])
    return np.array([by_rep[k] for k in sorted(by_rep)])


# -- study execution --------------------------------------------------------------
@dataclass
class RunResult:
    scenario: ScenarioConfig
    rows: list = field(default_factory=list)
    cells: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def values(self, model: str, parameter: str, column: str = "mean") -> np.ndarray:
        rows = sorted((r for r in self.rows if r["model"] == model and r["parameter"] == parameter),
                      key=lambda r: r["replicate"])
        return np.array([r[column] for r in rows], dtype=float)

    def median_abs_bias(self, model: str, parameter: str = "beta_x1") -> float:
        return float(np.median(np.abs(self.values(model, parameter, "bias"))))

    def bias_bstar(self, model: str) -> np.ndarray:
        return bias_bstar(self, model)

    def coverage(self, parameter: str, model: str | None = None) -> float:
        return coverage_rate(self, parameter, 0.95, model)

    def aggregates(self) -> dict:
        out = {}
        for model in self.scenario.models:
            entry = {"n_ok": sum(1 for c in self.cells if c["model"] == model)}
            for p in ["beta_x%d" % (j + 1) for j in range(self.scenario.n_covariates)]:
                b = self.values(model, p, "bias")
                entry[f"median_bias_{p}"] = float(np.median(b)) if b.size else None
                entry[f"coverage_{p}"] = self.coverage(p, model)
            bs = self.bias_bstar(model)
            entry["median_bias_bstar"] = float(np.median(bs)) if bs.size else None
            rho = self.values(model, "rho")
            if rho.size:
                entry["median_rho"] = float(np.median(rho))
            crps = [c["crps"] for c in self.cells if c["model"] == model]
            entry["mean_crps"] = float(np.mean(crps)) if crps else None
            out[model] = entry
        return out

    def to_csv(self, path) -> Path:
        import csv
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["scenario", "replicate", "model", "parameter", "truth", "mean", "sd", "lower",
                "upper", "bias", "covered", "ess"]
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "scenario": self.scenario.name})
        return path

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"scenario": _jsonable(asdict(self.scenario)), "aggregates": self.aggregates(),
               "cells": self.cells, "failures": self.failures}
        path.write_text(json.dumps(doc, indent=2, default=_jsonable))
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def replicate_seeds(scenario: ScenarioConfig) -> list:
    """``(data_seed, fit_seed)`` per replicate; every model of a replicate shares
    the fit seed."""
    return [tuple(s.spawn(2)) for s in np.random.SeedSequence(scenario.seed).spawn(scenario.n_replicates)]


def _truths(scenario: ScenarioConfig, kind: ModelKind) -> dict:
    beta = scenario.beta_true
    t = {"beta0": beta[0]}
    for j in range(scenario.n_covariates):
        t[f"beta_x{j + 1}"] = beta[j + 1]
    if kind in (ModelKind.MGRF, ModelKind.MGRF_PCA):
        t["rho"] = scenario.rhos[0] if scenario.n_covariates == 1 else float("nan")
    if kind is not ModelKind.NON_SPATIAL:
        t["range_gamma"] = scenario.range_gamma
    return t


def summarize_cell(scenario, rep: int, model: str, summary: PosteriorSummary, data: SpatialData):
    kind = ModelKind(model)
    rows = []
    for name, truth in _truths(scenario, kind).items():
        p = summary[name]
        rows.append({"replicate": rep, "model": model, "parameter": name, "truth": truth,
                     "mean": p.mean, "sd": p.sd, "lower": p.lower, "upper": p.upper,
                     "bias": p.mean - truth, "covered": bool(p.lower <= truth <= p.upper),
                     "ess": p.ess})
    sd = np.sqrt(summary.eta_var + summary.sigma2_mean)
    crps = float(np.mean(crps_gaussian(summary.eta_mean, sd, data.y)))
    cell = {"replicate": rep, "model": model, "crps": crps, "wall_time": summary.wall_time,
            "acceptance": summary.acceptance}
    return rows, cell


def run_cell(scenario: ScenarioConfig, rep: int, model: str):
    """Fit one model to one replicate; data are regenerated from the replicate seed."""
    data_seed, fit_seed = replicate_seeds(scenario)[rep]
    replicate = generate_replicate(scenario, np.random.default_rng(data_seed))
    cfg = scenario.model_config(model)
    summary = run_chain(cfg, replicate.data, fit_seed)
    return summarize_cell(scenario, rep, model, summary, replicate.data)


def _safe_cell(args):
    scenario, rep, model = args
    t0 = time.perf_counter()
    try:
        rows, cell = run_cell(scenario, rep, model)
        return rep, model, rows, cell, None
    except Exception as exc:  # recorded per cell
        return rep, model, [], None, f"{type(exc).__name__}: {exc} ({time.perf_counter() - t0:.1f}s)"


def run_study(scenario: ScenarioConfig, workers: int = 1, cell_dir=None) -> RunResult:
    """Run every (replicate, model) cell.

    With ``cell_dir`` each finished cell is stored as JSON and skipped on a
    rerun. Cells run in worker processes when ``workers > 1``; results are
    merged in cell order so the output does not depend on scheduling.
    """
    tasks = [(scenario, r, m) for r in range(scenario.n_replicates) for m in scenario.models]
    done = {}
    cell_dir = Path(cell_dir) if cell_dir else None
    if cell_dir:
        cell_dir.mkdir(parents=True, exist_ok=True)
        for _, r, m in tasks:
            f = cell_dir / f"r{r:04d}_{m}.json"
            if f.exists():
                doc = json.loads(f.read_text())
                done[(r, m)] = (r, m, doc["rows"], doc["cell"], None)
    todo = [t for t in tasks if (t[1], t[2]) not in done]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_safe_cell, todo))
    else:
        outs = [_safe_cell(t) for t in todo]
    for out in outs:
        r, m, rows, cell, err = out
        done[(r, m)] = out
        if err is None and cell_dir:
            (cell_dir / f"r{r:04d}_{m}.json").write_text(json.dumps({"rows": rows, "cell": cell}))
        if err is not None:
            log.warning("cell replicate=%d model=%s failed: %s", r, m, err)
    result = RunResult(scenario)
    for _, r, m in tasks:
        _, _, rows, cell, err = done[(r, m)]
        if err is None:
            result.rows.extend(rows)
            result.cells.append(cell)
        else:
            result.failures.append({"replicate": r, "model": m, "error": err})
    return result
