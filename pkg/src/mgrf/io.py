"""Station data ingestion, standardization, domain rescaling, configuration files
and the five-model comparison table."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np
import yaml
from scipy.spatial import cKDTree

from .errors import ConfigError, EmptyInput, MissingColumn, UnparseableRow, ZeroVariance
from .mesh import Rectangle, build_mesh, project
from .mgrf_prior import Reformulation
from .sampler import ModelConfig, ModelKind, PosteriorSummary, Priors, SpatialData, run_chain

log = logging.getLogger(__name__)

MISSING = {"", "na", "nan", "null", "none", "-999"}
TABLE_DIGITS = 6
APPLICATION_MESH_NODES = 278


# -- station data ---------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class StationDataset:
    station_id: np.ndarray
    coords: np.ndarray
    response: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    response_name: str = "y"
    coord_kind: str = "lonlat"
    date: np.ndarray | None = None
    n_read: int = 0
    n_dropped: int = 0

    @property
    def n(self) -> int:
        return self.response.shape[0]

    def with_(self, **kw) -> "StationDataset":
        return replace(self, **kw)


DEFAULT_COLUMNS = {"id": "id", "lon": "lon", "lat": "lat", "response": "y",
                   "covariates": ["z1", "z2"], "date": None}


def ingest_csv(path, columns: dict | None = None, delimiter: str | None = None) -> StationDataset:
    """Read a delimited station file.

    ``columns`` maps the roles ``id``, ``lon``/``lat`` (or ``x``/``y`` for
    pre-scaled coordinates), ``response``, ``covariates`` (list) and optionally
    ``date`` to header names. Rows with a missing value in a used column are
    dropped and counted; any other non-numeric entry raises UnparseableRow with
    the 1-based file line number.
    """
    cmap = {**DEFAULT_COLUMNS, **(columns or {})}
    kind = "xy" if ("x" in cmap and "y" in cmap and cmap.get("x")) else "lonlat"
    cx, cy = (cmap["x"], cmap["y"]) if kind == "xy" else (cmap["lon"], cmap["lat"])
    numeric = [cx, cy, cmap["response"], *cmap["covariates"]]
    with open(path, newline="") as fh:
        text = fh.read()
    if delimiter is None:
        try:
            delimiter = csv.Sniffer().sniff(text.splitlines()[0], delimiters=",;\t").delimiter
        except (csv.Error, IndexError):
            delimiter = ","
    reader = csv.reader(text.splitlines(), delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EmptyInput(f"{path} is empty") from None
    for col in numeric + [c for c in (cmap.get("id"), cmap.get("date")) if c]:
        if col not in header:
            raise MissingColumn(col)
    idx = {c: header.index(c) for c in header}
    ids, vals, dates = [], [], []
    n_read = n_dropped = 0
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        n_read += 1
        if len(row) < len(header):
            raise UnparseableRow(lineno, f"expected {len(header)} fields, got {len(row)}")
        cells = [row[idx[c]].strip() for c in numeric]
        if any(c.lower() in MISSING for c in cells):
            n_dropped += 1
            continue
        try:
            vals.append([float(c) for c in cells])
        except ValueError as exc:
            raise UnparseableRow(lineno, str(exc)) from None
        ids.append(row[idx[cmap["id"]]].strip() if cmap.get("id") else str(n_read))
        if cmap.get("date"):
            dates.append(row[idx[cmap["date"]]].strip())
    if n_dropped:
        log.info("dropped %d of %d rows with missing values", n_dropped, n_read)
    if not vals:
        raise EmptyInput(f"{path} has no complete rows")
    V = np.array(vals)
    return StationDataset(
        station_id=np.array(ids), coords=V[:, :2], response=V[:, 2], covariates=V[:, 3:],
        covariate_names=tuple(cmap["covariates"]), response_name=cmap["response"],
        coord_kind=kind, date=np.array(dates) if dates else None, n_read=n_read,
        n_dropped=n_dropped)


@dataclass(frozen=True)
class Standardizer:
    mean: dict
    sd: dict

    def transform(self, name: str, x):
        return (np.asarray(x, dtype=float) - self.mean[name]) / self.sd[name]

    def inverse(self, name: str, x):
        return np.asarray(x, dtype=float) * self.sd[name] + self.mean[name]


def standardize(ds: StationDataset) -> tuple[StationDataset, Standardizer]:
    """Center every variable and scale it to unit sample variance."""
    names = [ds.response_name, *ds.covariate_names]
    cols = [ds.response, *ds.covariates.T]
    means, sds = {}, {}
    for name, x in zip(names, cols):
        sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
        if not sd > 0:
            raise ZeroVariance(name)
        means[name], sds[name] = float(np.mean(x)), sd
    st = Standardizer(means, sds)
    y = st.transform(ds.response_name, ds.response)
    X = np.column_stack([st.transform(n, c) for n, c in zip(ds.covariate_names, ds.covariates.T)]) \
        if ds.covariate_names else ds.covariates
    return ds.with_(response=y, covariates=X), st


@dataclass(frozen=True)
class DomainMap:
    """Optional equirectangular projection followed by ``u = (p - origin) * scale``."""

    origin: tuple
    scale: float
    projection_center: tuple | None = None

    def _project(self, coords):
        c = np.asarray(coords, dtype=float)
        if self.projection_center is None:
            return c
        lon0, lat0 = self.projection_center
        return np.column_stack([(c[:, 0] - lon0) * math.cos(math.radians(lat0)), c[:, 1] - lat0])

    def forward(self, coords) -> np.ndarray:
        return (self._project(coords) - np.asarray(self.origin)) * self.scale

    def inverse(self, unit) -> np.ndarray:
        p = np.asarray(unit, dtype=float) / self.scale + np.asarray(self.origin)
        if self.projection_center is None:
            return p
        lon0, lat0 = self.projection_center
        return np.column_stack([p[:, 0] / math.cos(math.radians(lat0)) + lon0, p[:, 1] + lat0])

    @property
    def is_identity(self) -> bool:
        return self.projection_center is None and self.scale == 1.0 and tuple(self.origin) == (0.0, 0.0)


def rescale_domain(ds: StationDataset, jitter: float = 1e-7) -> tuple[StationDataset, DomainMap]:
    """Map coordinates isotropically into the unit square.

    Longitude/latitude are first projected equirectangularly about their
    centroid. Planar coordinates already inside the unit square are left
    untouched. Coincident stations are separated by ``jitter`` along x.
    """
    c = np.asarray(ds.coords, dtype=float)
    if ds.coord_kind == "lonlat":
        center = (float(c[:, 0].mean()), float(c[:, 1].mean()))
        proj = DomainMap((0.0, 0.0), 1.0, center)._project(c)
    else:
        center, proj = None, c
    if center is None and proj.min() >= 0.0 and proj.max() <= 1.0:
        dmap = DomainMap((0.0, 0.0), 1.0, None)
    else:
        lo = proj.min(axis=0)
        extent = float((proj.max(axis=0) - lo).max())
        if not extent > 0:
            raise ZeroVariance("coordinates")
        dmap = DomainMap((float(lo[0]), float(lo[1])), 1.0 / extent, center)
    unit = dmap.forward(c)
    unit = _separate_ties(unit, jitter)
    return ds.with_(coords=unit, coord_kind="unit"), dmap


def _separate_ties(u: np.ndarray, jitter: float) -> np.ndarray:
    seen: dict = {}
    out = u.copy()
    n_ties = 0
    for i, key in enumerate(map(tuple, u)):
        k = seen.get(key, 0)
        if k:
            out[i, 0] += k * jitter
            n_ties += 1
        seen[key] = k + 1
    if n_ties:
        log.info("jittered %d stations with duplicate coordinates", n_ties)
    return out


def nodal_covariates(nodes: np.ndarray, coords: np.ndarray, values: np.ndarray, k: int = 4) -> np.ndarray:
    """Inverse-distance interpolation of station covariates to mesh nodes."""
    k = min(k, coords.shape[0])
    d, j = cKDTree(coords).query(nodes, k=k)
    d, j = d.reshape(len(nodes), k), j.reshape(len(nodes), k)
    w = 1.0 / np.maximum(d, 1e-12) ** 2
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("mk,mkb->mb", w, values[j])


def application_data(ds: StationDataset, mesh_nodes: int = APPLICATION_MESH_NODES,
                     extension: float = 0.2) -> SpatialData:
    """Mesh over the rescaled stations, projector and interpolated nodal covariates."""
    lo, hi = ds.coords.min(axis=0), ds.coords.max(axis=0)
    domain = Rectangle(float(lo[0]), float(lo[1]), float(max(hi[0], lo[0] + 1e-6)),
                       float(max(hi[1], lo[1] + 1e-6)))
    mesh = build_mesh(domain, mesh_nodes, extension)
    psi = project(mesh, ds.coords).psi
    z = nodal_covariates(mesh.nodes, ds.coords, ds.covariates)
    return SpatialData(ds.response, ds.covariates, psi, z, mesh.fem, tuple(ds.covariate_names))


# -- comparison table --------------------------------------------------------------
APPLICATION_MODELS = (ModelKind.NON_SPATIAL, ModelKind.BASE, ModelKind.MGRF,
                      ModelKind.MGRF_PCA, ModelKind.RSR)


def application_config(seed: int = 0, **kw) -> ModelConfig:
    priors = kw.pop("priors", None) or Priors(sigma2_mu_z=1.0, pc_U=0.8)
    base = dict(reformulation=Reformulation.II, iterations=100000, burn_in=50000, thinning=20,
                seed=seed, priors=priors)
    base.update(kw)
    return ModelConfig(**base)


@dataclass
class ComparisonTable:
    columns: list
    rows: list
    summaries: dict = field(default_factory=dict)

    def formatted(self, digits: int = TABLE_DIGITS) -> list:
        def fmt(v):
            if isinstance(v, float):
                return "" if math.isnan(v) else f"{v:.{digits}g}"
            return str(v)
        return [[fmt(r.get(c, float("nan"))) for c in self.columns] for r in self.rows]

    def to_text(self) -> str:
        body = [self.columns] + self.formatted()
        widths = [max(len(r[i]) for r in body) for i in range(len(self.columns))]
        return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            w.writerows(self.formatted())
        return path

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"columns": self.columns, "rows": self.rows}, indent=2,
                                   default=lambda o: None if isinstance(o, float) and math.isnan(o) else str(o)))
        return path


def summary_row(kind: ModelKind, s: PosteriorSummary, covariates) -> dict:
    row = {"model": kind.label}
    for name in ["beta0", *(f"beta_{c}" for c in covariates)]:
        p = s[name]
        row[f"{name}_mean"], row[f"{name}_lower"], row[f"{name}_upper"] = p.mean, p.lower, p.upper
    if "rho" in s.params:
        p = s["rho"]
        row["rho_mean"], row["rho_lower"], row["rho_upper"] = p.mean, p.lower, p.upper
        row["range_z_mean"] = s["range_z"].mean
    if "range_gamma" in s.params:
        row["range_gamma_mean"] = s["range_gamma"].mean
    return row


def run_application(data: SpatialData, config: ModelConfig | None = None) -> ComparisonTable:
    """Fit the five model kinds with the same seed and tabulate means and 95% intervals."""
    config = config or application_config()
    covs = data.covariate_names
    cols = ["model"]
    for name in ["beta0", *(f"beta_{c}" for c in covs)]:
        cols += [f"{name}_mean", f"{name}_lower", f"{name}_upper"]
    cols += ["rho_mean", "rho_lower", "rho_upper", "range_z_mean", "range_gamma_mean"]
    rows, sums = [], {}
    for kind in APPLICATION_MODELS:
        s = run_chain(config.with_(model_kind=kind), data)
        sums[kind] = s
        rows.append(summary_row(kind, s, covs))
    return ComparisonTable(cols, rows, sums)


# -- configuration files -----------------------------------------------------------
_NUM = {"type": "number"}
_BOX = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_NUMS = {"oneOf": [_NUM, {"type": "array", "items": _NUM}]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "threads": {"type": "integer", "minimum": 1},
        "out_dir": {"type": "string"},
        "sampler": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "iterations": {"type": "integer", "minimum": 1},
                "burn_in": {"type": "integer", "minimum": 0},
                "thinning": {"type": "integer", "minimum": 1},
                "reformulation": {"enum": ["I", "II"]},
                "gamma_z_form": {"enum": ["prior", "likelihood"]},
                "adapt": {"type": "boolean"},
            },
        },
        "priors": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "mu_beta0": _NUM, "sigma2_beta0": {"type": "number", "exclusiveMinimum": 0},
                "mu_beta": _NUMS, "sigma2_beta": _NUMS,
                "ig_c": {"type": "number", "exclusiveMinimum": 0},
                "ig_d": {"type": "number", "exclusiveMinimum": 0},
                "theta_tau_box": _BOX, "theta_kappa_box": _BOX,
                "pc_U": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "pc_a": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "pc_w": {"type": "integer", "minimum": 2},
                "mu_mu_z": _NUM, "sigma2_mu_z": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "mesh": {
            "type": "object", "additionalProperties": False,
            "properties": {"target_nodes": {"type": "integer", "minimum": 4},
                           "extension_fraction": {"type": "number", "minimum": 0}},
        },
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "delimiter": {"type": "string"},
                "columns": {"type": "object"},
                "standardize": {"type": "boolean"},
            },
        },
        "simulate": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "preset": {"type": "string"},
                "n_replicates": {"type": "integer", "minimum": 1},
                "overrides": {"type": "object"},
            },
        },
    },
}

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "out_dir": "out",
    "sampler": {"iterations": 100000, "burn_in": 50000, "thinning": 20, "reformulation": "II",
                "gamma_z_form": "prior", "adapt": True},
    "priors": {"mu_beta0": 0.0, "sigma2_beta0": 100.0 ** 4, "mu_beta": 0.0,
               "sigma2_beta": 100.0 ** 2, "ig_c": 0.001, "ig_d": 0.001,
               "theta_tau_box": [-10.0, 0.0], "theta_kappa_box": [1.0, 5.0], "pc_U": 0.8,
               "pc_a": 0.05, "pc_w": 2, "mu_mu_z": 0.0, "sigma2_mu_z": 1.0},
    "mesh": {"target_nodes": APPLICATION_MESH_NODES, "extension_fraction": 0.2},
    "data": {"columns": dict(DEFAULT_COLUMNS), "standardize": True},
    "simulate": {"preset": "smoke", "overrides": {}},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "columns":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, merged with an optional YAML file and overrides, then validated."""
    user = {}
    if path is not None:
        user = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    try:
        jsonschema.validate(user, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{path}: {exc.message}") from None
    cfg = _merge(_merge(DEFAULT_CONFIG, user), overrides or {})
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(exc.message) from None
    return cfg


def _tuple(v):
    return tuple(v) if isinstance(v, list) else v


def priors_from_config(cfg: dict) -> Priors:
    return Priors(**{k: _tuple(v) for k, v in cfg["priors"].items()})


def model_config_from(cfg: dict, kind=ModelKind.MGRF) -> ModelConfig:
    s = cfg["sampler"]
    return ModelConfig(model_kind=ModelKind(kind), reformulation=Reformulation(s["reformulation"]),
                       priors=priors_from_config(cfg), iterations=s["iterations"],
                       burn_in=s["burn_in"], thinning=s["thinning"], seed=cfg["seed"],
                       gamma_z_form=s["gamma_z_form"], adapt=s["adapt"])
