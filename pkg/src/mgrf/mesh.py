"""Structured triangulations, P1 finite-element matrices and point projection."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateDomain, PointOutsideMesh
from .sparse_la import SparseSym

POINT_TOL = 1e-10


@dataclass(frozen=True)
class Rectangle:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax - self.xmin > 0 and self.ymax - self.ymin > 0):
            raise DegenerateDomain(
                f"rectangle [{self.xmin}, {self.xmax}] x [{self.ymin}, {self.ymax}] has zero extent")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.width, self.height))

    def contains(self, pts, tol: float = POINT_TOL) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return ((pts[:, 0] >= self.xmin - tol) & (pts[:, 0] <= self.xmax + tol)
                & (pts[:, 1] >= self.ymin - tol) & (pts[:, 1] <= self.ymax + tol))


UNIT_SQUARE = Rectangle(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True, eq=False)
class FemMatrices:
    """Lumped mass ``C`` (diagonal) and P1 stiffness ``G``."""

    C: SparseSym
    G: SparseSym
    c_diag: np.ndarray
    area: float

    @property
    def dim(self) -> int:
        return self.C.dim


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangulation with counter-clockwise triangles.

    ``interior`` flags nodes inside the inference domain; the remaining nodes
    belong to the boundary-extension ring.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    interior: np.ndarray
    domain: Rectangle | None = None

    @property
    def M(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def fem(self) -> FemMatrices:
        return assemble_fem(self)

    @cached_property
    def _affine(self):
        # barycentric coordinates: lam_{1,2} = T^{-1} (x - p0), lam_0 = 1 - lam_1 - lam_2
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        inv = np.empty((self.n_triangles, 2, 2))
        inv[:, 0, 0] = d2[:, 1] / det
        inv[:, 0, 1] = -d2[:, 0] / det
        inv[:, 1, 0] = -d1[:, 1] / det
        inv[:, 1, 1] = d1[:, 0] / det
        return p[:, 0], inv

    @classmethod
    def from_arrays(cls, nodes, triangles, interior=None, domain=None) -> "TriMesh":
        nodes = np.asarray(nodes, dtype=float)
        tri = np.asarray(triangles, dtype=np.int64).copy()
        p = nodes[tri]
        area2 = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                 - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
        flip = area2 < 0
        tri[flip] = tri[flip][:, [0, 2, 1]]
        if interior is None:
            interior = np.ones(nodes.shape[0], dtype=bool)
        return cls(nodes, tri, np.asarray(interior, dtype=bool), domain)


def _grid_shape(width: float, height: float, target: int) -> tuple[int, int]:
    """Grid closest to ``target`` nodes among those with cell aspect ratio <= 4/3."""
    best = None
    for ny in range(2, target + 1):
        base = (ny - 1) * width / height + 1
        for nx in range(max(2, int(np.floor(base)) - 1), int(np.ceil(base)) + 2):
            cell_ratio = abs(np.log((width / (nx - 1)) / (height / (ny - 1))))
            key = (cell_ratio > np.log(4.0 / 3.0) + 1e-12, abs(nx * ny - target), cell_ratio)
            if best is None or key < best[0]:
                best = (key, nx, ny)
        if 2 * ny > target:
            break
    return best[1], best[2]


def build_mesh(domain: Rectangle = UNIT_SQUARE, target_nodes: int = 523,
               extension_fraction: float = 0.2) -> TriMesh:
    """Structured triangulation of ``domain`` grown by ``extension_fraction``
    times the domain diameter on every side.

    Grid cells are split along alternating diagonals; the node count is the
    grid size closest to ``target_nodes`` with near-square cells.
    """
    if not isinstance(domain, Rectangle):
        domain = Rectangle(*domain)
    if target_nodes < 9:
        raise ValueError("target_nodes must be at least 9")
    if not 0.0 <= extension_fraction <= 1.0:
        raise ValueError("extension_fraction must lie in [0, 1]")
    ext = extension_fraction * domain.diameter
    x0, x1 = domain.xmin - ext, domain.xmax + ext
    y0, y1 = domain.ymin - ext, domain.ymax + ext
    nx, ny = _grid_shape(x1 - x0, y1 - y0, target_nodes)
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            if j % 2 == 0:
                tris.append((a, b, d))
                tris.append((a, d, c))
            else:
                tris.append((a, b, c))
                tris.append((b, d, c))
    interior = domain.contains(nodes)
    return TriMesh(nodes, np.asarray(tris, dtype=np.int64), interior, domain)


def assemble_fem(mesh: TriMesh) -> FemMatrices:
    """Lumped mass and stiffness matrices of the P1 basis."""
    p = mesh.nodes[mesh.triangles]
    area = mesh.signed_areas()
    # b_i, c_i: gradients of the hat functions times 2A
    b = np.stack([p[:, 1, 1] - p[:, 2, 1], p[:, 2, 1] - p[:, 0, 1], p[:, 0, 1] - p[:, 1, 1]], axis=1)
    c = np.stack([p[:, 2, 0] - p[:, 1, 0], p[:, 0, 0] - p[:, 2, 0], p[:, 1, 0] - p[:, 0, 0]], axis=1)
    local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4.0 * area[:, None, None])
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    M = mesh.M
    G = sp.csc_matrix((local.ravel(), (rows, cols)), shape=(M, M))
    G.sum_duplicates()
    c_diag = np.bincount(mesh.triangles.ravel(), weights=np.repeat(area / 3.0, 3), minlength=M)
    C = sp.diags(c_diag, format="csc")
    return FemMatrices(SparseSym.from_scipy(C), SparseSym.from_scipy(G), c_diag, float(area.sum()))


@dataclass(frozen=True, eq=False)
class Projector:
    """Sparse barycentric interpolation from nodal weights to locations."""

    psi: sp.csr_matrix
    triangle: np.ndarray

    @property
    def shape(self):
        return self.psi.shape

    def __matmul__(self, values):
        return self.psi @ values


def locate(mesh: TriMesh, locations, tol: float = POINT_TOL, chunk: int = 256):
    """Containing triangle (lowest index on ties) and barycentric weights."""
    pts = np.atleast_2d(np.asarray(locations, dtype=float))
    p0, inv = mesh._affine
    n = pts.shape[0]
    tri_idx = np.empty(n, dtype=np.int64)
    lam = np.empty((n, 3))
    for start in range(0, n, chunk):
        q = pts[start:start + chunk]
        d = q[:, None, :] - p0[None, :, :]
        l12 = np.einsum("tij,ntj->nti", inv, d)
        l0 = 1.0 - l12[..., 0] - l12[..., 1]
        bary = np.concatenate([l0[..., None], l12], axis=2)
        inside = np.all(bary >= -tol, axis=2)
        hit = inside.any(axis=1)
        if not hit.all():
            raise PointOutsideMesh(start + int(np.argmin(hit)))
        first = np.argmax(inside, axis=1)
        tri_idx[start:start + q.shape[0]] = first
        lam[start:start + q.shape[0]] = bary[np.arange(q.shape[0]), first]
    lam = np.clip(lam, 0.0, 1.0)
    lam /= lam.sum(axis=1, keepdims=True)
    return tri_idx, lam


def project(mesh: TriMesh, locations) -> Projector:
    tri_idx, lam = locate(mesh, locations)
    n = lam.shape[0]
    rows = np.repeat(np.arange(n), 3)
    cols = mesh.triangles[tri_idx].ravel()
    psi = sp.csr_matrix((lam.ravel(), (rows, cols)), shape=(n, mesh.M))
    psi.sum_duplicates()
    psi.eliminate_zeros()
    return Projector(psi, tri_idx)


def write_mesh_csv(mesh: TriMesh, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    node_path, tri_path = out / "nodes.csv", out / "triangles.csv"
    with node_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "x", "y", "interior"])
        for i, ((x, y), flag) in enumerate(zip(mesh.nodes, mesh.interior)):
            w.writerow([i, repr(float(x)), repr(float(y)), int(flag)])
    with tri_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["triangle", "v0", "v1", "v2"])
        for i, t in enumerate(mesh.triangles):
            w.writerow([i, *map(int, t)])
    return node_path, tri_path
