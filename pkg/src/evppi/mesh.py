"""Two-zone triangulations for the projected focal draws.

The inner zone is the convex hull of the points dilated by a fraction of the
bounding-box diagonal and is meshed finely; the outer zone extends further
with coarser triangles so that the boundary conditions of the SPDE solver
stay away from the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import shapely
import triangle
from scipy.spatial import cKDTree
from shapely.geometry import MultiPoint, Polygon

from .errors import ConfigError, ContainmentError, GeometryError, ValidationError

INNER, OUTER = 0, 1


@dataclass(frozen=True)
class MeshConfig:
    inner_dilation: float = 0.15
    outer_dilation: float = 0.50
    min_angle: float = 21.0
    inner_max_edge: float | None = None
    outer_max_edge: float | None = None
    outer_edge_factor: float = 4.0
    min_inner_vertices: int | None = None
    max_vertices: int = 2000
    arc_segments: int = 4
    vertex_cap: int = 200_000

    def __post_init__(self):
        if not 0 < self.inner_dilation < self.outer_dilation:
            raise ConfigError("need 0 < inner_dilation < outer_dilation")
        if not 0 < self.min_angle <= 33.0:
            raise ConfigError("min_angle must lie in (0, 33] degrees for guaranteed termination")
        for name in ("inner_max_edge", "outer_max_edge"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        if self.outer_edge_factor < 1:
            raise ConfigError("outer_edge_factor must be >= 1")

    def target_inner_vertices(self, n_points: int) -> int:
        if self.min_inner_vertices is not None:
            return int(self.min_inner_vertices)
        return min(max(n_points, 400), self.max_vertices)


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    inner_boundary: np.ndarray
    outer_boundary: np.ndarray
    vertex_zone: np.ndarray
    triangle_zone: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_inner_vertices(self) -> int:
        return int(np.sum(self.vertex_zone == INNER))

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs."""
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def stats(self) -> dict:
        return {"vertices": self.n_vertices, "triangles": self.n_triangles,
                "inner_vertices": self.n_inner_vertices}

    def save(self, path: str | Path) -> None:
        """Write the plain-text mesh format (see FORMATS.md)."""
        lines = ["# evppi mesh v1", f"vertices {self.n_vertices}"]
        lines += [f"{x!r} {y!r} {z}" for (x, y), z in zip(self.vertices.tolist(), self.vertex_zone.tolist())]
        lines.append(f"triangles {self.n_triangles}")
        lines += [f"{i} {j} {k} {z}" for (i, j, k), z in zip(self.triangles.tolist(), self.triangle_zone.tolist())]
        for name, poly in (("inner_boundary", self.inner_boundary), ("outer_boundary", self.outer_boundary)):
            lines.append(f"{name} {poly.shape[0]}")
            lines += [f"{x!r} {y!r}" for x, y in poly.tolist()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Mesh":
        rows = [ln.split() for ln in Path(path).read_text().splitlines()
                if ln.strip() and not ln.startswith("#")]
        blocks: dict[str, list[list[str]]] = {}
        i = 0
        while i < len(rows):
            name, count = rows[i][0], int(rows[i][1])
            blocks[name] = rows[i + 1:i + 1 + count]
            i += 1 + count
        try:
            v = np.array(blocks["vertices"], dtype=float)
            t = np.array(blocks["triangles"], dtype=np.int64)
            inner = np.array(blocks["inner_boundary"], dtype=float)
            outer = np.array(blocks["outer_boundary"], dtype=float)
        except KeyError as exc:
            raise ValidationError(f"mesh file lacks the {exc.args[0]} block") from None
        return cls(v[:, :2], t[:, :3], inner, outer, v[:, 2].astype(np.int8), t[:, 3].astype(np.int8))


def _ring(poly: Polygon) -> np.ndarray:
    poly = shapely.geometry.polygon.orient(poly, 1.0)
    return np.asarray(poly.exterior.coords)[:-1]


def _triangulate(inner: np.ndarray, outer: np.ndarray, seeds: np.ndarray,
                 inner_area: float, outer_area: float, min_angle: float) -> dict:
    n_in, n_out = len(inner), len(outer)
    seg_in = np.column_stack([np.arange(n_in), np.roll(np.arange(n_in), -1)])
    seg_out = np.column_stack([np.arange(n_out), np.roll(np.arange(n_out), -1)]) + n_in
    pslg = {
        "vertices": np.vstack([inner, outer]),
        "segments": np.vstack([seg_in, seg_out]),
        "regions": np.array([[*seeds[0], 1, inner_area], [*seeds[1], 2, outer_area]]),
    }
    return triangle.triangulate(pslg, f"pq{min_angle:g}aAQ")


def build_mesh(points, cfg: MeshConfig | None = None) -> Mesh:
    """Triangulate around ``points`` (S x 2, expected to be standardized).

    Without explicit edge lengths, the inner edge length is derived from the
    inner-zone area and tightened until the inner zone holds at least
    ``cfg.target_inner_vertices(S)`` vertices.
    """
    cfg = cfg or MeshConfig()
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError(f"points must be S x 2, got shape {pts.shape}")
    if pts.shape[0] < 3 or not np.all(np.isfinite(pts)):
        raise GeometryError("need at least 3 finite points")
    hull = MultiPoint([tuple(p) for p in pts]).convex_hull
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    diag = float(np.hypot(*(hi - lo)))
    if hull.geom_type != "Polygon" or hull.area <= 1e-12 * diag ** 2:
        raise GeometryError("points are collinear; a 2-D mesh needs non-degenerate geometry")

    inner_poly = hull.buffer(cfg.inner_dilation * diag, quad_segs=cfg.arc_segments)
    outer_poly = hull.buffer(cfg.outer_dilation * diag, quad_segs=cfg.arc_segments)
    inner, outer = _ring(inner_poly), _ring(outer_poly)
    seeds = np.array([tuple(hull.representative_point().coords[0]),
                      tuple(outer_poly.difference(inner_poly).representative_point().coords[0])])

    target = cfg.target_inner_vertices(pts.shape[0])
    edge = cfg.inner_max_edge
    adaptive = edge is None
    if adaptive:
        edge = math.sqrt(2.0 * inner_poly.area / (math.sqrt(3.0) * target))
    calibrated = False
    for _ in range(30):
        outer_edge = cfg.outer_max_edge or cfg.outer_edge_factor * edge
        out = _triangulate(inner, outer, seeds, math.sqrt(3) / 4 * edge ** 2,
                           math.sqrt(3) / 4 * outer_edge ** 2, cfg.min_angle)
        n_v = len(out["vertices"])
        if n_v > cfg.vertex_cap:
            raise ConfigError(f"refinement produced {n_v} vertices (cap {cfg.vertex_cap}); "
                              "use larger maximum edge lengths")
        tzone = np.where(out["triangle_attributes"][:, 0] == 1, INNER, OUTER).astype(np.int8)
        vzone = np.full(n_v, OUTER, dtype=np.int8)
        vzone[np.unique(out["triangles"][tzone == INNER])] = INNER
        n_inner = int(np.sum(vzone == INNER))
        if adaptive and not calibrated and n_inner > 1.1 * target:
            # quality refinement adds vertices beyond the area estimate; rescale once
            calibrated = True
            edge *= math.sqrt(n_inner / target)
            continue
        calibrated = True
        if not adaptive or n_inner >= target:
            break
        edge *= 0.97 * math.sqrt(n_inner / target)
    else:
        raise ConfigError("could not reach the requested inner vertex count")

    verts = np.asarray(out["vertices"], dtype=float)
    tris = np.asarray(out["triangles"], dtype=np.int64)
    flip = Mesh(verts, tris, inner, outer, vzone, tzone).signed_areas() < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    mesh = Mesh(verts, tris, inner, outer, vzone, tzone)
    if not np.all(shapely.contains_xy(inner_poly, pts[:, 0], pts[:, 1])):
        raise GeometryError("inner boundary does not encase every data point")
    return mesh


@dataclass(frozen=True)
class Projector:
    """Sparse S x V barycentric interpolation matrix."""

    A: sp.csr_matrix
    triangle_index: np.ndarray

    def __matmul__(self, x):
        return self.A @ x


def _barycentric(mesh: Mesh, tri_idx: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = mesh.vertices[mesh.triangles[tri_idx]]
    a = p[:, 0]
    e1 = p[:, 1] - a
    e2 = p[:, 2] - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    r = pts - a
    l1 = (r[:, 0] * e2[:, 1] - r[:, 1] * e2[:, 0]) / det
    l2 = (e1[:, 0] * r[:, 1] - e1[:, 1] * r[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def projector(mesh: Mesh, points, tol: float = 1e-10) -> Projector:
    """Locate each point in the mesh and build barycentric weights.

    Among triangles containing a point (several, on shared edges), the one
    with the nearest centroid wins; ties go to the lower triangle index.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValidationError(f"points must be S x 2, got shape {pts.shape}")
    S = pts.shape[0]
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    tree = cKDTree(centroids)
    k = min(16, mesh.n_triangles)
    _, cand = tree.query(pts, k=k)
    cand = np.asarray(cand).reshape(S, k)

    chosen = np.full(S, -1, dtype=np.int64)
    weights = np.zeros((S, 3))
    for j in range(k):
        todo = chosen < 0
        if not np.any(todo):
            break
        idx = cand[todo, j]
        w = _barycentric(mesh, idx, pts[todo])
        ok = w.min(axis=1) >= -tol
        rows = np.flatnonzero(todo)[ok]
        chosen[rows] = idx[ok]
        weights[rows] = w[ok]
    for s in np.flatnonzero(chosen < 0):
        all_idx = np.arange(mesh.n_triangles)
        w = _barycentric(mesh, all_idx, np.broadcast_to(pts[s], (mesh.n_triangles, 2)))
        ok = np.flatnonzero(w.min(axis=1) >= -tol)
        if ok.size == 0:
            raise ContainmentError(f"point {s} at {pts[s].tolist()} lies outside the triangulation; "
                                   "the inner boundary must encase every data point")
        chosen[s] = ok[0]
        weights[s] = w[ok[0]]

    weights[np.abs(weights) < 1e-12] = 0.0
    weights = np.clip(weights, 0.0, None)
    weights /= weights.sum(axis=1, keepdims=True)
    cols = mesh.triangles[chosen]
    A = sp.csr_matrix((weights.ravel(), (np.repeat(np.arange(S), 3), cols.ravel())),
                      shape=(S, mesh.n_vertices))
    A.eliminate_zeros()
    return Projector(A, chosen)
