"""Normals, point selection and nearest-vertex queries on triangle meshes."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..validation import check_point, check_points, check_positive_int
from ..exceptions import ArgumentError, EmptyRegionError, ValidationError, ZeroAreaError
from .types import TriMesh, VertexRegion


def face_normals(mesh: TriMesh, normalize=True):
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    if normalize:
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    return n


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Unit vertex normals, area-weighted average of incident face normals.

    Raises
    ------
    ZeroAreaError
        If a vertex has no incident face with non-zero area.
    """
    weighted = face_normals(mesh, normalize=False)  # length = 2 * area
    acc = np.zeros((mesh.n_vertices, 3))
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], weighted)
    norm = np.linalg.norm(acc, axis=1)
    scale = np.max(norm) if norm.size else 0.0
    bad = np.flatnonzero(norm <= 1e-14 * max(scale, 1e-300))
    if bad.size:
        raise ZeroAreaError(bad[0])
    return acc / norm[:, None]


def select_ring_region(mesh: TriMesh, center, r_inner: float, r_outer: float) -> VertexRegion:
    """Vertices ``v`` with ``r_inner <= |v - center| < r_outer`` (Euclidean)."""
    center = check_point(center, "center")
    if not (0 <= r_inner < r_outer):
        raise ArgumentError(f"need 0 <= r_inner < r_outer, got {r_inner}, {r_outer}")
    d = np.linalg.norm(mesh.vertices - center, axis=1)
    idx = np.flatnonzero((d >= r_inner) & (d < r_outer))
    if idx.size == 0:
        raise EmptyRegionError(f"no vertices between {r_inner} and {r_outer} mm of {center.tolist()}")
    return VertexRegion(mesh, idx)


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Permutation sorting points lexicographically by (x, y, z)."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def farthest_point_downsample(region: VertexRegion, n: int, seed=None, start=None) -> VertexRegion:
    """Greedy max-min (farthest point) subsample of ``region``.

    The first point is drawn uniformly from the region using ``seed``; each
    following point maximises its distance to the points already chosen.
    Candidates are visited in lexicographic coordinate order, so the result
    does not depend on how the vertices happen to be numbered (exact ties
    aside). ``start`` overrides the random first pick with a mesh vertex index.
    """
    n = check_positive_int(n, "n")
    size = len(region)
    if n > size:
        raise ArgumentError(f"cannot pick {n} points from a region of {size}")
    pts = region.points
    order = canonical_order(pts)
    pts = pts[order]
    ids = region.indices[order]
    if start is None:
        first = int(np.random.default_rng(seed).integers(size))
    else:
        hits = np.flatnonzero(ids == int(start))
        if hits.size == 0:
            raise ArgumentError(f"start vertex {start} is not in the region")
        first = int(hits[0])
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = first
    mind = np.linalg.norm(pts - pts[first], axis=1)
    for k in range(1, n):
        nxt = int(np.argmax(mind))
        chosen[k] = nxt
        np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1), out=mind)
    return VertexRegion(region.mesh, ids[chosen])


def nearest_vertices(points, queries, tree=None) -> np.ndarray:
    """Index of the nearest point for each query; ties go to the smallest index."""
    points = np.asarray(points, dtype=np.float64)
    queries = check_points(np.atleast_2d(queries), "queries")
    if len(points) == 0:
        raise ValidationError("cannot search an empty point set")
    tree = cKDTree(points) if tree is None else tree
    k = min(8, len(points))
    dist, idx = tree.query(queries, k=k)
    if k == 1:
        return np.asarray(idx, dtype=np.int64).reshape(-1)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)
    best = dist[:, :1]
    tied = dist <= best * (1 + 1e-12) + 1e-300
    masked = np.where(tied, idx, np.iinfo(np.int64).max)
    out = masked.min(axis=1)
    # more than k points at exactly the same distance: resolve by a ball query
    full = tied.all(axis=1)
    for row in np.flatnonzero(full):
        cand = tree.query_ball_point(queries[row], best[row, 0] * (1 + 1e-12) + 1e-300)
        out[row] = min(cand)
    return out.astype(np.int64)


def nearest_vertex(mesh: TriMesh, query) -> int:
    """Index of the mesh vertex closest to ``query``; ties -> smallest index."""
    if mesh.n_vertices == 0:
        raise ValidationError("mesh has no vertices")
    query = check_point(query, "query")
    return int(nearest_vertices(mesh.vertices, query[None, :])[0])


def mean_surface_distance(a: np.ndarray, b: np.ndarray, tree_a=None, tree_b=None) -> float:
    """Symmetric mean nearest-vertex distance between two point sets."""
    tree_a = cKDTree(a) if tree_a is None else tree_a
    tree_b = cKDTree(b) if tree_b is None else tree_b
    dab, _ = tree_b.query(a)
    dba, _ = tree_a.query(b)
    return 0.5 * (float(np.mean(dab)) + float(np.mean(dba)))
