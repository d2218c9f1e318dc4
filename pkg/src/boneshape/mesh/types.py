"""Immutable mesh, landmark and vertex-region containers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from ..validation import check_point, frozen
from ..exceptions import ValidationError

#: Landmarks used for rigid alignment of a cohort.
CANONICAL_LANDMARKS = (
    "fovea",
    "greater_trochanter",
    "lesser_trochanter",
    "medial_condyle",
    "lateral_condyle",
    "intercondylar_notch",
)

#: Landmarks palpable through the skin.
SKIN_LANDMARKS = ("greater_trochanter", "medial_epicondyle", "lateral_epicondyle")


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle surface, coordinates in millimetres.

    Both arrays are stored read-only; derive new meshes with
    :meth:`with_vertices` instead of mutating.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64)
        if vertices.size == 0:
            vertices = vertices.reshape(0, 3)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValidationError(f"vertices must have shape (N, 3), got {vertices.shape}")
        if not np.all(np.isfinite(vertices)):
            bad = int(np.flatnonzero(~np.isfinite(vertices).all(axis=1))[0])
            raise ValidationError(f"vertex {bad} has non-finite coordinates")
        faces = np.asarray(self.faces)
        if faces.size == 0:
            faces = np.zeros((0, 3), dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValidationError(f"faces must have shape (F, 3), got {faces.shape}")
        if not np.issubdtype(faces.dtype, np.integer):
            if not np.all(np.mod(faces, 1) == 0):
                raise ValidationError("face indices must be integers")
        faces = faces.astype(np.int64, copy=False)
        n = len(vertices)
        bad = np.flatnonzero((faces < 0).any(axis=1) | (faces >= n).any(axis=1))
        if bad.size:
            f = int(bad[0])
            raise ValidationError(
                f"face {f} references vertex {faces[f].tolist()} but mesh has {n} vertices"
            )
        degenerate = np.flatnonzero(
            (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        )
        if degenerate.size:
            raise ValidationError(
                f"degenerate faces (repeated vertex): {degenerate[:10].tolist()}"
                + (" ..." if degenerate.size > 10 else "")
            )
        object.__setattr__(self, "vertices", frozen(np.asarray(vertices, dtype=np.float64)))
        object.__setattr__(self, "faces", frozen(faces))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def with_vertices(self, vertices) -> "TriMesh":
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise ValidationError(
                f"replacement vertices have shape {vertices.shape}, expected {self.vertices.shape}"
            )
        return TriMesh(vertices, self.faces)

    def transformed(self, rotation, translation) -> "TriMesh":
        return self.with_vertices(self.vertices @ np.asarray(rotation).T + np.asarray(translation))

    def signed_volume(self) -> float:
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def __repr__(self):
        return f"TriMesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"


class LandmarkSet(Mapping):
    """Ordered, immutable mapping from landmark name to a 3D point (mm)."""

    def __init__(self, entries: Mapping[str, Iterable[float]] | Iterable[tuple[str, Iterable[float]]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        points = {}
        for name, point in items:
            name = str(name)
            if name in points:
                raise ValidationError(f"duplicate landmark name {name!r}")
            points[name] = frozen(check_point(point, f"landmark {name!r}"))
        self._points = points

    def __getitem__(self, name):
        return self._points[name]

    def __iter__(self):
        return iter(self._points)

    def __len__(self):
        return len(self._points)

    def __repr__(self):
        return f"LandmarkSet({list(self._points)})"

    def array(self, names=None) -> np.ndarray:
        names = list(self._points) if names is None else list(names)
        missing = [n for n in names if n not in self._points]
        if missing:
            raise ValidationError(f"missing landmarks: {missing}")
        if not names:
            return np.zeros((0, 3))
        return np.stack([self._points[n] for n in names])

    def transformed(self, rotation, translation) -> "LandmarkSet":
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64)
        return LandmarkSet({n: rotation @ p + translation for n, p in self._points.items()})

    def subset(self, names) -> "LandmarkSet":
        return LandmarkSet({n: self[n] for n in names})

    def updated(self, other: Mapping) -> "LandmarkSet":
        merged = dict(self._points)
        merged.update(other)
        return LandmarkSet(merged)

    def require(self, names, owner="landmark set"):
        missing = [n for n in names if n not in self._points]
        if missing:
            raise ValidationError(f"{owner} is missing landmark(s) {missing}")

    def check_attached(self, mesh: TriMesh, margin=0.10):
        """Raise unless every landmark lies in the mesh bbox expanded by ``margin``."""
        lo, hi = mesh.bounds()
        pad = (hi - lo) * margin
        for name, p in self._points.items():
            if np.any(p < lo - pad) or np.any(p > hi + pad):
                raise ValidationError(f"landmark {name!r} at {p.tolist()} lies outside the mesh bounds")

    def to_json_dict(self) -> dict:
        return {n: [float(c) for c in p] for n, p in self._points.items()}


@dataclass(frozen=True, eq=False)
class VertexRegion:
    """A subset of a mesh's vertices, kept in the order given."""

    mesh: TriMesh
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.size == 0:
            idx = np.zeros(0, dtype=np.int64)
        if idx.ndim != 1:
            raise ValidationError("region indices must be one-dimensional")
        idx = idx.astype(np.int64, copy=False)
        if idx.size:
            if idx.min() < 0 or idx.max() >= self.mesh.n_vertices:
                raise ValidationError("region index out of range")
            if np.unique(idx).size != idx.size:
                raise ValidationError("region indices must be unique")
        object.__setattr__(self, "indices", frozen(idx))

    def __len__(self):
        return len(self.indices)

    @property
    def points(self) -> np.ndarray:
        return self.mesh.vertices[self.indices]

    def on(self, mesh: TriMesh) -> "VertexRegion":
        """The same vertex indices on another mesh of equal size."""
        if mesh.n_vertices != self.mesh.n_vertices:
            raise ValidationError("cannot move a region to a mesh with a different vertex count")
        return VertexRegion(mesh, self.indices)

    def intersect(self, other: "VertexRegion") -> "VertexRegion":
        keep = np.isin(self.indices, other.indices)
        return VertexRegion(self.mesh, self.indices[keep])

    def complement(self) -> "VertexRegion":
        mask = np.ones(self.mesh.n_vertices, dtype=bool)
        mask[self.indices] = False
        return VertexRegion(self.mesh, np.flatnonzero(mask))
