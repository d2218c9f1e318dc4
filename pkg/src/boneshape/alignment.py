"""Landmark-based rigid alignment of a cohort and unbiased reference selection."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import frozen
from .exceptions import ArgumentError, DegenerateConfigurationError, ValidationError
from .mesh import CANONICAL_LANDMARKS, LandmarkSet, TriMesh, decimate, save_mesh
from .mesh.io import atomic_write_bytes

logger = logging.getLogger(__name__)

GPA_TOLERANCE = 1e-6
GPA_MAX_ITERATIONS = 100


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> rotation @ x + translation``; proper rotation, no scaling."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValidationError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValidationError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", frozen(R))
        object.__setattr__(self, "translation", frozen(t))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def apply_mesh(self, mesh: TriMesh) -> TriMesh:
        return mesh.with_vertices(self.apply(mesh.vertices))

    def apply_landmarks(self, landmarks: LandmarkSet) -> LandmarkSet:
        return landmarks.transformed(self.rotation, self.translation)

    def to_json_dict(self):
        return {"rotation": self.rotation.reshape(-1).tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_json_dict(cls, d):
        return cls(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"])


def kabsch(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares proper rigid transform mapping ``source`` rows onto ``target`` rows."""
    cs = source.mean(axis=0)
    ct = target.mean(axis=0)
    A = source - cs
    B = target - ct
    sv = np.linalg.svd(A, compute_uv=False)
    if len(source) < 3 or sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfigurationError("landmarks are collinear or coincident")
    U, _, Vt = np.linalg.svd(A.T @ B)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, ct - R @ cs)


def procrustes_from_landmarks(source: LandmarkSet, target: LandmarkSet) -> RigidTransform:
    """Rigid transform minimising the summed squared landmark distance.

    Uses the landmark names the two sets share, equally weighted. No scaling
    is estimated, so size differences survive alignment.
    """
    names = [n for n in source if n in target]
    if len(names) < 3:
        raise ArgumentError(f"need at least 3 shared landmarks, got {len(names)}: {names}")
    return kabsch(source.array(names), target.array(names))


def mirror_left(mesh: TriMesh, landmarks: LandmarkSet | None = None):
    """Mirror a left bone through the x = 0 plane so it becomes a right one.

    Face winding is reversed to keep normals pointing outward.
    """
    S = np.diag([-1.0, 1.0, 1.0])
    mirrored = TriMesh(mesh.vertices @ S, mesh.faces[:, ::-1])
    if landmarks is None:
        return mirrored
    return mirrored, LandmarkSet({n: S @ p for n, p in landmarks.items()})


@dataclass(frozen=True, eq=False)
class AlignedCohort:
    meshes: tuple
    landmarks: tuple
    transforms: tuple
    reference_index: int = 0

    def __post_init__(self):
        n = len(self.meshes)
        if not (len(self.landmarks) == len(self.transforms) == n):
            raise ValidationError("meshes, landmarks and transforms must have equal length")
        if n and not (0 <= self.reference_index < n):
            raise ValidationError(f"reference_index {self.reference_index} out of range")

    def __len__(self):
        return len(self.meshes)

    def mean_landmarks(self, names=CANONICAL_LANDMARKS) -> LandmarkSet:
        arr = np.mean([lm.array(names) for lm in self.landmarks], axis=0)
        return LandmarkSet(zip(names, arr))

    def save(self, directory, names=None):
        """Write aligned PLY meshes plus ``manifest.json`` with the transforms."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = names or [f"shape_{i:03d}" for i in range(len(self))]
        entries = []
        for name, mesh, lm, tf in zip(names, self.meshes, self.landmarks, self.transforms):
            save_mesh(mesh, directory / f"{name}.ply")
            entries.append({"name": name, "mesh": f"{name}.ply", "landmarks": lm.to_json_dict(), **tf.to_json_dict()})
        manifest = {"reference_index": self.reference_index, "shapes": entries}
        atomic_write_bytes(directory / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode())


def _landmark_matrix(landmarks, names):
    out = []
    for i, lm in enumerate(landmarks):
        missing = [n for n in names if n not in lm]
        if missing:
            raise ValidationError(f"shape {i} is missing landmark {missing[0]!r}")
        out.append(lm.array(names))
    return np.stack(out)


def generalized_procrustes(shapes: np.ndarray, tol=GPA_TOLERANCE, max_iter=GPA_MAX_ITERATIONS):
    """Rigid generalized Procrustes on landmark configurations ``(n, k, 3)``.

    The consensus is kept in the frame of the first shape. Returns the list
    of transforms and the consensus configuration.
    """
    mean = shapes[0].copy()
    anchor = shapes[0]
    transforms = []
    for _ in range(max_iter):
        transforms = [kabsch(s, mean) for s in shapes]
        aligned = np.stack([t.apply(s) for t, s in zip(transforms, shapes)])
        new_mean = aligned.mean(axis=0)
        new_mean = kabsch(new_mean, anchor).apply(new_mean)
        motion = float(np.max(np.linalg.norm(new_mean - mean, axis=1)))
        mean = new_mean
        if motion < tol:
            break
    else:
        logger.warning("generalized Procrustes did not converge in %d iterations", max_iter)
    transforms = [kabsch(s, mean) for s in shapes]
    return transforms, mean


def align_cohort(meshes, landmarks, names=CANONICAL_LANDMARKS) -> AlignedCohort:
    """Rigidly map every shape into a common frame by generalized Procrustes on landmarks."""
    if len(meshes) != len(landmarks):
        raise ValidationError("need one landmark set per mesh")
    if not meshes:
        raise ArgumentError("cohort is empty")
    names = list(names)
    shapes = _landmark_matrix(landmarks, names)
    transforms, _ = generalized_procrustes(shapes)
    return AlignedCohort(
        meshes=tuple(t.apply_mesh(m) for t, m in zip(transforms, meshes)),
        landmarks=tuple(t.apply_landmarks(lm) for t, lm in zip(transforms, landmarks)),
        transforms=tuple(transforms),
        reference_index=0,
    )


def reference_scores(meshes) -> np.ndarray:
    """Median symmetric mean surface distance from each member to all others."""
    n = len(meshes)
    if n == 0:
        raise ArgumentError("cohort is empty")
    trees = [cKDTree(m.vertices) for m in meshes]
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dij = trees[j].query(meshes[i].vertices)[0].mean()
            dji = trees[i].query(meshes[j].vertices)[0].mean()
            D[i, j] = D[j, i] = 0.5 * (dij + dji)
    if n == 1:
        return np.zeros(1)
    off = ~np.eye(n, dtype=bool)
    return np.array([np.median(D[i][off[i]]) for i in range(n)])


def unbiased_reference_index(cohort: AlignedCohort) -> int:
    scores = reference_scores(cohort.meshes)
    return int(np.argmin(scores))


def select_unbiased_reference(cohort: AlignedCohort, target_vertices: int, uniformity: float = 0.0) -> TriMesh:
    """Member with the smallest median distance to the others, decimated to ``target_vertices``.

    This stands in for a full iterative-median-closest-point consensus: the
    most central member of the aligned cohort becomes the template.
    ``uniformity`` is passed to :func:`~boneshape.mesh.decimate`.
    """
    idx = unbiased_reference_index(cohort)
    mesh = cohort.meshes[idx]
    if target_vertices >= mesh.n_vertices:
        return mesh
    return decimate(mesh, target_vertices, uniformity=uniformity)


class GeneralizedProcrustes(TransformerMixin, BaseEstimator):
    """Estimator wrapper around landmark-only rigid generalized Procrustes.

    ``fit`` takes an array of landmark configurations ``(n_shapes, k, 3)``;
    ``transform`` aligns new configurations to the learned consensus.
    """

    def __init__(self, tol=GPA_TOLERANCE, max_iter=GPA_MAX_ITERATIONS):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != 3:
            raise ValidationError(f"expected (n_shapes, n_landmarks, 3), got {X.shape}")
        self.transforms_, self.consensus_ = generalized_procrustes(X, self.tol, self.max_iter)
        return self

    def transform(self, X):
        check_is_fitted(self, "consensus_")
        X = np.asarray(X, dtype=np.float64)
        return np.stack([kabsch(s, self.consensus_).apply(s) for s in X])
