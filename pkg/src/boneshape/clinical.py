"""Femur geometry: proximal clipping, hip-center sphere fit, mechanical axis, metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .validation import check_point, check_points, check_positive_int
from .exceptions import ArgumentError, DegenerateConfigurationError, ValidationError
from .mesh import LandmarkSet, TriMesh, VertexRegion

PROXIMAL_FRACTION = 0.10
HEAD_POINTS = 30
HEAD_RADIUS_FACTOR = 1.2
HEAD_SEED_FRACTION = 0.5


@dataclass(frozen=True)
class SphereFit:
    center: np.ndarray
    radius: float
    rms_residual: float
    seed: object = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError(f"sphere radius must be > 0, got {self.radius}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).copy())
        object.__setattr__(self, "rms_residual", max(float(self.rms_residual), 0.0))

    def to_json_dict(self):
        return {"center_mm": self.center.tolist(), "radius_mm": float(self.radius),
                "rms_residual_mm": self.rms_residual, "seed": self.seed}


@dataclass(frozen=True)
class MechanicalAxis:
    notch_point: np.ndarray
    hip_center: np.ndarray
    direction: np.ndarray

    def to_json_dict(self):
        return {"notch_point_mm": self.notch_point.tolist(), "hip_center_mm": self.hip_center.tolist(),
                "direction": self.direction.tolist()}


def femur_length_indicator(landmarks: LandmarkSet) -> float:
    """Fovea-to-notch distance in mm."""
    landmarks.require(("fovea", "intercondylar_notch"), "femur length indicator")
    return float(np.linalg.norm(landmarks["fovea"] - landmarks["intercondylar_notch"]))


def clip_proximal(mesh: TriMesh, fovea, fraction=PROXIMAL_FRACTION):
    """Split ``mesh`` into (proximal, distal) vertex regions around ``fovea``.

    A vertex is proximal when its distance to the fovea is strictly below
    ``fraction`` times the distance of the furthest vertex.
    """
    fovea = check_point(fovea, "fovea")
    if mesh.n_vertices == 0:
        raise ValidationError("mesh has no vertices")
    d = np.linalg.norm(mesh.vertices - fovea, axis=1)
    threshold = fraction * d.max()
    mask = d < threshold
    return VertexRegion(mesh, np.flatnonzero(mask)), VertexRegion(mesh, np.flatnonzero(~mask))


def _algebraic_sphere(P):
    # |p|^2 = 2 c.p + (r^2 - |c|^2), linear in (c, k)
    A = np.column_stack([2 * P, np.ones(len(P))])
    b = np.einsum("ij,ij->i", P, P)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    c = sol[:3]
    r2 = sol[3] + c @ c
    return c, math.sqrt(r2) if r2 > 0 else float(np.mean(np.linalg.norm(P - c, axis=1)))


def _radial(P, c, r):
    return np.linalg.norm(P - c, axis=1) - r


def fit_sphere(points, max_iter=100, tol=1e-12) -> SphereFit:
    """Least-squares sphere through ``points``.

    An algebraic fit seeds a Gauss-Newton refinement of the geometric cost
    ``sum((|p - c| - r)^2)``. Steps are halved when they would increase the
    cost, so the result is never worse than the seed.
    """
    P = check_points(points, "points", min_points=4)
    centred = P - P.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] == 0 or sv[2] <= 1e-9 * sv[0]:
        raise DegenerateConfigurationError("points are coplanar or coincident; sphere is undetermined")
    c, r = _algebraic_sphere(P)
    res = _radial(P, c, r)
    cost = res @ res
    for _ in range(max_iter):
        diff = P - c
        dist = np.linalg.norm(diff, axis=1)
        if np.any(dist == 0):
            break
        J = np.column_stack([-diff / dist[:, None], -np.ones(len(P))])
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        t = 1.0
        improved = False
        while t > 1e-10:
            c_new, r_new = c + t * step[:3], r + t * step[3]
            res_new = _radial(P, c_new, r_new)
            cost_new = res_new @ res_new
            if cost_new <= cost:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        done = cost - cost_new <= tol * max(cost, 1e-300) or np.linalg.norm(t * step) <= 1e-14 * (1 + abs(r))
        c, r, res, cost = c_new, r_new, res_new, cost_new
        if done:
            break
    if r < 0:
        r = -r
        res = _radial(P, c, r)
    return SphereFit(c, float(r), float(math.sqrt(np.mean(res**2))))


def hip_center(head_region: VertexRegion, n_points: int = HEAD_POINTS, seed=None) -> SphereFit:
    """Sphere fitted to ``n_points`` vertices drawn without replacement from ``head_region``."""
    n_points = check_positive_int(n_points, "n_points", minimum=4)
    if len(head_region) < n_points:
        raise ArgumentError(f"head region has {len(head_region)} vertices, need {n_points}")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(head_region), size=n_points, replace=False))
    fit = fit_sphere(head_region.points[pick])
    return SphereFit(fit.center, fit.radius, fit.rms_residual, seed=_seed_echo(seed))


def _seed_echo(seed):
    if seed is None or isinstance(seed, (int, np.integer)):
        return None if seed is None else int(seed)
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": seed.entropy, "spawn_key": list(seed.spawn_key)}
    return repr(seed)


def femoral_head_region(mesh: TriMesh, fovea, fraction=PROXIMAL_FRACTION,
                        radius_factor=HEAD_RADIUS_FACTOR, seed_fraction=HEAD_SEED_FRACTION) -> VertexRegion:
    """Vertices treated as femoral head surface.

    A rough sphere fitted to the proximal vertices closest to the fovea
    (within ``seed_fraction`` of the clipping threshold) estimates the head
    radius ``r``; the head is then every proximal vertex within
    ``radius_factor * r`` of the fovea.
    """
    fovea = check_point(fovea, "fovea")
    proximal, _ = clip_proximal(mesh, fovea, fraction)
    if len(proximal) < 4:
        raise ArgumentError(f"proximal region has only {len(proximal)} vertices")
    d = np.linalg.norm(proximal.points - fovea, axis=1)
    threshold = fraction * np.linalg.norm(mesh.vertices - fovea, axis=1).max()
    seed_idx = np.flatnonzero(d < seed_fraction * threshold)
    if len(seed_idx) < 4:
        seed_idx = np.argsort(d, kind="stable")[: min(len(d), 16)]
    rough = fit_sphere(proximal.points[seed_idx])
    keep = d < radius_factor * rough.radius
    return VertexRegion(mesh, proximal.indices[keep])


def mechanical_axis(notch, hip: SphereFit | np.ndarray) -> MechanicalAxis:
    """Axis from the intercondylar notch to the hip center."""
    notch = check_point(notch, "notch")
    center = check_point(hip.center if isinstance(hip, SphereFit) else hip, "hip center")
    v = center - notch
    n = np.linalg.norm(v)
    if n <= 1e-12 * max(1.0, np.abs(notch).max(), np.abs(center).max()):
        raise DegenerateConfigurationError("notch and hip center coincide")
    return MechanicalAxis(notch, center, v / n)


def axis_angle_deviation(a: MechanicalAxis, b: MechanicalAxis) -> float:
    """Unsigned 3D angle between two axis directions, degrees in [0, 180]."""
    u, v = a.direction, b.direction
    # atan2 form stays accurate for nearly (anti)parallel directions
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(u, v)), np.clip(u @ v, -1.0, 1.0))))


def _coords(x):
    if isinstance(x, VertexRegion):
        return x.points
    if isinstance(x, TriMesh):
        return x.vertices
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def surface_rmse(a, b) -> float:
    """Vertex-to-vertex RMSE (mm) between two shapes in correspondence by index."""
    pa, pb = _coords(a), _coords(b)
    if pa.shape != pb.shape:
        raise ValidationError(f"vertex count mismatch: {len(pa)} vs {len(pb)}")
    if len(pa) == 0:
        raise ValidationError("cannot compare empty shapes")
    return float(np.sqrt(np.mean(np.sum((pa - pb) ** 2, axis=1))))


class SphereFitter(BaseEstimator):
    """Estimator form of :func:`fit_sphere`; ``predict`` gives radial residuals."""

    def __init__(self, max_iter=100):
        self.max_iter = max_iter

    def fit(self, X, y=None):
        fit = fit_sphere(X, max_iter=self.max_iter)
        self.center_ = fit.center
        self.radius_ = fit.radius
        self.rms_residual_ = fit.rms_residual
        return self

    def predict(self, X):
        check_is_fitted(self, "center_")
        return _radial(check_points(X, "X"), self.center_, self.radius_)
