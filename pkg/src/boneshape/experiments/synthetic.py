"""Synthetic femur-like meshes with known landmarks, hip center and axis.

Shapes are implicit surfaces (smooth union of a tapered shaft, an angled
neck with a spherical head, two trochanter bumps and two condyles)
polygonised with marching cubes. In the canonical frame the shaft runs
along +z from the knee, medial is -x and anterior is +y; each shape then
gets a random rigid pose.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation
from skimage.measure import marching_cubes

from ..alignment import RigidTransform
from ..clinical import MechanicalAxis, mechanical_axis
from ..exceptions import ArgumentError
from ..mesh import LandmarkSet, TriMesh, nearest_vertex

MEAN_LENGTH = 410.0
SD_LENGTH = 26.0


@dataclass(frozen=True)
class SyntheticFemurParams:
    length: float = MEAN_LENGTH
    head_radius: float = 23.5
    neck_angle: float = 127.0
    anteversion: float = 12.0
    shaft_radius: float = 13.5
    condyle_width: float = 80.0

    def __post_init__(self):
        for name in ("length", "head_radius", "shaft_radius", "condyle_width"):
            if not getattr(self, name) > 0:
                raise ArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if not 90 < self.neck_angle < 160:
            raise ArgumentError(f"neck_angle must lie in (90, 160), got {self.neck_angle}")


@dataclass(frozen=True)
class FemurDistribution:
    """Sampling law for :class:`SyntheticFemurParams`.

    A shared size factor ``s ~ N(1, length_sd / length_mean)`` scales every
    dimension; each dimension also gets its own relative jitter. Angles are
    normal and clipped to the given bounds.
    """

    length_mean: float = MEAN_LENGTH
    length_sd: float = SD_LENGTH
    head_radius: float = 23.5
    shaft_radius: float = 13.5
    condyle_width: float = 80.0
    relative_jitter: float = 0.05
    neck_angle_mean: float = 127.0
    neck_angle_sd: float = 5.0
    neck_angle_bounds: tuple = (110.0, 145.0)
    anteversion_mean: float = 12.0
    anteversion_sd: float = 6.0
    anteversion_bounds: tuple = (-10.0, 35.0)
    pose_translation_sd: float = 40.0
    random_rotation: bool = True

    def __post_init__(self):
        for name in ("length_mean", "head_radius", "shaft_radius", "condyle_width"):
            if not getattr(self, name) > 0:
                raise ArgumentError(f"{name} must be positive")
        for name in ("length_sd", "relative_jitter", "neck_angle_sd", "anteversion_sd", "pose_translation_sd"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be non-negative")
        if self.length_sd >= 0.25 * self.length_mean or self.relative_jitter >= 0.25:
            raise ArgumentError("spread too large for a valid femur shape")
        lo, hi = self.neck_angle_bounds
        if not (90 < lo <= self.neck_angle_mean <= hi < 160):
            raise ArgumentError(f"neck angle bounds {self.neck_angle_bounds} must satisfy 90 < lo <= mean <= hi < 160")
        lo, hi = self.anteversion_bounds
        if not lo <= self.anteversion_mean <= hi:
            raise ArgumentError(f"anteversion bounds {self.anteversion_bounds} must contain the mean")

    def sample(self, rng) -> SyntheticFemurParams:
        s = 1.0 + rng.normal() * self.length_sd / self.length_mean
        j = 1.0 + self.relative_jitter * rng.normal(size=4)
        return SyntheticFemurParams(
            length=self.length_mean * s,
            head_radius=self.head_radius * s * j[0],
            neck_angle=float(np.clip(rng.normal(self.neck_angle_mean, self.neck_angle_sd), *self.neck_angle_bounds)),
            anteversion=float(np.clip(rng.normal(self.anteversion_mean, self.anteversion_sd), *self.anteversion_bounds)),
            shaft_radius=self.shaft_radius * s * j[1],
            condyle_width=self.condyle_width * s * j[2],
        )

    def to_json_dict(self):
        return asdict(self)


# signed distance primitives --------------------------------------------------

def _sd_sphere(p, c, r):
    return np.linalg.norm(p - c, axis=-1) - r


def _sd_tapered(p, a, b, ra, rb):
    ab = b - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1) - (ra + t * (rb - ra))


def _sd_ellipsoid(p, c, radii):
    q = (p - c) / radii
    return (np.linalg.norm(q, axis=-1) - 1.0) * np.min(radii)


def _smin(a, b, k):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b + (a - b) * h - k * h * (1.0 - h)


@dataclass(frozen=True)
class _Geometry:
    """Canonical-frame construction points derived from parameters."""

    p: SyntheticFemurParams
    neck_dir: np.ndarray
    neck_base: np.ndarray
    head_center: np.ndarray
    fovea_point: np.ndarray
    notch_point: np.ndarray
    gt_center: np.ndarray
    gt_radii: np.ndarray
    lt_center: np.ndarray
    lt_radii: np.ndarray
    condyles: tuple
    condyle_radii: np.ndarray
    shaft_top: np.ndarray
    metaphysis_radius: float

    @classmethod
    def build(cls, p: SyntheticFemurParams):
        s = p.length / MEAN_LENGTH
        nsa = math.radians(p.neck_angle)
        av = math.radians(p.anteversion)
        # neck axis makes the neck-shaft angle with the distal shaft direction (0, 0, -1)
        horiz = math.sin(nsa)
        d = np.array([-horiz * math.cos(av), horiz * math.sin(av), -math.cos(nsa)])
        neck_len = 2.1 * p.head_radius
        cw = p.condyle_width
        condyle_radii = np.array([0.21 * cw, 0.36 * cw, 0.30 * cw])
        cz = condyle_radii[2]
        condyles = (np.array([-0.25 * cw, -0.05 * cw, cz]), np.array([0.25 * cw, -0.05 * cw, cz]))
        notch = np.array([0.0, -0.22 * cw, 0.45 * cz])
        # place the neck base so that |fovea - notch| equals the requested length
        off = (neck_len + p.head_radius) * d
        horiz2 = (off[0] - notch[0]) ** 2 + (off[1] - notch[1]) ** 2
        zb = notch[2] - off[2] + math.sqrt(max(p.length**2 - horiz2, 1.0))
        base = np.array([0.0, 0.0, zb])
        head = base + neck_len * d
        fovea = head + p.head_radius * d
        gt_radii = np.array([13.0, 15.0, 24.0]) * s
        gt_center = np.array([p.shaft_radius * 0.85, -2.0 * s, zb + 4.0 * s])
        lt_radii = np.array([7.0, 7.0, 9.0]) * s
        lt_center = np.array([-0.55 * p.shaft_radius, -0.75 * p.shaft_radius, zb - 0.12 * p.length])
        return cls(
            p=p, neck_dir=d, neck_base=base, head_center=head, fovea_point=fovea, notch_point=notch,
            gt_center=gt_center, gt_radii=gt_radii, lt_center=lt_center, lt_radii=lt_radii,
            condyles=condyles, condyle_radii=condyle_radii,
            shaft_top=np.array([0.0, 0.0, zb + 10.0 * s]), metaphysis_radius=0.28 * cw,
        )

    def sdf(self, x):
        p = self.p
        s = p.length / MEAN_LENGTH
        knee = np.array([0.0, -0.02 * p.condyle_width, 0.55 * self.condyle_radii[2]])
        mid = np.array([0.0, 0.0, 0.22 * p.length])
        shaft = _smin(
            _sd_tapered(x, knee, mid, self.metaphysis_radius, p.shaft_radius),
            _sd_tapered(x, mid, self.shaft_top, p.shaft_radius, 1.15 * p.shaft_radius),
            6.0 * s,
        )
        med, lat = self.condyles
        condyles = _smin(_sd_ellipsoid(x, med, self.condyle_radii), _sd_ellipsoid(x, lat, self.condyle_radii), 4.0 * s)
        f = _smin(shaft, condyles, 10.0 * s)
        f = _smin(f, _sd_ellipsoid(x, self.gt_center, self.gt_radii), 8.0 * s)
        f = _smin(f, _sd_ellipsoid(x, self.lt_center, self.lt_radii), 5.0 * s)
        neck = _sd_tapered(x, self.neck_base - 8.0 * s * self.neck_dir, self.head_center,
                           0.75 * p.head_radius, 0.62 * p.head_radius)
        f = _smin(f, neck, 8.0 * s)
        return _smin(f, _sd_sphere(x, self.head_center, p.head_radius), 4.0 * s)

    def bounds(self, margin):
        pts = [self.head_center - self.p.head_radius, self.head_center + self.p.head_radius,
               self.gt_center - self.gt_radii, self.gt_center + self.gt_radii]
        for c in self.condyles:
            pts += [c - self.condyle_radii, c + self.condyle_radii]
        pts = np.array(pts)
        r = 1.2 * self.metaphysis_radius
        lo = np.minimum(pts.min(axis=0), [-r, -r, 0.0]) - margin
        hi = np.maximum(pts.max(axis=0), [r, r, 0.0]) + margin
        return lo, hi


def _polygonise(fn, lo, hi, spacing):
    # shift the grid off any symmetric alignment to avoid exact zeros on grid nodes
    lo = lo - spacing * np.array([0.3183, 0.2718, 0.1414])
    shape = np.ceil((hi - lo) / spacing).astype(int) + 1
    axes = [lo[k] + spacing * np.arange(shape[k]) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = fn(grid.reshape(-1, 3)).reshape(tuple(shape))
    verts, faces, _, _ = marching_cubes(values, level=0.0, spacing=(spacing,) * 3)
    verts = verts + lo
    return _clean(verts, faces)


def _clean(verts, faces):
    faces = faces.astype(np.int64)
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    v = verts[faces[ok]]
    area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    ok[np.flatnonzero(ok)[area2 <= 1e-12]] = False
    faces = faces[ok]
    used = np.zeros(len(verts), dtype=bool)
    used[faces.reshape(-1)] = True
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(int(used.sum()))
    mesh = TriMesh(verts[used], remap[faces])
    if mesh.signed_volume() < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


def _skin_thickness(geom: _Geometry, x, scale):
    L = geom.p.length
    t = np.clip((x[:, 2] - 0.10 * L) / (0.75 * L), 0.0, 1.0)
    smooth = t * t * (3 - 2 * t)
    # a little thicker on the medial side at the knee (medial -x)
    side = 1.0 * np.tanh(-x[:, 0] / 20.0)
    return scale * (13.0 + side + 30.0 * smooth)


@dataclass(frozen=True, eq=False)
class SyntheticFemur:
    """One generated bone with exact ground truth, in its posed frame."""

    mesh: TriMesh
    landmarks: LandmarkSet
    hip_center: np.ndarray
    axis: MechanicalAxis
    params: SyntheticFemurParams
    pose: RigidTransform
    head_vertices: np.ndarray
    skin: TriMesh | None = None
    skin_scale: float = 1.0
    metadata: dict = field(default_factory=dict)


def _landmarks(mesh: TriMesh, geom: _Geometry) -> LandmarkSet:
    V = mesh.vertices
    cw = geom.p.condyle_width
    distal = V[:, 2] < 2.0 * geom.condyle_radii[2]
    med = np.flatnonzero(distal & (V[:, 0] < -0.1 * cw))
    lat = np.flatnonzero(distal & (V[:, 0] > 0.1 * cw))
    gt_apex = geom.gt_center + np.array([0.45, 0.0, 0.85]) * geom.gt_radii
    lt_apex = geom.lt_center + geom.lt_radii * np.array([-0.6, -0.6, 0.0])
    epi_band = distal & (np.abs(V[:, 2] - geom.condyles[0][2]) < 0.5 * geom.condyle_radii[2])
    idx = {
        "fovea": nearest_vertex(mesh, geom.fovea_point),
        "greater_trochanter": nearest_vertex(mesh, gt_apex),
        "lesser_trochanter": nearest_vertex(mesh, lt_apex),
        "medial_condyle": int(med[np.argmin(V[med, 1])]),
        "lateral_condyle": int(lat[np.argmin(V[lat, 1])]),
        "intercondylar_notch": nearest_vertex(mesh, geom.notch_point),
        "medial_epicondyle": int(np.flatnonzero(epi_band)[np.argmin(V[epi_band, 0])]),
        "lateral_epicondyle": int(np.flatnonzero(epi_band)[np.argmax(V[epi_band, 0])]),
    }
    return LandmarkSet({k: V[i] for k, i in idx.items()})


def generate_femur(params: SyntheticFemurParams, spacing=3.0, pose: RigidTransform | None = None,
                   with_skin=False, skin_scale=1.0, skin_spacing=6.0) -> SyntheticFemur:
    geom = _Geometry.build(params)
    lo, hi = geom.bounds(3.0 * spacing)
    mesh = _polygonise(geom.sdf, lo, hi, spacing)
    landmarks = _landmarks(mesh, geom)
    # head cap on the far side from the neck, where the surface is an exact sphere
    rel = mesh.vertices - geom.head_center
    head = np.flatnonzero((rel @ geom.neck_dir > 0.2 * params.head_radius)
                          & (np.abs(np.linalg.norm(rel, axis=1) - params.head_radius) < 0.25))
    skin = None
    if with_skin:
        def skin_sdf(x):
            return geom.sdf(x) - _skin_thickness(geom, x, skin_scale)
        margin = 50.0 * skin_scale + 2 * skin_spacing
        skin = _polygonise(skin_sdf, lo - margin, hi + margin, skin_spacing)
    pose = pose or RigidTransform.identity()
    hip = pose.apply(geom.head_center)
    landmarks = pose.apply_landmarks(landmarks)
    return SyntheticFemur(
        mesh=pose.apply_mesh(mesh),
        landmarks=landmarks,
        hip_center=hip,
        axis=mechanical_axis(landmarks["intercondylar_notch"], hip),
        params=params,
        pose=pose,
        head_vertices=head,
        skin=None if skin is None else pose.apply_mesh(skin),
        skin_scale=skin_scale,
    )


def _random_pose(rng, dist: FemurDistribution):
    R = Rotation.random(random_state=rng).as_matrix() if dist.random_rotation else np.eye(3)
    return RigidTransform(R, rng.normal(scale=dist.pose_translation_sd, size=3) if dist.pose_translation_sd else np.zeros(3))


def generate_synthetic_cohort(n, distribution: FemurDistribution | None = None, seed=0, spacing=3.0,
                              with_skin=False, skin_spacing=6.0):
    """``n`` independent synthetic femurs; shape ``i`` depends only on ``(seed, i)``."""
    if isinstance(n, bool) or int(n) != n or n < 2:
        raise ArgumentError(f"cohort size must be an integer >= 2, got {n!r}")
    if not spacing > 0:
        raise ArgumentError(f"spacing must be > 0, got {spacing}")
    dist = distribution or FemurDistribution()
    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(int(n))):
        rng = np.random.default_rng(child)
        params = dist.sample(rng)
        pose = _random_pose(rng, dist)
        skin_scale = float(np.clip(rng.normal(1.0, 0.08), 0.8, 1.2))
        femur = generate_femur(params, spacing=spacing, pose=pose, with_skin=with_skin,
                               skin_scale=skin_scale, skin_spacing=skin_spacing)
        out.append(femur)
    return out
