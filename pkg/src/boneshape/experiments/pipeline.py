"""Model building and landmark-driven reconstruction of the proximal femur."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..alignment import (
    align_cohort,
    procrustes_from_landmarks,
    select_unbiased_reference,
    unbiased_reference_index,
)
from ..clinical import (
    MechanicalAxis,
    axis_angle_deviation,
    clip_proximal,
    femoral_head_region,
    femur_length_indicator,
    fit_sphere,
    hip_center,
    mechanical_axis,
    surface_rmse,
)
from ..exceptions import ArgumentError, EmptyRegionError, ValidationError
from ..mesh import (
    CANONICAL_LANDMARKS,
    LandmarkSet,
    TriMesh,
    VertexRegion,
    decimate,
    farthest_point_downsample,
    nearest_vertex,
    select_ring_region,
    vertex_normals,
)
from ..registration import Correspondence, CpdParams, cpd_nonrigid, extract_landmark_pairs
from ..ssm import DeformationField, ShapeModel, build_ssm, posterior_mean_shape, posterior_model
from . import config

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """A trained model plus everything needed to reuse its frame and template."""

    model: ShapeModel
    reference: TriMesh
    fits: tuple
    consensus: LandmarkSet
    reference_index: int

    def fitting_rmse_stats(self):
        r = np.array([f.fitting_rmse for f in self.fits])
        if r.size == 0:
            return {"n": 0}
        return {"n": int(r.size), "mean_mm": float(r.mean()), "std_mm": float(r.std(ddof=1)) if r.size > 1 else 0.0,
                "min_mm": float(r.min()), "max_mm": float(r.max())}


def model_landmark_indices(reference: TriMesh, landmarks: LandmarkSet) -> dict:
    return {name: nearest_vertex(reference, p) for name, p in landmarks.items()}


def build_model(meshes, landmarks, reference_vertices=None, cpd: CpdParams | None = None,
                names=CANONICAL_LANDMARKS, progress=None, cfg=None) -> ModelBundle:
    """Align, pick the unbiased reference, fit it to every shape and run PCA."""
    cfg = cfg or config.DEFAULTS
    reference_vertices = reference_vertices or cfg["reference.vertices"]
    cpd = cpd or config.cpd_params(cfg)
    cohort = align_cohort(meshes, landmarks, names)
    ref_idx = unbiased_reference_index(cohort)
    reference = select_unbiased_reference(cohort, reference_vertices, cfg["reference.uniformity"])
    fits = []
    for i, mesh in enumerate(cohort.meshes):
        try:
            fits.append(cpd_nonrigid(reference, mesh, cpd))
        except Exception as exc:
            exc.args = (f"shape {i}: {exc.args[0] if exc.args else exc}",) + tuple(exc.args[1:])
            raise
        if progress:
            progress(i, fits[-1])
    lm_idx = model_landmark_indices(reference, cohort.landmarks[ref_idx])
    model = build_ssm(
        [f.mesh for f in fits],
        landmarks=lm_idx,
        metadata={"n_training": len(fits), "reference_index": ref_idx, "reference_vertices": reference.n_vertices,
                  "cpd": cpd.to_json_dict()},
    )
    return ModelBundle(model, reference, tuple(fits), cohort.mean_landmarks(list(names)), ref_idx)


def bundle_from_model(model: ShapeModel, reference: TriMesh | None = None) -> ModelBundle:
    """Rebuild a :class:`ModelBundle` around a loaded model.

    The alignment frame comes from the consensus landmarks stored in the
    model provenance when present, otherwise from the mean shape's landmark
    vertices. Without a reference mesh the mean shape serves as template.
    """
    stored = model.metadata.get("consensus_landmarks")
    if stored:
        consensus = LandmarkSet(stored)
    else:
        consensus = LandmarkSet({n: model.landmark_point(n) for n in model.landmarks})
    reference = reference if reference is not None else model.mean_mesh()
    if reference.n_vertices != model.n_vertices:
        raise ValidationError(f"reference has {reference.n_vertices} vertices, model has {model.n_vertices}")
    return ModelBundle(model, reference, (), consensus, int(model.metadata.get("reference_index", -1)))


# ------------------------------------------------------------------ test cases

@dataclass(frozen=True, eq=False)
class TestCase:
    """A test bone prepared once and reused by every trial.

    All geometry is in the model frame. ``truth`` is the reference fitted to
    the complete test bone. Its distal vertices are the only source of
    landmark picks and its proximal vertices are the scoring ground truth.
    """

    shape_id: str
    mesh: TriMesh
    landmarks: LandmarkSet
    truth: Correspondence
    available: np.ndarray          # indices of test-mesh vertices outside the clipped region
    picking_region: VertexRegion   # partial-fit vertices usable as landmarks
    scoring_region: VertexRegion   # model vertices scored (proximal part of truth)
    truth_axis: MechanicalAxis
    length_indicator: float
    skin: TriMesh | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return bool(self.truth.converged)


def _clip_threshold(mesh, fovea, fraction):
    return fraction * float(np.linalg.norm(mesh.vertices - fovea, axis=1).max())


def prepare_test_case(bundle: ModelBundle, mesh: TriMesh, landmarks: LandmarkSet, shape_id="0",
                      hip=None, skin=None, cpd=None, cfg=None) -> TestCase:
    """Bring a test bone into the model frame and run both reference fits.

    ``hip`` is the known hip center (input frame); without it the ground
    truth center is fitted on the test head surface.
    """
    cfg = cfg or config.DEFAULTS
    cpd = cpd or config.cpd_params(cfg)
    names = [n for n in bundle.consensus if n in landmarks]
    tf = procrustes_from_landmarks(landmarks.subset(names), bundle.consensus)
    mesh = tf.apply_mesh(mesh)
    landmarks = tf.apply_landmarks(landmarks)
    landmarks.require(("fovea", "intercondylar_notch"), f"test shape {shape_id}")
    skin = tf.apply_mesh(skin) if skin is not None else None
    fovea = landmarks["fovea"]
    proximal, distal = clip_proximal(mesh, fovea, cfg["clip.fraction"])
    threshold = _clip_threshold(mesh, fovea, cfg["clip.fraction"])
    truth = cpd_nonrigid(bundle.reference, mesh, cpd)
    near = np.linalg.norm(truth.mesh.vertices - fovea, axis=1) < threshold
    picking = VertexRegion(truth.mesh, np.flatnonzero(~near))
    scoring = VertexRegion(truth.mesh, np.flatnonzero(near))
    if len(scoring) == 0:
        raise EmptyRegionError(f"test shape {shape_id}: no model vertex falls in the proximal part")
    if hip is None:
        hc = hip_center(femoral_head_region(mesh, fovea, cfg["clip.fraction"], cfg["head.radius_factor"],
                                            cfg["head.seed_fraction"]), cfg["head.points"], seed=0).center
    else:
        hc = tf.apply(np.asarray(hip, dtype=np.float64))
    return TestCase(
        shape_id=str(shape_id),
        mesh=mesh,
        landmarks=landmarks,
        truth=truth,
        available=distal.indices,
        picking_region=picking,
        scoring_region=scoring,
        truth_axis=mechanical_axis(landmarks["intercondylar_notch"], hc),
        length_indicator=femur_length_indicator(landmarks),
        skin=skin,
        metadata={"alignment": tf.to_json_dict(), "clip_threshold_mm": threshold},
    )


# ------------------------------------------------------------------ pickers

def pick_count(case: TestCase, n, rng) -> np.ndarray:
    """``n`` farthest-point landmarks over the whole distal part."""
    region = case.picking_region
    if n > len(region):
        raise ArgumentError(f"cannot pick {n} landmarks from {len(region)} distal vertices")
    return farthest_point_downsample(region, n, seed=rng).indices


def pick_ring(case: TestCase, step, n, rng) -> np.ndarray:
    """``n`` farthest-point landmarks in ring ``step``: [10·step %, 10·(step+1) %) of the length indicator."""
    L = case.length_indicator
    ring = select_ring_region(case.truth.mesh, case.landmarks["fovea"], 0.1 * step * L, 0.1 * (step + 1) * L)
    region = ring.intersect(case.picking_region)
    if len(region) < n:
        raise EmptyRegionError(f"ring {step} has {len(region)} usable vertices, need {n}")
    return farthest_point_downsample(region, n, seed=rng).indices


def landmark_pairs(case: TestCase, picked):
    """Pair picked fitted vertices with the nearest distal test vertices."""
    picked = np.asarray(picked, dtype=np.int64)
    if not np.all(np.isin(picked, case.picking_region.indices)):
        raise ValidationError("a picked landmark lies in the clipped (proximal) part")
    return extract_landmark_pairs(case.truth, case.mesh.vertices[case.available], picked)


def displace(points, magnitude, rng):
    """Move each point by ``|magnitude|`` along its own uniformly random direction."""
    points = np.asarray(points, dtype=np.float64)
    if magnitude == 0:
        return points.copy()
    u = rng.normal(size=points.shape)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return points + abs(magnitude) * u


# ------------------------------------------------------------------ prediction

@dataclass(frozen=True, eq=False)
class Prediction:
    mesh: TriMesh
    field: DeformationField
    axis: MechanicalAxis | None
    hip: object = None


def predict(model: ShapeModel, indices, points, noise_sigma, hip_seed=None, cfg=None) -> Prediction:
    """Posterior-mean shape given vertex observations, plus its mechanical axis."""
    cfg = cfg or config.DEFAULTS
    fld = DeformationField(indices, points, noise_sigma)
    shape = posterior_mean_shape(posterior_model(model, fld))
    axis = hip = None
    if "fovea" in model.landmarks and "intercondylar_notch" in model.landmarks:
        fovea = shape.vertices[model.landmarks["fovea"]]
        region = femoral_head_region(shape, fovea, cfg["clip.fraction"], cfg["head.radius_factor"],
                                     cfg["head.seed_fraction"])
        n_points = min(cfg["head.points"], len(region))
        hip = hip_center(region, n_points, seed=hip_seed)
        axis = mechanical_axis(shape.vertices[model.landmarks["intercondylar_notch"]], hip)
    return Prediction(shape, fld, axis, hip)


def score(case: TestCase, prediction: Prediction):
    rmse = surface_rmse(case.scoring_region.on(prediction.mesh), case.scoring_region)
    dev = axis_angle_deviation(prediction.axis, case.truth_axis) if prediction.axis is not None else float("nan")
    return rmse, dev


def baseline_rmse(model: ShapeModel, case: TestCase) -> float:
    """RMSE of predicting the prior mean (no landmarks at all)."""
    return surface_rmse(case.scoring_region.on(model.mean_mesh()), case.scoring_region)


def reconstruct(model: ShapeModel, reference: TriMesh, test_mesh: TriMesh, test_landmarks: LandmarkSet,
                rule="count", n_landmarks=5, noise_sigma=1.0, seed=0, ring_step=None, cfg=None):
    """End-to-end prediction of a test bone's proximal part.

    The reference is fitted to ``test_mesh``; landmarks are picked by
    ``rule`` (``"all"``, ``"count"`` or ``"ring"``) on the fitted vertices outside
    the clipped fovea neighbourhood, paired with the nearest distal test
    vertices and used to condition the model. Returns the predicted mesh
    and the deformation field.
    """
    cfg = cfg or config.DEFAULTS
    if reference.n_vertices != model.n_vertices or not np.array_equal(reference.faces, model.faces):
        raise ValidationError("reference topology does not match the model")
    test_landmarks.require(("fovea",), "test landmarks")
    fovea = test_landmarks["fovea"]
    _, distal = clip_proximal(test_mesh, fovea, cfg["clip.fraction"])
    threshold = _clip_threshold(test_mesh, fovea, cfg["clip.fraction"])
    fitted = cpd_nonrigid(reference, test_mesh, config.cpd_params(cfg))
    far = np.flatnonzero(np.linalg.norm(fitted.mesh.vertices - fovea, axis=1) >= threshold)
    region = VertexRegion(fitted.mesh, far)
    rng = np.random.default_rng(seed)
    if rule == "all":
        picked = region
    elif rule == "count":
        if n_landmarks > len(region):
            raise ArgumentError(f"cannot pick {n_landmarks} landmarks from {len(region)} distal vertices")
        picked = farthest_point_downsample(region, n_landmarks, seed=rng)
    elif rule == "ring":
        if ring_step is None:
            raise ArgumentError("ring rule needs ring_step")
        L = femur_length_indicator(test_landmarks)
        ring = select_ring_region(fitted.mesh, fovea, 0.1 * ring_step * L, 0.1 * (ring_step + 1) * L)
        ring = ring.intersect(region)
        if len(ring) < n_landmarks:
            raise EmptyRegionError(f"ring {ring_step} has {len(ring)} usable vertices")
        picked = farthest_point_downsample(ring, n_landmarks, seed=rng)
    else:
        raise ArgumentError(f"unknown picking rule {rule!r}")
    idx, pts = extract_landmark_pairs(fitted, distal.points, picked)
    fld = DeformationField(idx, pts, noise_sigma)
    return posterior_mean_shape(posterior_model(model, fld)), fld


# ------------------------------------------------------------------ skin

def simulate_skin_landmarks(mesh: TriMesh, landmarks: LandmarkSet, offsets=None, normals=None) -> LandmarkSet:
    """Push landmarks outward along the normal of their nearest mesh vertex.

    ``offsets`` maps landmark name to distance in mm (default: the standard
    greater trochanter / epicondyle soft-tissue depths). Landmarks without
    an offset are returned unchanged.
    """
    offsets = dict(config.SKIN_OFFSETS_MM if offsets is None else offsets)
    landmarks.require(list(offsets), "skin simulation")
    normals = vertex_normals(mesh) if normals is None else normals
    out = {}
    for name, p in landmarks.items():
        if name in offsets:
            n = normals[nearest_vertex(mesh, p)]
            out[name] = p + float(offsets[name]) * n
        else:
            out[name] = p
    return LandmarkSet(out)


def skin_ray_points(bone_points, directions, skin: TriMesh, corridor=5.0):
    """For each ray ``p + t·n`` (t > 0), the skin vertex closest to the ray within ``corridor`` mm.

    Returns ``(points, hit)``; rays with no skin vertex in the corridor fall
    back to the skin vertex nearest to the bone point and get ``hit=False``.
    """
    S = skin.vertices
    tree = cKDTree(S)
    out = np.empty((len(bone_points), 3))
    hit = np.zeros(len(bone_points), dtype=bool)
    for k, (p, n) in enumerate(zip(np.asarray(bone_points), np.asarray(directions))):
        rel = S - p
        t = rel @ n
        perp = np.linalg.norm(rel - t[:, None] * n, axis=1)
        ok = np.flatnonzero((t > 0) & (perp <= corridor))
        if ok.size:
            order = np.lexsort((t[ok], perp[ok]))
            out[k] = S[ok[order[0]]]
            hit[k] = True
        else:
            out[k] = S[tree.query(p)[1]]
    return out, hit
