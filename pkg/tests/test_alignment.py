import numpy as np
import pytest

from boneshape.alignment import (
    AlignedCohort,
    GeneralizedProcrustes,
    RigidTransform,
    align_cohort,
    kabsch,
    mirror_left,
    procrustes_from_landmarks,
    reference_scores,
    select_unbiased_reference,
    unbiased_reference_index,
)
from boneshape.exceptions import ArgumentError, DegenerateConfigurationError, ValidationError
from boneshape.mesh import CANONICAL_LANDMARKS, LandmarkSet
from helpers import axis_angle_rotation, random_rotation, sphere_mesh


def _lm(points):
    return LandmarkSet({f"p{i}": p for i, p in enumerate(points)})


def test_identity():
    pts = np.random.default_rng(0).normal(size=(6, 3))
    tf = procrustes_from_landmarks(_lm(pts), _lm(pts))
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(tf.translation, 0, atol=1e-12)


def test_pure_translation():
    pts = np.random.default_rng(1).normal(size=(6, 3)) * 50
    tf = procrustes_from_landmarks(_lm(pts), _lm(pts + [1, 2, 3]))
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(tf.translation, [1, 2, 3], atol=1e-10)


def test_known_rotation_recovered():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(6, 3)) * 100
    R = axis_angle_rotation(rng.normal(size=3), 30.0)
    t = rng.normal(size=3) * 20
    tf = procrustes_from_landmarks(_lm(pts), _lm(pts @ R.T + t))
    np.testing.assert_allclose(tf.rotation, R, atol=1e-8)
    np.testing.assert_allclose(tf.translation, t, atol=1e-8)


def test_too_few_and_collinear():
    with pytest.raises(ArgumentError):
        procrustes_from_landmarks(_lm(np.eye(3)[:2]), _lm(np.eye(3)[:2]))
    line = np.c_[np.arange(4.0), np.zeros(4), np.zeros(4)]
    with pytest.raises(DegenerateConfigurationError):
        procrustes_from_landmarks(_lm(line), _lm(line))


def test_no_scaling_survives():
    pts = np.random.default_rng(3).normal(size=(6, 3))
    tf = procrustes_from_landmarks(_lm(pts), _lm(2 * pts))
    np.testing.assert_allclose(np.linalg.det(tf.rotation), 1.0)
    assert np.linalg.norm(tf.apply(pts) - 2 * pts) > 0.1


def test_rigid_transform_compose_inverse_json():
    rng = np.random.default_rng(4)
    a = RigidTransform(random_rotation(rng), rng.normal(size=3))
    b = RigidTransform(random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)
    c = RigidTransform.from_json_dict(a.to_json_dict())
    np.testing.assert_array_equal(c.rotation, a.rotation)


# ------------------------------------------------------------------ cohorts

def test_cohort_of_one_is_identity(femur):
    c = align_cohort([femur.mesh], [femur.landmarks])
    np.testing.assert_allclose(c.transforms[0].rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(c.transforms[0].translation, 0, atol=1e-9)


def test_two_copies_superpose(femur):
    rng = np.random.default_rng(5)
    tf = RigidTransform(random_rotation(rng), rng.normal(size=3) * 100)
    c = align_cohort([femur.mesh, tf.apply_mesh(femur.mesh)], [femur.landmarks, tf.apply_landmarks(femur.landmarks)])
    a, b = (lm.array(CANONICAL_LANDMARKS) for lm in c.landmarks)
    assert np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))) <= 1e-8


def test_missing_landmark_names_shape_and_landmark(femur):
    partial = femur.landmarks.subset([n for n in femur.landmarks if n != "lesser_trochanter"])
    with pytest.raises(ValidationError, match="shape 1.*lesser_trochanter"):
        align_cohort([femur.mesh, femur.mesh], [femur.landmarks, partial])


def _ss_about_mean(configs):
    return float(np.sum((configs - configs.mean(axis=0)) ** 2))


def test_gpa_beats_every_single_reference(small_cohort):
    cohort = small_cohort[:10]
    shapes = np.stack([f.landmarks.array(CANONICAL_LANDMARKS) for f in cohort])
    aligned = align_cohort([f.mesh for f in cohort], [f.landmarks for f in cohort])
    gpa = _ss_about_mean(np.stack([lm.array(CANONICAL_LANDMARKS) for lm in aligned.landmarks]))
    for r in range(len(shapes)):
        single = np.stack([kabsch(s, shapes[r]).apply(s) for s in shapes])
        assert gpa <= _ss_about_mean(single) + 1e-9


def test_alignment_residual_equivariant(small_cohort):
    rng = np.random.default_rng(6)
    cohort = small_cohort[:5]
    lms = [f.landmarks for f in cohort]
    base = align_cohort([f.mesh for f in cohort], lms)
    moved = [RigidTransform(random_rotation(rng), rng.normal(size=3) * 50).apply_landmarks(lm) for lm in lms]
    again = align_cohort([f.mesh for f in cohort], moved)
    ss = lambda c: _ss_about_mean(np.stack([lm.array(CANONICAL_LANDMARKS) for lm in c.landmarks]))  # noqa: E731
    assert abs(ss(base) - ss(again)) <= 1e-9 * max(1.0, ss(base))


def test_gpa_estimator(small_cohort):
    X = np.stack([f.landmarks.array(CANONICAL_LANDMARKS) for f in small_cohort[:6]])
    est = GeneralizedProcrustes().fit(X)
    out = est.transform(X)
    assert out.shape == X.shape
    assert _ss_about_mean(out) <= _ss_about_mean(X)


def test_mirror_left_flips_winding():
    m = sphere_mesh(100, center=(5, 0, 0))
    mm = mirror_left(m)
    np.testing.assert_allclose(mm.vertices[:, 0], -m.vertices[:, 0])
    assert mm.signed_volume() > 0


def test_aligned_cohort_save(tmp_path, small_cohort):
    c = align_cohort([f.mesh for f in small_cohort[:2]], [f.landmarks for f in small_cohort[:2]])
    c.save(tmp_path)
    assert (tmp_path / "manifest.json").exists()
    assert len(list(tmp_path.glob("*.ply"))) == 2


# ------------------------------------------------------------------ unbiased reference

def _cohort(meshes):
    n = len(meshes)
    return AlignedCohort(tuple(meshes), tuple(LandmarkSet() for _ in meshes),
                         tuple(RigidTransform.identity() for _ in meshes))


def test_identical_members_score_zero():
    m = sphere_mesh(200)
    np.testing.assert_allclose(reference_scores([m, m, m]), 0.0)


def test_median_rejects_outlier_sphere():
    small = [sphere_mesh(300, 1.0) for _ in range(3)]
    big = sphere_mesh(300, 2.0)
    assert unbiased_reference_index(_cohort(small + [big])) in (0, 1, 2)
    assert unbiased_reference_index(_cohort([big] + small)) in (1, 2, 3)


def _brute_criterion(meshes):
    n = len(meshes)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                d = np.linalg.norm(meshes[i].vertices[:, None] - meshes[j].vertices[None], axis=2)
                D[i, j] = 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
    return np.array([np.median(np.delete(D[i], i)) for i in range(n)])


def test_reference_matches_brute_force(small_cohort):
    aligned = align_cohort([f.mesh for f in small_cohort[:10]], [f.landmarks for f in small_cohort[:10]])
    # subsample for the dense oracle; both sides see the same points
    meshes = [m.with_vertices(m.vertices) for m in aligned.meshes]
    sub = [type(m)(m.vertices[::3], np.zeros((0, 3), dtype=np.int64)) for m in meshes]
    oracle = _brute_criterion(sub)
    np.testing.assert_allclose(reference_scores(sub), oracle, rtol=1e-10)
    assert unbiased_reference_index(_cohort(sub)) == int(np.argmin(oracle))


def test_reference_invariant_to_order(small_cohort):
    meshes = [f.mesh for f in small_cohort[:6]]
    idx = unbiased_reference_index(_cohort(meshes))
    perm = [3, 5, 0, 1, 4, 2]
    idx2 = unbiased_reference_index(_cohort([meshes[p] for p in perm]))
    assert perm[idx2] == idx


def test_select_reference_decimates(small_cohort):
    c = align_cohort([f.mesh for f in small_cohort[:3]], [f.landmarks for f in small_cohort[:3]])
    ref = select_unbiased_reference(c, 400, uniformity=0.1)
    assert abs(ref.n_vertices - 400) <= 10
