import numpy as np
import pytest

from boneshape.exceptions import ArgumentError, FormatError, ValidationError
from boneshape.mesh import TriMesh
from boneshape.ssm import (
    MODEL_MAGIC,
    DeformationField,
    PCAShapeModel,
    PosteriorModel,
    PosteriorShapeRegressor,
    ShapeModel,
    build_ssm,
    load_model,
    model_from_bytes,
    model_to_bytes,
    posterior_mean_shape,
    posterior_model,
    project_shape,
    sample_shape,
    save_model,
)
from helpers import make_cohort, sphere_mesh


@pytest.fixture(scope="module")
def cohort():
    return make_cohort()


@pytest.fixture(scope="module")
def model(cohort):
    return build_ssm(cohort, landmarks={"a": 0, "b": 10})


# ------------------------------------------------------------------ building

def test_two_shape_closed_form():
    A = sphere_mesh(50, 10.0)
    rng = np.random.default_rng(1)
    B = A.with_vertices(A.vertices + rng.normal(size=A.vertices.shape))
    m = build_ssm([A, B])
    a, b = A.vertices.reshape(-1), B.vertices.reshape(-1)
    np.testing.assert_allclose(m.mean, (a + b) / 2, atol=1e-10)
    assert m.n_modes == 1
    d = (b - a) / np.linalg.norm(b - a)
    assert abs(abs(m.modes[:, 0] @ d) - 1) <= 1e-10
    np.testing.assert_allclose(m.variances[0], np.sum((b - a) ** 2) / 4, rtol=1e-10)


def test_identical_shapes_have_no_modes():
    A = sphere_mesh(40)
    m = build_ssm([A, A, A])
    assert m.n_modes == 0


def test_dense_covariance_oracle(cohort, model):
    X = np.stack([c.vertices.reshape(-1) for c in cohort])
    C = np.cov(X, rowvar=False, bias=True)
    ev = np.sort(np.linalg.eigvalsh(C))[::-1][: model.n_modes]
    np.testing.assert_allclose(model.variances, ev, rtol=1e-6)
    assert model.n_modes <= len(cohort) - 1
    np.testing.assert_allclose(model.variances.sum(), np.trace(C), rtol=1e-6)


def test_modes_orthonormal(model):
    np.testing.assert_allclose(model.modes.T @ model.modes, np.eye(model.n_modes), atol=1e-8)


def test_errors():
    A = sphere_mesh(40)
    with pytest.raises(ArgumentError):
        build_ssm([A])
    with pytest.raises(ValidationError):
        build_ssm([A, sphere_mesh(41)])


def test_model_validation():
    with pytest.raises(ValidationError):
        ShapeModel(np.zeros((0, 3)), np.zeros(6), np.zeros((6, 2)), [1.0, 2.0])
    with pytest.raises(ValidationError):
        ShapeModel(np.zeros((0, 3)), np.zeros(6), np.zeros((6, 1)), [-1.0])


# ------------------------------------------------------------------ sample / project

def test_zero_coefficients_give_mean(model):
    np.testing.assert_array_equal(sample_shape(model, np.zeros(model.n_modes)).vertices.reshape(-1), model.mean)


def test_three_sigma_along_first_mode(model):
    c = np.zeros(model.n_modes)
    c[0] = 3.0
    x = sample_shape(model, c).vertices.reshape(-1)
    np.testing.assert_allclose(x - model.mean, 3 * np.sqrt(model.variances[0]) * model.modes[:, 0], atol=1e-10)


def test_round_trips(model, cohort):
    rng = np.random.default_rng(2)
    c = rng.normal(size=model.n_modes)
    np.testing.assert_allclose(project_shape(model, sample_shape(model, c)), c, atol=1e-8)
    np.testing.assert_allclose(project_shape(model, model.mean_mesh()), 0, atol=1e-12)
    _, resid = project_shape(model, cohort[3], return_residual=True)
    assert resid <= 1e-6


def test_wrong_coefficient_length(model):
    with pytest.raises(ArgumentError):
        sample_shape(model, np.zeros(model.n_modes + 1))


def test_projection_topology_mismatch(model):
    m = model.mean_mesh()
    with pytest.raises(ValidationError):
        project_shape(model, TriMesh(m.vertices, m.faces[:, ::-1]))


# ------------------------------------------------------------------ posterior

def test_empty_field_is_identity(model):
    post = posterior_model(model, DeformationField.from_pairs([]))
    assert post is model


def test_posterior_of_zero_mode_model_is_prior():
    A = sphere_mesh(40)
    m = build_ssm([A, A])
    fld = DeformationField([0], [A.vertices[0] + 1])
    assert posterior_model(m, fld) is m


def test_full_noise_free_observation(model):
    rng = np.random.default_rng(3)
    target = sample_shape(model, rng.normal(size=model.n_modes))
    fld = DeformationField(np.arange(model.n_vertices), target.vertices, noise_sigma=1e-6)
    post = posterior_model(model, fld)
    shape = posterior_mean_shape(post)
    assert np.sqrt(np.mean(np.sum((shape.vertices - target.vertices) ** 2, axis=1))) <= 1e-4
    assert np.all(post.variances <= 1e-6 * model.variances[: post.n_modes])


def test_three_landmarks_match_ridge_oracle(model):
    rng = np.random.default_rng(4)
    target = sample_shape(model, rng.normal(size=model.n_modes))
    idx = np.array([5, 77, 150])
    fld = DeformationField(idx, target.vertices[idx], noise_sigma=1.0)
    post = posterior_model(model, fld)
    rows = (3 * idx[:, None] + np.arange(3)).reshape(-1)
    Q = (model.modes * np.sqrt(model.variances))[rows]
    r = target.vertices[idx].reshape(-1) - model.mean[rows]
    # ridge as an augmented least-squares problem, solved independently
    A = np.vstack([Q, np.eye(model.n_modes)])
    y = np.concatenate([r, np.zeros(model.n_modes)])
    oracle = np.linalg.lstsq(A, y, rcond=None)[0]
    np.testing.assert_allclose(post.coefficient_mean, oracle, atol=1e-8)
    assert isinstance(post, PosteriorModel)


def test_observations_at_mean_leave_mean(model):
    idx = np.array([1, 2, 3])
    fld = DeformationField(idx, model.mean.reshape(-1, 3)[idx])
    post = posterior_model(model, fld)
    np.testing.assert_allclose(post.mean, model.mean, atol=1e-9)


def test_huge_sigma_returns_prior_mean(model):
    rng = np.random.default_rng(5)
    idx = np.arange(0, 200, 7)
    pts = model.mean.reshape(-1, 3)[idx] + rng.normal(scale=10, size=(len(idx), 3))
    post = posterior_model(model, DeformationField(idx, pts, noise_sigma=1e6 * 50))
    assert np.abs(post.mean - model.mean).max() <= 1e-3


def test_posterior_contracts_over_random_fields(model):
    rng = np.random.default_rng(6)
    for _ in range(100):
        k = int(rng.integers(1, 30))
        idx = rng.choice(model.n_vertices, k, replace=False)
        pts = model.mean.reshape(-1, 3)[idx] + rng.normal(scale=5, size=(k, 3))
        post = posterior_model(model, DeformationField(idx, pts, noise_sigma=float(rng.uniform(0.1, 5))))
        assert np.all(post.variances <= model.variances * (1 + 1e-12))
        assert np.all(np.diag(post.coefficient_covariance) <= 1 + 1e-12)
        np.testing.assert_allclose(post.modes.T @ post.modes, np.eye(post.n_modes), atol=1e-8)


def test_field_validation(model):
    with pytest.raises(ValidationError):
        DeformationField([1, 1], np.zeros((2, 3)))
    with pytest.raises(ArgumentError):
        DeformationField([1], np.zeros((1, 3)), noise_sigma=0)
    with pytest.raises(ValidationError):
        posterior_model(model, DeformationField([10_000], np.zeros((1, 3))))


# ------------------------------------------------------------------ serialisation

def test_save_load_round_trip(tmp_path, model):
    save_model(model, tmp_path / "m.bssm")
    back = load_model(tmp_path / "m.bssm")
    for name in ("mean", "modes", "variances"):
        np.testing.assert_allclose(getattr(back, name), getattr(model, name), atol=1e-12)
    np.testing.assert_array_equal(back.faces, model.faces)
    assert back.landmarks == model.landmarks
    fld = DeformationField([0, 9, 99], model.mean.reshape(-1, 3)[[0, 9, 99]] + 1.0)
    np.testing.assert_allclose(posterior_model(back, fld).mean, posterior_model(model, fld).mean, atol=1e-12)


def test_two_mode_round_trip():
    m = build_ssm(make_cohort(3, 30))
    assert m.n_modes == 2
    back = model_from_bytes(model_to_bytes(m))
    np.testing.assert_allclose(back.modes, m.modes, atol=1e-12)


def test_format_errors(model):
    data = model_to_bytes(model)
    with pytest.raises(FormatError, match="truncated"):
        model_from_bytes(data[:-5])
    with pytest.raises(FormatError, match="trailing"):
        model_from_bytes(data + b"\0")
    with pytest.raises(FormatError, match="magic"):
        model_from_bytes(b"XXXX" + data[4:])
    bumped = data.replace(b'"version": 1', b'"version": 2')
    with pytest.raises(FormatError, match="version"):
        model_from_bytes(bumped)
    assert data.startswith(MODEL_MAGIC)


def test_serialisation_is_deterministic(model):
    assert model_to_bytes(model) == model_to_bytes(model)


# ------------------------------------------------------------------ estimators

def test_pca_estimator(cohort, model):
    X = np.stack([c.vertices for c in cohort])
    est = PCAShapeModel().fit(X)
    np.testing.assert_allclose(est.explained_variance_, model.variances, rtol=1e-10)
    C = est.transform(X[:3])
    np.testing.assert_allclose(est.inverse_transform(C), X[:3], atol=1e-6)
    assert est.score_samples(X[:2]).max() <= 1e-6


def test_posterior_regressor(model):
    rng = np.random.default_rng(7)
    target = sample_shape(model, rng.normal(size=model.n_modes)).vertices
    idx = np.arange(model.n_vertices)
    reg = PosteriorShapeRegressor(noise_sigma=1e-6, model=model).fit()
    pred = reg.predict([(idx, target[idx])])
    np.testing.assert_allclose(pred[0], target, atol=1e-4)
    assert reg.score([(idx, target[idx])], target[None]) > -1e-4
