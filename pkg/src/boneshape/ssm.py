"""PCA statistical shape models and posterior (conditioned) shape models.

A model describes shapes as ``mean + modes @ (c * sqrt(variances))`` over a
fixed triangle topology, with ``c`` in standard-deviation units. Flattened
shape vectors are ``(x0, y0, z0, x1, ...)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import frozen
from .exceptions import ArgumentError, FormatError, ValidationError
from .mesh import TriMesh, VertexRegion
from .mesh.io import atomic_write_bytes

RELATIVE_VARIANCE_FLOOR = 1e-10
POSTERIOR_VARIANCE_FLOOR = 1e-12
DEFAULT_NOISE_SIGMA = 1.0


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """Mean shape, orthonormal modes and per-mode variances (mm²).

    ``landmarks`` optionally names vertices of the topology (e.g. the fovea
    or notch of the template); ``metadata`` is free-form provenance.
    """

    faces: np.ndarray
    mean: np.ndarray
    modes: np.ndarray
    variances: np.ndarray
    landmarks: Mapping[str, int] = field(default_factory=dict)
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        if mean.size % 3:
            raise ValidationError("mean length must be a multiple of 3")
        modes = np.asarray(self.modes, dtype=np.float64)
        if modes.size == 0:
            modes = modes.reshape(mean.size, 0)
        variances = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if modes.shape != (mean.size, variances.size):
            raise ValidationError(f"modes shape {modes.shape} does not match mean/variances")
        if variances.size:
            if np.any(np.diff(variances) > 0):
                raise ValidationError("variances must be sorted non-increasing")
            if np.any(variances <= 0):
                raise ValidationError("variances must be positive")
        faces = TriMesh(mean.reshape(-1, 3), self.faces).faces
        n = mean.size // 3
        for name, idx in dict(self.landmarks).items():
            if not 0 <= int(idx) < n:
                raise ValidationError(f"landmark {name!r} index {idx} out of range")
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "mean", frozen(mean))
        object.__setattr__(self, "modes", frozen(modes))
        object.__setattr__(self, "variances", frozen(variances))
        object.__setattr__(self, "landmarks", {str(k): int(v) for k, v in dict(self.landmarks).items()})
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def n_vertices(self) -> int:
        return self.mean.size // 3

    @property
    def n_modes(self) -> int:
        return self.variances.size

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variances)

    def scaled_modes(self) -> np.ndarray:
        """Modes multiplied by their standard deviations (``Q`` in ``x = mean + Q c``)."""
        return self.modes * self.std[None, :]

    def mean_mesh(self) -> TriMesh:
        return TriMesh(self.mean.reshape(-1, 3), self.faces)

    def landmark_point(self, name) -> np.ndarray:
        return self.mean.reshape(-1, 3)[self.landmarks[name]]

    def replace(self, **changes) -> "ShapeModel":
        fields = dict(
            faces=self.faces,
            mean=self.mean,
            modes=self.modes,
            variances=self.variances,
            landmarks=self.landmarks,
            metadata=self.metadata,
        )
        fields.update(changes)
        return type(self)(**fields)


@dataclass(frozen=True, eq=False)
class PosteriorModel(ShapeModel):
    """A :class:`ShapeModel` conditioned on observed vertex positions.

    ``coefficient_mean`` / ``coefficient_covariance`` are the posterior of
    the prior model's coefficients (standard-deviation units).
    """

    coefficient_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    coefficient_covariance: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def replace(self, **changes):
        changes.setdefault("coefficient_mean", self.coefficient_mean)
        changes.setdefault("coefficient_covariance", self.coefficient_covariance)
        return super().replace(**changes)


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Sparse observations ``model vertex index -> observed point`` with isotropic noise."""

    indices: np.ndarray
    points: np.ndarray
    noise_sigma: float = DEFAULT_NOISE_SIGMA

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3) if np.size(self.points) else np.zeros((0, 3))
        if len(idx) != len(pts):
            raise ValidationError("need one observed point per index")
        if np.unique(idx).size != idx.size:
            raise ValidationError("observation indices must be unique")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("observed points must be finite")
        if not self.noise_sigma > 0:
            raise ArgumentError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        object.__setattr__(self, "indices", frozen(idx))
        object.__setattr__(self, "points", frozen(pts))
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))

    def __len__(self):
        return len(self.indices)

    @classmethod
    def from_pairs(cls, pairs, noise_sigma=DEFAULT_NOISE_SIGMA):
        pairs = list(pairs)
        if not pairs:
            return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), noise_sigma)
        idx, pts = zip(*pairs)
        return cls(np.asarray(idx), np.asarray(pts), noise_sigma)

    def check(self, model: ShapeModel):
        if len(self) and self.indices.max() >= model.n_vertices:
            raise ValidationError(f"observation index {int(self.indices.max())} >= model size {model.n_vertices}")


def _stack(cohort):
    meshes = list(cohort)
    if len(meshes) < 2:
        raise ArgumentError(f"need at least 2 shapes to build a model, got {len(meshes)}")
    first = meshes[0]
    for i, m in enumerate(meshes[1:], start=1):
        if m.n_vertices != first.n_vertices or not np.array_equal(m.faces, first.faces):
            raise ValidationError(f"shape {i} does not share the topology of shape 0")
    return first.faces, np.stack([m.vertices.reshape(-1) for m in meshes])


def build_ssm(cohort, landmarks: Mapping[str, int] | None = None, metadata=None) -> ShapeModel:
    """PCA model from meshes in dense correspondence.

    The covariance divisor is the cohort size ``n``. The decomposition runs
    on the ``n x 3N`` centred data matrix, so the cost is governed by the
    cohort size rather than the vertex count. Modes whose variance is below
    ``1e-10`` times the largest one are dropped.
    """
    faces, X = _stack(cohort)
    n = X.shape[0]
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    variances = s**2 / n
    coord_scale = float(np.sqrt(np.mean(mean**2))) or 1.0
    floor = max(RELATIVE_VARIANCE_FLOOR * (variances[0] if variances.size else 0.0), (1e-9 * coord_scale) ** 2)
    keep = variances > floor
    return ShapeModel(
        faces=faces,
        mean=mean,
        modes=Vt[keep].T,
        variances=variances[keep],
        landmarks=landmarks or {},
        metadata=metadata or {},
    )


def _check_coefficients(model, coefficients):
    c = np.asarray(coefficients, dtype=np.float64).reshape(-1)
    if c.size != model.n_modes:
        raise ArgumentError(f"expected {model.n_modes} coefficients, got {c.size}")
    return c


def sample_shape(model: ShapeModel, coefficients) -> TriMesh:
    """Shape at ``coefficients`` (standard deviations along each mode)."""
    c = _check_coefficients(model, coefficients)
    x = model.mean + model.modes @ (c * model.std)
    return TriMesh(x.reshape(-1, 3), model.faces)


def _shape_vector(model, shape):
    if isinstance(shape, TriMesh):
        v = shape.vertices
    else:
        v = np.asarray(shape, dtype=np.float64)
    v = v.reshape(-1)
    if v.size != model.mean.size:
        raise ValidationError(f"shape has {v.size // 3} vertices, model has {model.n_vertices}")
    return v


def project_shape(model: ShapeModel, shape, return_residual=False):
    """Least-squares coefficients (std units) of ``shape`` in the model.

    With ``return_residual=True`` also returns the RMS vertex distance
    between ``shape`` and its reconstruction.
    """
    if isinstance(shape, TriMesh) and shape.n_vertices == model.n_vertices and not np.array_equal(shape.faces, model.faces):
        raise ValidationError("shape topology does not match the model")
    d = _shape_vector(model, shape) - model.mean
    b = model.modes.T @ d
    c = b / model.std if model.n_modes else b
    if not return_residual:
        return c
    r = d - model.modes @ b
    return c, float(np.sqrt(np.mean(np.sum(r.reshape(-1, 3) ** 2, axis=1))))


def _observed_rows(indices):
    return (3 * np.asarray(indices)[:, None] + np.arange(3)[None, :]).reshape(-1)


def posterior_model(model: ShapeModel, field: DeformationField) -> ShapeModel:
    """Condition ``model`` on the observations in ``field``.

    With ``Q = modes * std``, ``s`` the observed coordinates and ``σ`` the
    noise level, the posterior coefficients are Gaussian with mean
    ``(Q_sᵀQ_s + σ²I)⁻¹ Q_sᵀ (y_s − μ_s)`` and covariance
    ``σ² (Q_sᵀQ_s + σ²I)⁻¹``. The covariance is re-diagonalised so the
    result is itself a valid model over all vertices. An empty field, or a
    model without modes, returns ``model`` unchanged.
    """
    field.check(model)
    if len(field) == 0 or model.n_modes == 0:
        return model
    M = model.n_modes
    sigma2 = field.noise_sigma**2
    rows = _observed_rows(field.indices)
    Q = model.scaled_modes()
    Qs = Q[rows]
    resid = field.points.reshape(-1) - model.mean[rows]
    A = Qs.T @ Qs + sigma2 * np.eye(M)
    L = np.linalg.cholesky(A)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, Qs.T @ resid))
    Ainv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(M)))
    cov = sigma2 * 0.5 * (Ainv + Ainv.T)
    # covariance of the shape vector: modes (D^½ cov D^½) modesᵀ
    std = model.std
    C = std[:, None] * cov * std[None, :]
    evals, evecs = np.linalg.eigh(0.5 * (C + C.T))
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], POSTERIOR_VARIANCE_FLOOR)
    evecs = evecs[:, order]
    modes = model.modes @ evecs
    # re-orthonormalise against round-off, keeping column signs
    qm, rm = np.linalg.qr(modes)
    modes = qm * np.sign(np.diag(rm))[None, :]
    return PosteriorModel(
        faces=model.faces,
        mean=model.mean + Q @ alpha,
        modes=modes,
        variances=evals,
        landmarks=model.landmarks,
        metadata={**model.metadata, "posterior_observations": int(len(field)), "noise_sigma": field.noise_sigma},
        coefficient_mean=alpha,
        coefficient_covariance=cov,
    )


def posterior_mean_shape(posterior: ShapeModel) -> TriMesh:
    """The most probable shape under ``posterior``, i.e. its mean."""
    return posterior.mean_mesh()


def _as_vertex_arrays(X):
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], TriMesh):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr.reshape(arr.shape[0], -1, 3)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected shapes as (n_shapes, n_vertices, 3), got {arr.shape}")
    return arr


class PCAShapeModel(TransformerMixin, BaseEstimator):
    """Estimator front end for :func:`build_ssm`.

    ``fit`` takes in-correspondence shapes, either a list of meshes sharing
    one topology or an array ``(n_shapes, n_vertices, 3)`` (or flattened).
    ``transform`` projects shapes to coefficients in standard-deviation
    units and ``inverse_transform`` maps coefficients back to vertex arrays.
    """

    def __init__(self, faces=None):
        self.faces = faces

    def fit(self, X, y=None):
        X = _as_vertex_arrays(X)
        if isinstance(X, (list, tuple)):
            meshes = X
        else:
            faces = np.zeros((0, 3), dtype=np.int64) if self.faces is None else self.faces
            meshes = [TriMesh(x, faces) for x in X]
        self.model_ = build_ssm(meshes)
        self.mean_ = self.model_.mean.reshape(-1, 3)
        self.components_ = self.model_.modes.T
        self.explained_variance_ = self.model_.variances
        self.n_components_ = self.model_.n_modes
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = _as_vertex_arrays(X)
        return np.stack([project_shape(self.model_, x) for x in X])

    def inverse_transform(self, X):
        check_is_fitted(self, "model_")
        C = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.stack([sample_shape(self.model_, c).vertices for c in C])

    def score_samples(self, X):
        """Per-shape reconstruction RMSE (mm) after projection onto the model."""
        check_is_fitted(self, "model_")
        X = _as_vertex_arrays(X)
        return np.array([project_shape(self.model_, x, return_residual=True)[1] for x in X])


class PosteriorShapeRegressor(RegressorMixin, BaseEstimator):
    """Predict complete shapes from sparse vertex observations.

    ``fit`` learns the prior (same input as :class:`PCAShapeModel`, or a
    ready :class:`ShapeModel` via ``model``). ``predict`` takes a sequence of
    :class:`DeformationField` (or ``(indices, points)`` pairs) and returns the
    posterior mean vertex array for each.
    """

    def __init__(self, noise_sigma=DEFAULT_NOISE_SIGMA, model=None):
        self.noise_sigma = noise_sigma
        self.model = model

    def fit(self, X=None, y=None):
        if self.model is not None:
            self.model_ = self.model
        else:
            self.model_ = PCAShapeModel().fit(X).model_
        return self

    def _field(self, obs):
        if isinstance(obs, DeformationField):
            return obs
        idx, pts = obs
        return DeformationField(idx, pts, self.noise_sigma)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return np.stack([
            posterior_mean_shape(posterior_model(self.model_, self._field(obs))).vertices for obs in X
        ])

    def score(self, X, y, sample_weight=None):
        """Negative mean vertex RMSE between predictions and ``y`` (higher is better)."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=np.float64).reshape(pred.shape)
        rmse = np.sqrt(np.mean(np.sum((pred - y) ** 2, axis=2), axis=1))
        return -float(np.average(rmse, weights=sample_weight))


MODEL_MAGIC = b"BONESSM\0"
MODEL_FORMAT_VERSION = 1


def _model_header(model: ShapeModel, provenance=None):
    header = {
        "version": MODEL_FORMAT_VERSION,
        "n_vertices": model.n_vertices,
        "n_modes": model.n_modes,
        "n_faces": int(len(model.faces)),
        "landmarks": dict(model.landmarks),
        "provenance": dict(provenance if provenance is not None else model.metadata),
    }
    return json.dumps(header, sort_keys=True, default=_json_default).encode("utf-8")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serialisable")


def model_to_bytes(model: ShapeModel, provenance=None) -> bytes:
    """Serialise ``model``; see ``docs/model_format.md`` for the byte layout."""
    header = _model_header(model, provenance)
    parts = [
        MODEL_MAGIC,
        struct.pack("<I", len(header)),
        header,
        model.mean.astype("<f8").tobytes(),
        np.ascontiguousarray(model.modes).astype("<f8").tobytes(),
        model.variances.astype("<f8").tobytes(),
        model.faces.astype("<i8").tobytes(),
    ]
    return b"".join(parts)


def model_from_bytes(data: bytes) -> ShapeModel:
    if len(data) < len(MODEL_MAGIC) + 4 or data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError("not a shape model file (bad magic)")
    pos = len(MODEL_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + hlen > len(data):
        raise FormatError(f"truncated header at byte {pos}")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    pos += hlen
    version = header.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version!r} (expected {MODEL_FORMAT_VERSION})")
    try:
        n, m, nf = int(header["n_vertices"]), int(header["n_modes"]), int(header["n_faces"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"header field missing or invalid: {exc}") from None
    sizes = [3 * n * 8, 3 * n * m * 8, m * 8, 3 * nf * 8]
    expected = pos + sum(sizes)
    if len(data) != expected:
        what = "truncated" if len(data) < expected else "has trailing bytes"
        raise FormatError(f"model file {what}: {len(data)} bytes, expected {expected}")
    arrays = []
    for size, dtype in zip(sizes, ["<f8", "<f8", "<f8", "<i8"]):
        arrays.append(np.frombuffer(data, dtype=dtype, count=size // 8, offset=pos))
        pos += size
    mean, modes, variances, faces = arrays
    try:
        return ShapeModel(
            faces=faces.reshape(nf, 3).astype(np.int64),
            mean=mean.astype(np.float64),
            modes=modes.reshape(3 * n, m).astype(np.float64),
            variances=variances.astype(np.float64),
            landmarks=header.get("landmarks", {}),
            metadata=header.get("provenance", {}),
        )
    except ValidationError as exc:
        raise FormatError(f"model payload is invalid: {exc}") from None


def save_model(model: ShapeModel, path, provenance=None):
    atomic_write_bytes(Path(path), model_to_bytes(model, provenance))


def load_model(path) -> ShapeModel:
    return model_from_bytes(Path(path).read_bytes())
