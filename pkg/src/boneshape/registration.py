"""Non-rigid Coherent Point Drift (Myronenko & Song) and landmark pairing.

The source vertices are Gaussian mixture centroids moved by a smooth
displacement field ``T(Y) = Y + G W`` (``G`` a Gaussian kernel over the
source) and fitted to the target vertices by expectation-maximisation.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .validation import check_points, frozen
from .exceptions import ArgumentError, NumericalError, SingularityError, ValidationError
from .mesh import TriMesh, VertexRegion, nearest_vertices, save_mesh
from .mesh.io import atomic_write_bytes

logger = logging.getLogger(__name__)

# relative slack allowed on the per-iteration objective decrease (float round-off)
MONOTONE_RTOL = 1e-9


@dataclass(frozen=True)
class CpdParams:
    beta: float = 2.0
    lambda_: float = 3.0
    w: float = 0.1
    max_iterations: int = 150
    tolerance: float = 1e-6

    def __post_init__(self):
        if not self.beta > 0:
            raise ArgumentError(f"beta must be > 0, got {self.beta}")
        if not self.lambda_ > 0:
            raise ArgumentError(f"lambda must be > 0, got {self.lambda_}")
        if not 0 <= self.w < 1:
            raise ArgumentError(f"w must be in [0, 1), got {self.w}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise ArgumentError(f"max_iterations must be a positive integer, got {self.max_iterations}")
        if not self.tolerance > 0:
            raise ArgumentError(f"tolerance must be > 0, got {self.tolerance}")

    def to_json_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d


@dataclass(frozen=True, eq=False)
class Correspondence:
    """Result of fitting a source mesh onto a target.

    ``mesh`` is the source topology with the deformed vertex positions.
    """

    mesh: TriMesh
    fitting_rmse: float
    iterations: int
    converged: bool
    sigma2: float
    objective_history: np.ndarray = field(repr=False)
    params: CpdParams = field(default_factory=CpdParams)

    def __post_init__(self):
        if not self.fitting_rmse >= 0:
            raise ValidationError("fitting_rmse must be non-negative")
        object.__setattr__(self, "objective_history", frozen(np.asarray(self.objective_history, dtype=np.float64)))

    @property
    def positions(self) -> np.ndarray:
        return self.mesh.vertices

    def sidecar(self) -> dict:
        return {
            "fitting_rmse": self.fitting_rmse,
            "iterations": self.iterations,
            "converged": self.converged,
            "params": self.params.to_json_dict(),
        }

    def save(self, ply_path, json_path=None):
        """PLY of the deformed source plus a JSON sidecar."""
        save_mesh(self.mesh, ply_path)
        json_path = json_path or str(ply_path).rsplit(".", 1)[0] + ".json"
        atomic_write_bytes(json_path, (json.dumps(self.sidecar(), indent=2) + "\n").encode())


# ----------------------------------------------------------------- kernels

# Terms below exp(-40) (about 4e-18) of the largest in their row are dropped:
# they sit under half an ulp of the row normaliser, which is at least 1.
E_CUTOFF = 40.0

@njit(cache=True)
def _e_step_kernel(T, X, inv2s2, log_c):
    """One pass over the target points.

    Returns log(sum_m exp(-|x_n - t_m|^2 / 2s2) + c) per target point and the
    responsibility sums P1 = P @ 1, PX = P @ X (P[m, n] = posterior of
    centroid m for point n). Sums run in fixed index order.
    """
    n_x = X.shape[0]
    n_y = T.shape[0]
    logden = np.empty(n_x)
    P1 = np.zeros(n_y)
    PX = np.zeros((n_y, 3))
    d = np.empty(n_y)
    e = np.empty(n_y)
    for n in range(n_x):
        x0, x1, x2 = X[n, 0], X[n, 1], X[n, 2]
        dmin = np.inf
        for m in range(n_y):
            dm = (x0 - T[m, 0]) ** 2 + (x1 - T[m, 1]) ** 2 + (x2 - T[m, 2]) ** 2
            d[m] = dm
            if dm < dmin:
                dmin = dm
        top = max(-dmin * inv2s2, log_c)
        s = math.exp(log_c - top)
        for m in range(n_y):
            arg = -d[m] * inv2s2 - top
            em = math.exp(arg) if arg > -E_CUTOFF else 0.0
            e[m] = em
            s += em
        logden[n] = top + math.log(s)
        r = 1.0 / s
        for m in range(n_y):
            if e[m] == 0.0:
                continue
            p = e[m] * r
            P1[m] += p
            PX[m, 0] += p * x0
            PX[m, 1] += p * x1
            PX[m, 2] += p * x2
    return logden, P1, PX


@njit(cache=True)
def _e_step_grid(T, X, inv2s2, log_c, h):
    """Same sums as ``_e_step_kernel`` without visiting pairs it would drop.

    Centroids are binned on a grid of cell size ``h``. For each target point
    the 5x5x5 cell block around it holds every centroid within ``2h``; that
    covers all kept terms whenever ``dmin + E_CUTOFF / inv2s2 <= 4 h^2``.
    Points failing the test fall back to the full scan, so the result equals
    the dense kernel up to summation order.
    """
    n_x = X.shape[0]
    n_y = T.shape[0]
    lo0, lo1, lo2 = T[:, 0].min(), T[:, 1].min(), T[:, 2].min()
    d0 = int((T[:, 0].max() - lo0) / h) + 1
    d1 = int((T[:, 1].max() - lo1) / h) + 1
    d2 = int((T[:, 2].max() - lo2) / h) + 1
    cell = np.empty(n_y, dtype=np.int64)
    counts = np.zeros(d0 * d1 * d2 + 1, dtype=np.int64)
    for m in range(n_y):
        c = (int((T[m, 0] - lo0) / h) * d1 + int((T[m, 1] - lo1) / h)) * d2 + int((T[m, 2] - lo2) / h)
        cell[m] = c
        counts[c + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    order = np.empty(n_y, dtype=np.int64)
    for m in range(n_y):
        order[fill[cell[m]]] = m
        fill[cell[m]] += 1
    reach = E_CUTOFF / inv2s2
    logden = np.empty(n_x)
    P1 = np.zeros(n_y)
    PX = np.zeros((n_y, 3))
    idx = np.empty(n_y, dtype=np.int64)
    d = np.empty(n_y)
    e = np.empty(n_y)
    for n in range(n_x):
        x0, x1, x2 = X[n, 0], X[n, 1], X[n, 2]
        i0 = int(math.floor((x0 - lo0) / h))
        i1 = int(math.floor((x1 - lo1) / h))
        i2 = int(math.floor((x2 - lo2) / h))
        k = 0
        for a in range(max(i0 - 2, 0), min(i0 + 3, d0)):
            for b in range(max(i1 - 2, 0), min(i1 + 3, d1)):
                base = (a * d1 + b) * d2
                for c in range(max(i2 - 2, 0), min(i2 + 3, d2)):
                    for j in range(start[base + c], start[base + c + 1]):
                        idx[k] = order[j]
                        k += 1
        dmin = np.inf
        for j in range(k):
            m = idx[j]
            dm = (x0 - T[m, 0]) ** 2 + (x1 - T[m, 1]) ** 2 + (x2 - T[m, 2]) ** 2
            d[j] = dm
            if dm < dmin:
                dmin = dm
        if not dmin + reach <= 4.0 * h * h:
            k = n_y
            dmin = np.inf
            for m in range(n_y):
                idx[m] = m
                dm = (x0 - T[m, 0]) ** 2 + (x1 - T[m, 1]) ** 2 + (x2 - T[m, 2]) ** 2
                d[m] = dm
                if dm < dmin:
                    dmin = dm
        top = max(-dmin * inv2s2, log_c)
        s = math.exp(log_c - top)
        for j in range(k):
            arg = -d[j] * inv2s2 - top
            em = math.exp(arg) if arg > -E_CUTOFF else 0.0
            e[j] = em
            s += em
        logden[n] = top + math.log(s)
        r = 1.0 / s
        for j in range(k):
            if e[j] == 0.0:
                continue
            m = idx[j]
            p = e[j] * r
            P1[m] += p
            PX[m, 0] += p * x0
            PX[m, 1] += p * x1
            PX[m, 2] += p * x2
    return logden, P1, PX


# a grid pays off once the 5x5x5 search block is a small part of the cloud
_GRID_MIN_CELLS = 8
_GRID_MAX_CELLS = 4_000_000


def _e_step(T, X, inv2s2, log_c):
    h = math.sqrt(E_CUTOFF / inv2s2 / 3.0)
    extent = np.ptp(T, axis=0)
    if np.max(extent / h) < _GRID_MIN_CELLS or len(T) < 1000:
        return _e_step_kernel(T, X, inv2s2, log_c)
    # coarsen when the grid would be too fine; coverage only improves with larger h
    n_cells = float(np.prod(extent / h + 1))
    if n_cells > _GRID_MAX_CELLS:
        h *= (n_cells / _GRID_MAX_CELLS) ** (1 / 3)
    return _e_step_grid(T, X, inv2s2, log_c, h)


def gaussian_kernel(Y, beta):
    sq = np.sum(Y**2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T, 0.0)
    return np.exp(-d2 / (2.0 * beta**2))


# eigenvalues below this fraction of the largest are round-off in G itself
SPECTRUM_RTOL = 1e-15
_EIGH_MAX = 2500


def _kernel_spectrum(G, rank=256):
    """Eigenpairs of ``G`` above ``SPECTRUM_RTOL`` of the top one, or None.

    Dropping the rest changes ``G`` by less than its own floating point
    error, so solves through the returned basis match the dense solve to
    round-off. Large kernels use a randomised range finder with a fixed
    seed and one power step. None means the spectrum decays too slowly for
    a basis of ``rank`` columns to capture it.
    """
    n = len(G)
    if n <= _EIGH_MAX:
        lam, Q = eigh(G)
    else:
        omega = np.random.default_rng(0).standard_normal((n, rank))
        basis, _ = np.linalg.qr(G @ omega)
        basis, _ = np.linalg.qr(G @ basis)
        lam, V = eigh(basis.T @ G @ basis)
        Q = basis @ V
    lam, Q = lam[::-1], Q[:, ::-1]
    keep = lam > SPECTRUM_RTOL * lam[0]
    if n > _EIGH_MAX and keep.sum() > rank // 2 or keep.sum() > n // 4:
        return None
    return np.ascontiguousarray(Q[:, keep]), lam[keep]


def _normalization(source):
    center = source.mean(axis=0)
    scale = float(np.sqrt(np.mean(np.sum((source - center) ** 2, axis=1))))
    if scale == 0:
        raise ValidationError("source points are all coincident")
    return center, scale


class _CpdState:
    """Plain EM loop; kept separate so the estimator and the functional API share it."""

    def __init__(self, Y, X, params):
        self.Y = Y
        self.X = X
        self.p = params
        self.G = gaussian_kernel(Y, params.beta)
        self.spectrum = _kernel_spectrum(self.G)
        self.W = np.zeros_like(Y)
        self.T = Y.copy()
        n_x, n_y = len(X), len(Y)
        diff2 = (
            n_y * np.sum(X**2) + n_x * np.sum(Y**2) - 2.0 * np.sum(X.sum(axis=0) * Y.sum(axis=0))
        )
        self.sigma2 = max(diff2 / (3.0 * n_x * n_y), 1e-12)
        self.xx = np.sum(X**2, axis=1)

    def log_c(self):
        w = self.p.w
        if w == 0:
            return -np.inf
        n_x, n_y = len(self.X), len(self.Y)
        return 1.5 * math.log(2 * math.pi * self.sigma2) + math.log(w / (1 - w)) + math.log(n_y / n_x)

    def e_step(self):
        inv = 1.0 / (2.0 * self.sigma2)
        log_c = self.log_c()
        logden, P1, PX = _e_step(self.T, self.X, inv, log_c)
        n_x, n_y = len(self.X), len(self.Y)
        w = self.p.w
        objective = (
            -np.sum(logden)
            - n_x * math.log((1 - w) / n_y)
            + 1.5 * n_x * math.log(2 * math.pi * self.sigma2)
            + 0.5 * self.p.lambda_ * float(np.sum(self.W * self.apply_g(self.W)))
        )
        Pt1 = 1.0 - np.exp(log_c - logden) if np.isfinite(log_c) else np.ones(n_x)
        return objective, P1, Pt1, PX

    def apply_g(self, W):
        if self.spectrum is None:
            return self.G @ W
        Q, lam = self.spectrum
        return Q @ (lam[:, None] * (Q.T @ W))

    def _solve_spectral(self, P1, PX, lam_s2):
        # (d(P1) G + lam s2 I) W = PX - d(P1) Y with G = Q L Q^T. Woodbury gives
        # G W = Q C, C = (lam s2 L^-1 + Q^T d(P1) Q)^-1 Q^T (PX - d(P1) Y), and
        # Q^T W = L^-1 C; no division by lam s2, which vanishes on exact fits.
        Q, lam = self.spectrum
        DQ = P1[:, None] * Q
        K = Q.T @ DQ
        K[np.diag_indices_from(K)] += lam_s2 / lam
        C = cho_solve(cho_factor(K, lower=True, check_finite=True), Q.T @ PX - DQ.T @ self.Y)
        return Q @ (C / lam[:, None])

    def m_step(self, P1, Pt1, PX, iteration):
        lam_s2 = self.p.lambda_ * self.sigma2
        if self.spectrum is not None:
            try:
                W = self._solve_spectral(P1, PX, lam_s2)
            except (LinAlgError, ValueError) as exc:
                raise SingularityError(iteration) from exc
            return self._finish(W, P1, Pt1, PX, iteration)
        s = np.sqrt(P1)
        # symmetric form of (G + lam s2 d(P1)^-1) W = d(P1)^-1 PX - Y
        A = s[:, None] * self.G * s[None, :]
        A[np.diag_indices_from(A)] += lam_s2
        safe = np.where(s > 1e-150, s, 1.0)
        rhs = np.where(s[:, None] > 1e-150, PX / safe[:, None], 0.0) - s[:, None] * self.Y
        try:
            Z = cho_solve(cho_factor(A, lower=True, check_finite=True), rhs)
        except (LinAlgError, ValueError) as exc:
            raise SingularityError(iteration) from exc
        W = s[:, None] * Z
        return self._finish(W, P1, Pt1, PX, iteration)

    def _finish(self, W, P1, Pt1, PX, iteration):
        T = self.Y + self.apply_g(W)
        Np = float(np.sum(P1))
        if Np <= 0:
            raise NumericalError(f"all responsibilities vanished at iteration {iteration}")
        sigma2 = (
            float(Pt1 @ self.xx) - 2.0 * float(np.sum(PX * T)) + float(P1 @ np.sum(T**2, axis=1))
        ) / (3.0 * Np)
        return W, T, sigma2


def cpd_register(source_points, target_points, params: CpdParams | None = None):
    """Run non-rigid CPD on raw point arrays.

    Returns ``(deformed_source, info)`` where ``info`` holds ``sigma2``,
    ``iterations``, ``converged``, ``objective_history`` (penalised negative
    log-likelihood per iteration, normalised units) and the displacement
    coefficients ``W`` with the normalisation used.
    """
    params = params or CpdParams()
    Y0 = check_points(source_points, "source")
    X0 = check_points(target_points, "target")
    center, scale = _normalization(Y0)
    Y = (Y0 - center) / scale
    X = (X0 - center) / scale
    st = _CpdState(Y, X, params)
    history = []
    converged = False
    iteration = 0
    sigma2_floor = 1e-14
    for iteration in range(1, params.max_iterations + 1):
        objective, P1, Pt1, PX = st.e_step()
        if not np.isfinite(objective):
            raise NumericalError(f"objective is not finite at iteration {iteration}")
        if history:
            prev = history[-1]
            if objective > prev + MONOTONE_RTOL * max(abs(prev), 1.0):
                raise NumericalError(
                    f"EM objective increased at iteration {iteration}: {prev!r} -> {objective!r}"
                )
        history.append(objective)
        if len(history) > 1 and abs(history[-2] - objective) <= params.tolerance * max(abs(objective), 1e-300):
            converged = True
            break
        W, T, sigma2 = st.m_step(P1, Pt1, PX, iteration)
        if sigma2 <= sigma2_floor:
            # the fit is exact to machine precision; a further E-step would underflow
            st.W, st.T = W, T
            st.sigma2 = sigma2_floor
            converged = True
            break
        st.W, st.T, st.sigma2 = W, T, sigma2
    deformed = st.T * scale + center
    info = {
        "sigma2": st.sigma2 * scale**2,
        "iterations": iteration,
        "converged": converged,
        "objective_history": np.asarray(history),
        "W": st.W,
        "center": center,
        "scale": scale,
        "Y": Y,
    }
    return deformed, info


def nearest_rmse(points, target_points, tree=None) -> float:
    tree = cKDTree(target_points) if tree is None else tree
    d, _ = tree.query(points)
    return float(np.sqrt(np.mean(d**2)))


def cpd_nonrigid(source: TriMesh, target: TriMesh | np.ndarray, params: CpdParams | None = None, seed=None) -> Correspondence:
    """Fit ``source`` onto ``target`` with non-rigid CPD.

    ``target`` may be a mesh or a bare ``(n, 3)`` point array (for a partial
    target). The algorithm is deterministic; ``seed`` is accepted for
    interface symmetry and recorded nowhere else. Faces of the source are
    carried through unchanged.
    """
    params = params or CpdParams()
    if source.n_vertices == 0:
        raise ValidationError("source mesh is empty")
    target_pts = target.vertices if isinstance(target, TriMesh) else check_points(target, "target")
    if len(target_pts) == 0:
        raise ValidationError("target is empty")
    deformed, info = cpd_register(source.vertices, target_pts, params)
    if not info["converged"]:
        logger.info("CPD stopped after %d iterations without meeting tolerance", info["iterations"])
    return Correspondence(
        mesh=source.with_vertices(deformed),
        fitting_rmse=nearest_rmse(deformed, target_pts),
        iterations=info["iterations"],
        converged=info["converged"],
        sigma2=info["sigma2"],
        objective_history=info["objective_history"],
        params=params,
    )


def extract_landmark_pairs(fitted: Correspondence | TriMesh, target: TriMesh | np.ndarray, picked: VertexRegion | np.ndarray):
    """Pair each picked fitted vertex with the nearest target vertex.

    Returns ``(indices, points)``: reference vertex indices and the matching
    target positions. ``target`` may be a point array, e.g. only the part of
    a test mesh that is actually available.
    """
    mesh = fitted.mesh if isinstance(fitted, Correspondence) else fitted
    idx = picked.indices if isinstance(picked, VertexRegion) else np.asarray(picked, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= mesh.n_vertices):
        raise ValidationError("picked index out of range for the fitted mesh")
    target_pts = target.vertices if isinstance(target, TriMesh) else np.asarray(target, dtype=np.float64)
    if idx.size == 0:
        return idx.copy(), np.zeros((0, 3))
    nn = nearest_vertices(target_pts, mesh.vertices[idx])
    return np.array(idx, dtype=np.int64), target_pts[nn].copy()


class CoherentPointDrift(BaseEstimator):
    """Non-rigid CPD as an estimator.

    ``fit(X, y)`` registers source points ``X`` onto target points ``y``.
    After fitting, ``fitted_points_`` holds the deformed source and
    ``transform`` evaluates the learned displacement field at new points.
    """

    def __init__(self, beta=2.0, lambda_=3.0, w=0.1, max_iterations=150, tolerance=1e-6):
        self.beta = beta
        self.lambda_ = lambda_
        self.w = w
        self.max_iterations = max_iterations
        self.tolerance = tolerance

    def _params(self):
        return CpdParams(self.beta, self.lambda_, self.w, self.max_iterations, self.tolerance)

    def fit(self, X, y):
        deformed, info = cpd_register(X, y, self._params())
        self.fitted_points_ = deformed
        self.sigma2_ = info["sigma2"]
        self.n_iter_ = info["iterations"]
        self.converged_ = info["converged"]
        self.objective_history_ = info["objective_history"]
        self._W = info["W"]
        self._Yn = info["Y"]
        self._center = info["center"]
        self._scale = info["scale"]
        self.fitting_rmse_ = nearest_rmse(deformed, check_points(y, "target"))
        return self

    def transform(self, X):
        check_is_fitted(self, "fitted_points_")
        Z = (check_points(X) - self._center) / self._scale
        sq_z = np.sum(Z**2, axis=1)
        sq_y = np.sum(self._Yn**2, axis=1)
        d2 = np.maximum(sq_z[:, None] + sq_y[None, :] - 2.0 * Z @ self._Yn.T, 0.0)
        G = np.exp(-d2 / (2.0 * self.beta**2))
        return (Z + G @ self._W) * self._scale + self._center
