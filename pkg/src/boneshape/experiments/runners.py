"""Landmark-configuration and skin-landmark experiments over a prepared test cohort.

Each trial draws its random numbers from streams derived from
``(seed, shape index, iteration)`` plus a stream tag and, where the
randomness belongs to the setting itself (displacement directions), the
setting index. Landmark picks and the hip-center subsample therefore do not
change across the settings of one experiment, which makes the settings
paired comparisons, and no result depends on execution order. Ring picks
are the exception: each ring is a different region, so its stream also
carries the setting index.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..exceptions import ArgumentError, EmptyRegionError
from ..mesh import SKIN_LANDMARKS, LandmarkSet, nearest_vertices, vertex_normals
from . import config
from .pipeline import (
    ModelBundle,
    TestCase,
    baseline_rmse,
    displace,
    landmark_pairs,
    pick_count,
    pick_ring,
    predict,
    score,
    simulate_skin_landmarks,
    skin_ray_points,
)

logger = logging.getLogger(__name__)

KINDS = ("ring_distance", "landmark_count", "displacement", "skin_simulated", "skin_real")

_PICK, _DISPLACE, _HIP = 0, 1, 2


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    grid: tuple = None
    n_landmarks: int = None
    iterations: int = None
    noise_sigma: float = None
    seed: int = 0
    offsets: dict = None
    corridor_mm: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        d = config.DEFAULTS
        grid = tuple(config.GRIDS[self.kind] if self.grid is None else self.grid)
        if not grid:
            raise ArgumentError("grid must not be empty")
        n = self.n_landmarks
        if n is None:
            n = d["experiment.ring_landmarks"] if self.kind == "ring_distance" else (
                len(SKIN_LANDMARKS) if self.kind.startswith("skin") else d["experiment.n_landmarks"])
        iterations = d["experiment.iterations"] if self.iterations is None else self.iterations
        if int(iterations) != iterations or iterations < 1:
            raise ArgumentError(f"iterations must be a positive integer, got {iterations}")
        if int(n) != n or n < 1:
            raise ArgumentError(f"n_landmarks must be a positive integer, got {n}")
        sigma = d["posterior.noise_sigma"] if self.noise_sigma is None else float(self.noise_sigma)
        if not sigma > 0:
            raise ArgumentError(f"noise_sigma must be > 0, got {sigma}")
        if self.kind == "ring_distance" and any(int(g) != g or g < 1 for g in grid):
            raise ArgumentError("ring_distance grid entries must be positive integer steps")
        if self.kind == "landmark_count" and any(int(g) != g or g < 1 for g in grid):
            raise ArgumentError("landmark_count grid entries must be positive integers")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "n_landmarks", int(n))
        object.__setattr__(self, "iterations", int(iterations))
        object.__setattr__(self, "noise_sigma", sigma)
        object.__setattr__(self, "offsets", dict(config.SKIN_OFFSETS_MM if self.offsets is None else self.offsets))
        object.__setattr__(self, "corridor_mm", float(d["skin.corridor_mm"] if self.corridor_mm is None else self.corridor_mm))

    def to_json_dict(self):
        out = asdict(self)
        out["grid"] = list(self.grid)
        return out


@dataclass(frozen=True)
class TrialResult:
    kind: str
    setting: float
    shape_id: str
    iteration: int
    n_landmarks: int
    rmse_mm: float
    axis_deviation_deg: float
    converged: bool
    seed: int
    baseline_rmse_mm: float = float("nan")
    flag: str = ""

    @property
    def skipped(self) -> bool:
        return self.flag.startswith("skipped")

    def __post_init__(self):
        if not self.skipped:
            if not self.rmse_mm >= 0:
                raise ArgumentError(f"rmse must be >= 0, got {self.rmse_mm}")
            if not 0 <= self.axis_deviation_deg <= 180:
                raise ArgumentError(f"axis deviation out of [0, 180]: {self.axis_deviation_deg}")


@dataclass(frozen=True, eq=False)
class Study:
    """A model and its prepared test cases; the input to every runner."""

    bundle: ModelBundle
    cases: tuple
    cfg: dict = field(default_factory=lambda: dict(config.DEFAULTS))

    def baselines(self):
        return [baseline_rmse(self.bundle.model, c) for c in self.cases]


def trial_rng(seed, shape_index, iteration, stream, setting_index=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(shape_index), int(iteration), stream,
                                                         int(setting_index)]))


def _hip_seed(seed, shape_index, iteration):
    return np.random.SeedSequence([int(seed), int(shape_index), int(iteration), _HIP])


def _trial(spec, study, kind, setting, si, case, it, n, indices, points, baseline):
    pred = predict(study.bundle.model, indices, points, spec.noise_sigma,
                   hip_seed=_hip_seed(spec.seed, si, it), cfg=study.cfg)
    rmse, dev = score(case, pred)
    return TrialResult(kind, setting, case.shape_id, it, n, rmse, dev, case.converged, spec.seed, baseline)


def _flagged(spec, kind, setting, case, it, n, baseline, reason):
    return TrialResult(kind, setting, case.shape_id, it, n, float("nan"), float("nan"), case.converged,
                       spec.seed, baseline, flag=reason)


def _check_kind(spec, *kinds):
    if spec.kind not in kinds:
        raise ArgumentError(f"spec kind {spec.kind!r} cannot run here (expected {kinds})")


def run_ring_distance_experiment(spec: ExperimentSpec, study: Study):
    """Landmarks in rings [10k %, 10(k+1) %) of the length indicator around the fovea."""
    _check_kind(spec, "ring_distance")
    out = []
    baselines = study.baselines()
    for si, case in enumerate(study.cases):
        for it in range(spec.iterations):
            for step in spec.grid:
                setting = int(step)
                try:
                    picked = pick_ring(case, setting, spec.n_landmarks, trial_rng(spec.seed, si, it, _PICK, setting))
                except EmptyRegionError as exc:
                    out.append(_flagged(spec, spec.kind, setting, case, it, spec.n_landmarks, baselines[si],
                                        f"skipped: {exc}"))
                    continue
                idx, pts = landmark_pairs(case, picked)
                out.append(_trial(spec, study, spec.kind, setting, si, case, it, spec.n_landmarks, idx, pts,
                                  baselines[si]))
    return _ordered(out, spec)


def run_landmark_count_experiment(spec: ExperimentSpec, study: Study):
    """Farthest-point landmarks on the whole distal part, for each count in the grid."""
    _check_kind(spec, "landmark_count")
    out = []
    baselines = study.baselines()
    for si, case in enumerate(study.cases):
        for it in range(spec.iterations):
            for n in spec.grid:
                n = int(n)
                if n > len(case.picking_region):
                    out.append(_flagged(spec, spec.kind, n, case, it, n, baselines[si],
                                        f"skipped: {n} exceeds {len(case.picking_region)} distal vertices"))
                    continue
                picked = pick_count(case, n, trial_rng(spec.seed, si, it, _PICK))
                idx, pts = landmark_pairs(case, picked)
                out.append(_trial(spec, study, spec.kind, n, si, case, it, n, idx, pts, baselines[si]))
    return _ordered(out, spec)


def run_displacement_experiment(spec: ExperimentSpec, study: Study):
    """Fixed-size landmark sets whose targets are moved by |d| mm in random directions.

    The target (test-side) point of each pair is displaced, emulating
    digitisation error on the patient.
    """
    _check_kind(spec, "displacement")
    out = []
    baselines = study.baselines()
    for si, case in enumerate(study.cases):
        for it in range(spec.iterations):
            picked = pick_count(case, spec.n_landmarks, trial_rng(spec.seed, si, it, _PICK))
            idx, pts = landmark_pairs(case, picked)
            for k, d in enumerate(spec.grid):
                moved = displace(pts, float(d), trial_rng(spec.seed, si, it, _DISPLACE, k))
                out.append(_trial(spec, study, spec.kind, float(d), si, case, it, spec.n_landmarks, idx, moved,
                                  baselines[si]))
    return _ordered(out, spec)


def _skin_indices(study, case):
    lm = study.bundle.model.landmarks
    missing = [n for n in SKIN_LANDMARKS if n not in lm]
    if missing:
        raise ArgumentError(f"model has no landmark index for {missing}")
    return np.array([lm[n] for n in SKIN_LANDMARKS], dtype=np.int64)


def run_skin_experiment(spec: ExperimentSpec, study: Study, mode=None):
    """Three palpable landmarks, bony versus skin-shifted targets.

    ``skin_simulated``: every setting ``s`` scales the offset table (so
    ``0`` reproduces the bony run and ``1`` applies the full offsets).
    ``skin_real``: targets are skin vertices hit by the bone-normal ray.
    The bony run is always emitted as kind ``skin_bony`` for pairing.
    """
    kind = spec.kind if mode is None else f"skin_{mode}"
    _check_kind(spec, "skin_simulated", "skin_real")
    if kind != spec.kind:
        raise ArgumentError(f"mode {mode!r} does not match spec kind {spec.kind!r}")
    out = []
    baselines = study.baselines()
    names = list(SKIN_LANDMARKS)
    for si, case in enumerate(study.cases):
        picked = _skin_indices(study, case)
        idx, bony = landmark_pairs(case, picked)
        normals = vertex_normals(case.mesh)
        src = case.available[nearest_vertices(case.mesh.vertices[case.available], case.truth.mesh.vertices[idx])]
        if kind == "skin_real":
            if case.skin is None:
                raise ArgumentError(f"test shape {case.shape_id} has no skin mesh")
            real, hit = skin_ray_points(bony, normals[src], case.skin, spec.corridor_mm)
            if not hit.all():
                logger.warning("shape %s: skin ray missed for %d landmark(s)", case.shape_id, int((~hit).sum()))
        for it in range(spec.iterations):
            out.append(_trial(spec, study, "skin_bony", 0.0, si, case, it, len(names), idx, bony, baselines[si]))
            for setting in spec.grid:
                if kind == "skin_simulated":
                    offs = {n: float(setting) * spec.offsets.get(n, 0.0) for n in names}
                    moved = simulate_skin_landmarks(case.mesh, LandmarkSet(zip(names, bony)), offs, normals)
                    pts = moved.array(names)
                    flag = ""
                else:
                    pts = real
                    flag = "" if hit.all() else "ray missed skin; nearest skin vertex used"
                res = _trial(spec, study, kind, float(setting), si, case, it, len(names), idx, pts, baselines[si])
                if flag:
                    res = replace(res, flag=flag)
                out.append(res)
    return _ordered(out, spec, extra=("skin_bony",))


def _ordered(results, spec, extra=()):
    """Order by kind, then grid position; the stable sort keeps shape then iteration order."""
    kinds = list(extra) + [spec.kind]
    pos = {float(g): i for i, g in enumerate(spec.grid)}
    return sorted(results, key=lambda t: (kinds.index(t.kind), pos.get(float(t.setting), -1)))


RUNNERS = {
    "ring_distance": run_ring_distance_experiment,
    "landmark_count": run_landmark_count_experiment,
    "displacement": run_displacement_experiment,
    "skin_simulated": run_skin_experiment,
    "skin_real": run_skin_experiment,
}


def run_experiment(spec: ExperimentSpec, study: Study):
    return RUNNERS[spec.kind](spec, study)
