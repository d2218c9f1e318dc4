"""The single table of documented defaults.

Every knob the pipeline, the experiment runners and the CLI expose is
listed here; overrides given on the command line or in a spec file are
merged over this table and echoed into output metadata.
"""
from __future__ import annotations

import copy

from ..exceptions import ArgumentError

SKIN_OFFSETS_MM = {"greater_trochanter": 43.0, "medial_epicondyle": 14.0, "lateral_epicondyle": 12.0}

DEFAULTS = {
    # non-rigid correspondence
    "cpd.beta": 2.0,
    "cpd.lambda": 3.0,
    "cpd.w": 0.1,
    "cpd.max_iterations": 150,
    "cpd.tolerance": 1e-6,
    # model building
    "reference.vertices": 5000,
    "reference.uniformity": 0.1,
    # posterior conditioning
    "posterior.noise_sigma": 1.0,
    # clinical geometry
    "clip.fraction": 0.10,
    "head.points": 30,
    "head.radius_factor": 1.2,
    "head.seed_fraction": 0.5,
    # experiments
    "experiment.iterations": 10,
    "experiment.n_landmarks": 5,
    "experiment.ring_landmarks": 3,
    "skin.corridor_mm": 5.0,
    # synthetic cohort
    "synthetic.n_train": 30,
    "synthetic.n_test": 10,
    "synthetic.spacing": 3.5,
    "synthetic.skin_spacing": 6.0,
    "seed": 0,
}

GRIDS = {
    "ring_distance": [1, 2, 3, 4, 5, 6, 7, 8],
    "landmark_count": [5, 55, 105, 155, 205],
    "displacement": [-5.0, -3.0, -1.0, 0.0, 1.0, 3.0, 5.0],
    "skin_simulated": [0.0, 1.0],
    "skin_real": [1.0],
}


def resolve(overrides=None) -> dict:
    """Defaults with ``overrides`` applied; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in (overrides or {}).items():
        if key not in cfg:
            raise ArgumentError(f"unknown configuration key {key!r}")
        default = DEFAULTS[key]
        try:
            cfg[key] = type(default)(value) if not isinstance(default, bool) else bool(value)
        except (TypeError, ValueError):
            raise ArgumentError(f"configuration key {key!r} expects {type(default).__name__}, got {value!r}") from None
    return cfg


def cpd_params(cfg):
    from ..registration import CpdParams

    return CpdParams(
        beta=cfg["cpd.beta"],
        lambda_=cfg["cpd.lambda"],
        w=cfg["cpd.w"],
        max_iterations=cfg["cpd.max_iterations"],
        tolerance=cfg["cpd.tolerance"],
    )


def parse_override(text: str):
    """``key=value`` -> (key, value) with the value's type taken from the defaults."""
    if "=" not in text:
        raise ArgumentError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    if key not in DEFAULTS:
        raise ArgumentError(f"unknown configuration key {key!r}")
    return key, value.strip()
