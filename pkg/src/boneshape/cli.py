"""Command line entry point: ``boneshape <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data or validation error
(including failed trend checks under ``--strict``), 4 numerical failure.
Outputs go to ``--out`` or, when omitted, to ``$BONESHAPE_OUTPUT_DIR``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ArgumentError, BoneShapeError, NumericalError
from .mesh import LandmarkSet, TriMesh, load_landmarks, load_mesh, save_mesh
from .mesh.io import atomic_write_bytes

logger = logging.getLogger("boneshape")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ENV = "BONESHAPE_OUTPUT_DIR"

SPEC_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["ring_distance", "landmark_count", "displacement", "skin_simulated", "skin_real"]},
        "grid": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "n_landmarks": {"type": "integer", "minimum": 1},
        "iterations": {"type": "integer", "minimum": 1},
        "noise_sigma": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "offsets": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
        "corridor_mm": {"type": "number", "exclusiveMinimum": 0},
        "cohort": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"train": {"type": "string"}, "test": {"type": "string"}},
        },
        "synthetic": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_train": {"type": "integer", "minimum": 2},
                "n_test": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "spacing": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "config": {"type": "object"},
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ helpers

def _resolve_config(args):
    from .experiments import config

    overrides = dict(config.parse_override(s) for s in (args.set or []))
    return config.resolve(overrides), overrides


def _out_path(value, default_name):
    if value:
        return Path(value)
    base = os.environ.get(OUTPUT_ENV)
    if not base:
        raise UsageError(f"--out not given and ${OUTPUT_ENV} is not set")
    return Path(base) / default_name


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n").encode("utf-8")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _require_file(path, what):
    if path is None or not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _write_log(path, started, extra=None):
    """Timestamps live only in this sidecar so the main artefacts stay reproducible."""
    log = {"started_unix": started, "finished_unix": time.time(), "duration_s": time.time() - started,
           "version": __version__}
    log.update(extra or {})
    atomic_write_bytes(Path(str(path) + ".log.json"), _dump(log))


# ------------------------------------------------------------------ synth

def cmd_synth(args):
    from .experiments.cohort import save_cohort
    from .experiments.synthetic import generate_synthetic_cohort

    if args.n < 2:
        raise UsageError("--n must be at least 2")
    started = time.time()
    cfg, overrides = _resolve_config(args)
    spacing = args.spacing if args.spacing is not None else cfg["synthetic.spacing"]
    out = _out_path(args.out, "cohort")
    femurs = generate_synthetic_cohort(args.n, seed=args.seed, spacing=spacing, with_skin=args.skin,
                                       skin_spacing=cfg["synthetic.skin_spacing"])
    resolved = {"n": args.n, "seed": args.seed, "spacing": spacing, "skin": bool(args.skin), "overrides": overrides}
    save_cohort(out, femurs, seed=args.seed, config=resolved)
    _write_log(out / "manifest.json", started)
    print(f"wrote {args.n} shapes to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ build-ssm

def cmd_build_ssm(args):
    from .experiments.cohort import load_cohort
    from .experiments.pipeline import build_model
    from .experiments import config
    from .mesh import CANONICAL_LANDMARKS
    from .ssm import save_model

    started = time.time()
    cfg, overrides = _resolve_config(args)
    if args.reference_vertices is not None:
        cfg["reference.vertices"] = args.reference_vertices
    members = load_cohort(args.cohort, with_skin=False)
    if len(members) < 2:
        raise ArgumentError(f"need at least 2 shapes, found {len(members)}")
    for m in members:
        m.landmarks.require(CANONICAL_LANDMARKS, f"shape {m.shape_id}")
    out = _out_path(args.out, "model.bssm")
    out.parent.mkdir(parents=True, exist_ok=True)

    def progress(i, fit):
        logger.info("fitted %s: rmse %.3f mm, %d iterations", members[i].shape_id, fit.fitting_rmse, fit.iterations)

    bundle = build_model([m.mesh for m in members], [m.landmarks for m in members],
                         reference_vertices=cfg["reference.vertices"], cpd=config.cpd_params(cfg),
                         progress=progress, cfg=cfg)
    stats = bundle.fitting_rmse_stats()
    provenance = {
        **bundle.model.metadata,
        "config": cfg, "overrides": overrides, "seed": args.seed,
        "training_shapes": [m.shape_id for m in members],
        "reference_shape": members[bundle.reference_index].shape_id,
        "consensus_landmarks": bundle.consensus.to_json_dict(),
        "fitting_rmse_mm": stats,
    }
    save_model(bundle.model, out, provenance=provenance)
    save_mesh(bundle.reference, out.with_suffix(".reference.ply"))
    diag = {
        "shapes": [{"id": m.shape_id, "fitting_rmse_mm": f.fitting_rmse, "iterations": f.iterations,
                    "converged": f.converged} for m, f in zip(members, bundle.fits)],
        "table": {"mean_mm": stats["mean_mm"], "std_mm": stats["std_mm"]},
        "n_modes": bundle.model.n_modes,
        "config": cfg, "seed": args.seed,
    }
    atomic_write_bytes(out.with_suffix(".diagnostics.json"), _dump(diag))
    _write_log(out, started)
    print("Fitting error in the training set (mm)")
    print(f"  Mean                {stats['mean_mm']:.2f}")
    print(f"  Standard deviation  {stats['std_mm']:.2f}")
    print(f"model: {bundle.model.n_vertices} vertices, {bundle.model.n_modes} modes -> {out}")
    return EXIT_OK


# ------------------------------------------------------------------ reconstruct

def _load_bundle(model_path, reference_path=None):
    from .experiments.pipeline import bundle_from_model
    from .ssm import load_model

    model = load_model(_require_file(model_path, "model file"))
    reference = None
    ref = Path(reference_path) if reference_path else Path(model_path).with_suffix(".reference.ply")
    if reference_path or ref.exists():
        reference = load_mesh(_require_file(ref, "reference mesh"))
    return bundle_from_model(model, reference)


def _parse_offsets(text):
    from .experiments.config import SKIN_OFFSETS_MM

    if text is None:
        return None
    if text == "default":
        return dict(SKIN_OFFSETS_MM)
    p = Path(text)
    raw = json.loads(p.read_text()) if p.is_file() else json.loads(text)
    if not isinstance(raw, dict) or not all(isinstance(v, (int, float)) for v in raw.values()):
        raise ArgumentError("--skin-offsets must be 'default', a JSON object or a JSON file of name -> mm")
    return {str(k): float(v) for k, v in raw.items()}


def cmd_reconstruct(args):
    from .alignment import RigidTransform, procrustes_from_landmarks
    from .experiments.pipeline import landmark_pairs, pick_count, predict, prepare_test_case, simulate_skin_landmarks

    started = time.time()
    cfg, overrides = _resolve_config(args)
    sigma = args.noise_sigma if args.noise_sigma is not None else cfg["posterior.noise_sigma"]
    bundle = _load_bundle(args.model, args.reference)
    model = bundle.model
    out = _out_path(args.out, "reconstruction")
    test_mesh = load_mesh(_require_file(args.test_mesh, "test mesh")) if args.test_mesh else None
    offsets = _parse_offsets(args.skin_offsets)
    info = {"config": cfg, "overrides": overrides, "seed": args.seed, "noise_sigma": sigma}

    if args.count is not None:
        if test_mesh is None or args.landmarks is None:
            raise UsageError("--count needs --test-mesh and --landmarks (for alignment and clipping)")
        lms = load_landmarks(args.landmarks)
        case = prepare_test_case(bundle, test_mesh, lms, "test", cfg=cfg)
        picked = pick_count(case, args.count, np.random.default_rng(args.seed))
        idx, pts = landmark_pairs(case, picked)
        frame = RigidTransform.from_json_dict(case.metadata["alignment"])
        info["landmark_source"] = f"{args.count} farthest-point landmarks on the test distal part"
    else:
        if args.landmarks is None and args.skin_landmarks is None:
            raise UsageError("give --landmarks, --skin-landmarks or --count")
        src = load_landmarks(args.skin_landmarks or args.landmarks)
        bony = load_landmarks(args.landmarks) if args.landmarks else src
        names = [n for n in src if n in model.landmarks]
        if not names:
            raise ArgumentError("none of the given landmarks is known to the model")
        frame_names = [n for n in bony if n in model.landmarks]
        mean_lm = LandmarkSet({n: model.landmark_point(n) for n in frame_names})
        if len(frame_names) >= 3:
            frame = procrustes_from_landmarks(bony.subset(frame_names), mean_lm)
        else:
            frame = RigidTransform.identity()
        if offsets is not None:
            if test_mesh is None:
                raise UsageError("--skin-offsets needs --test-mesh for the surface normals")
            src = simulate_skin_landmarks(test_mesh, src, offsets)
            info["skin_offsets_mm"] = offsets
        src = frame.apply_landmarks(src)
        idx = np.array([model.landmarks[n] for n in names], dtype=np.int64)
        pts = src.array(names)
        info["landmark_source"] = "skin file" if args.skin_landmarks else (
            "simulated skin" if offsets is not None else "bony file")
        info["landmarks_used"] = names

    pred = predict(model, idx, pts, sigma, hip_seed=args.seed, cfg=cfg)
    back = frame.inverse()
    shape = back.apply_mesh(pred.mesh)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(shape, out / "prediction.ply")
    result = dict(info)
    result["frame"] = frame.to_json_dict()
    if pred.axis is not None:
        result["mechanical_axis"] = {
            "notch_point_mm": back.apply(pred.axis.notch_point).tolist(),
            "hip_center_mm": back.apply(pred.axis.hip_center).tolist(),
            "direction": (back.rotation @ pred.axis.direction).tolist(),
            "hip_fit": pred.hip.to_json_dict() if pred.hip is not None else None,
        }
    if args.ground_truth:
        gt = load_mesh(_require_file(args.ground_truth, "ground-truth mesh"))
        result["evaluation"] = _evaluate(bundle, shape, gt, args, cfg, pred, frame)
    atomic_write_bytes(out / "result.json", _dump(result))
    _write_log(out / "result.json", started)
    if "evaluation" in result:
        ev = result["evaluation"]
        print(f"proximal RMSE {ev['rmse_mm']:.4f} mm, axis deviation {ev['axis_deviation_deg']:.3f} deg")
    print(f"wrote {out / 'prediction.ply'}")
    return EXIT_OK


def _evaluate(bundle, shape, gt, args, cfg, pred, frame):
    from .clinical import axis_angle_deviation, clip_proximal, surface_rmse
    from .experiments.pipeline import Prediction, prepare_test_case, score

    model = bundle.model
    if gt.n_vertices == model.n_vertices and np.array_equal(gt.faces, model.faces):
        fovea_idx = model.landmarks.get("fovea")
        fovea = gt.vertices[fovea_idx]
        proximal, _ = clip_proximal(gt, fovea, cfg["clip.fraction"])
        rmse = surface_rmse(proximal.on(shape), proximal)
        out = {"rmse_mm": rmse, "scored_vertices": len(proximal), "correspondence": "by index"}
        if "intercondylar_notch" in model.landmarks and pred.axis is not None:
            from .clinical import femoral_head_region, hip_center, mechanical_axis

            region = femoral_head_region(gt, fovea, cfg["clip.fraction"], cfg["head.radius_factor"],
                                         cfg["head.seed_fraction"])
            hip = hip_center(region, min(cfg["head.points"], len(region)), seed=args.seed)
            gt_axis = mechanical_axis(gt.vertices[model.landmarks["intercondylar_notch"]], hip)
            axis = mechanical_axis(frame.inverse().apply(pred.axis.notch_point),
                                   frame.inverse().apply(pred.axis.hip_center))
            out["axis_deviation_deg"] = axis_angle_deviation(axis, gt_axis)
        return out
    if not args.ground_truth_landmarks:
        raise UsageError("a ground truth without model topology needs --ground-truth-landmarks")
    from .alignment import RigidTransform
    from .clinical import mechanical_axis

    gl = load_landmarks(args.ground_truth_landmarks)
    case = prepare_test_case(bundle, gt, gl, "ground_truth", cfg=cfg)
    # prediction (model frame of the input) -> input frame -> model frame of the ground truth
    to_gt = RigidTransform.from_json_dict(case.metadata["alignment"]).compose(frame.inverse())
    axis = None
    if pred.axis is not None:
        axis = mechanical_axis(to_gt.apply(pred.axis.notch_point), to_gt.apply(pred.axis.hip_center))
    rmse, dev = score(case, Prediction(to_gt.apply_mesh(pred.mesh), pred.field, axis, pred.hip))
    return {"rmse_mm": rmse, "axis_deviation_deg": dev, "scored_vertices": len(case.scoring_region),
            "correspondence": "reference fitted to ground truth"}


# ------------------------------------------------------------------ experiment

def _validate_spec(raw):
    import jsonschema

    validator = jsonschema.Draft202012Validator(SPEC_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        pointer = "/" + "/".join(str(p) for p in e.absolute_path)
        raise SpecError(f"invalid experiment spec at {pointer}: {e.message}")


class SpecError(BoneShapeError, ValueError):
    pass


def _build_study(raw, args, cfg):
    from .experiments.cohort import load_cohort
    from .experiments.pipeline import build_model, prepare_test_case
    from .experiments.runners import Study
    from .experiments.synthetic import generate_synthetic_cohort
    from .experiments import config

    need_skin = raw["kind"] == "skin_real"
    if args.model:
        bundle = _load_bundle(args.model, args.reference)
        test_dir = args.cohort or (raw.get("cohort") or {}).get("test")
        if not test_dir:
            raise UsageError("--model needs a test cohort (--cohort or spec cohort.test)")
        members = load_cohort(test_dir, with_skin=need_skin)
    elif "cohort" in raw:
        train = load_cohort(raw["cohort"]["train"], with_skin=False)
        members = load_cohort(raw["cohort"]["test"], with_skin=need_skin)
        bundle = build_model([m.mesh for m in train], [m.landmarks for m in train], cfg=cfg,
                             cpd=config.cpd_params(cfg))
    else:
        syn = raw.get("synthetic", {})
        n_train = syn.get("n_train", cfg["synthetic.n_train"])
        n_test = syn.get("n_test", cfg["synthetic.n_test"])
        femurs = generate_synthetic_cohort(n_train + n_test, seed=syn.get("seed", raw.get("seed", cfg["seed"])),
                                           spacing=syn.get("spacing", cfg["synthetic.spacing"]), with_skin=need_skin,
                                           skin_spacing=cfg["synthetic.skin_spacing"])
        train, test = femurs[:n_train], femurs[n_train:]
        bundle = build_model([f.mesh for f in train], [f.landmarks for f in train], cfg=cfg,
                             cpd=config.cpd_params(cfg))
        from .experiments.cohort import CohortMember

        members = [CohortMember(f"test_{i:03d}", f.mesh, f.landmarks, f.hip_center, f.skin) for i, f in enumerate(test)]
    cases = tuple(prepare_test_case(bundle, m.mesh, m.landmarks, m.shape_id, hip=m.hip_center, skin=m.skin, cfg=cfg)
                  for m in members)
    return Study(bundle, cases, cfg)


def cmd_experiment(args):
    from .experiments import config
    from .experiments.checks import run_checks
    from .experiments.report import emit_report
    from .experiments.runners import ExperimentSpec, run_experiment

    started = time.time()
    spec_path = _require_file(args.spec, "experiment spec")
    try:
        raw = json.loads(spec_path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"invalid experiment spec at line {exc.lineno}: {exc.msg}") from exc
    _validate_spec(raw)
    cfg_over = dict(raw.get("config", {}))
    cfg_over.update(dict(config.parse_override(s) for s in (args.set or [])))
    cfg = config.resolve(cfg_over)
    fields = {k: raw[k] for k in ("kind", "grid", "n_landmarks", "iterations", "noise_sigma", "seed", "offsets",
                                  "corridor_mm") if k in raw}
    spec = ExperimentSpec(**fields)
    study = _build_study(raw, args, cfg)
    results = run_experiment(spec, study)
    checks = run_checks(spec.kind, results)
    out = _out_path(args.out, f"{spec.kind}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    metadata = {"spec": spec.to_json_dict(), "config": cfg, "overrides": cfg_over, "seed": spec.seed,
                "checks": [c.to_json_dict() for c in checks],
                "landmark_jitter": "target (test-side) point displaced",
                "ring_boundaries": "[10k%, 10(k+1)%) of the fovea-notch distance, k = setting"}
    emit_report(results, out, metadata=metadata)
    _write_log(out, started)
    for c in checks:
        print(c.line())
    print(f"wrote {len(results)} trials to {out}")
    if args.strict and not all(c.passed for c in checks):
        print("strict mode: trend checks failed", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ------------------------------------------------------------------ inspect-model

def cmd_inspect_model(args):
    from .ssm import load_model

    model = load_model(_require_file(args.model, "model file"))
    total = float(model.variances.sum()) if model.n_modes else 0.0
    print(f"N (vertices): {model.n_vertices}")
    print(f"M (modes):    {model.n_modes}")
    print(f"faces:        {len(model.faces)}")
    print("variances (mm^2):")
    for i, v in enumerate(model.variances, start=1):
        print(f"  {i:3d}  {v:14.6f}  {v / total:7.2%}")
    if args.json:
        print(json.dumps({"n_vertices": model.n_vertices, "n_modes": model.n_modes,
                          "variances": model.variances.tolist(), "landmarks": model.landmarks}, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="boneshape", description="Statistical shape modelling and proximal femur reconstruction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a documented default (repeatable)")

    s = sub.add_parser("synth", help="generate a synthetic femur cohort")
    s.add_argument("--n", type=int, required=True, help="number of shapes (>= 2)")
    s.add_argument("--out", help="output directory")
    s.add_argument("--spacing", type=float, help="marching-cubes grid spacing in mm")
    s.add_argument("--skin", action="store_true", help="also write skin surfaces")
    common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-ssm", help="align a cohort, fit correspondence and build the shape model")
    s.add_argument("--cohort", required=True, help="cohort directory")
    s.add_argument("--out", help="model file to write")
    s.add_argument("--reference-vertices", type=int, help="vertex count of the decimated reference")
    common(s)
    s.set_defaults(func=cmd_build_ssm)

    s = sub.add_parser("reconstruct", help="predict a full femur from landmarks")
    s.add_argument("--model", required=True)
    s.add_argument("--reference", help="reference mesh (default: <model>.reference.ply if present, else the mean)")
    s.add_argument("--test-mesh", help="partial or complete test bone")
    s.add_argument("--landmarks", help="bony landmark JSON")
    s.add_argument("--skin-landmarks", help="skin landmark JSON (paired by name with model landmarks)")
    s.add_argument("--skin-offsets", help="'default' or JSON name -> mm; shifts bony landmarks along normals")
    s.add_argument("--count", type=int, help="farthest-point landmarks picked on the fitted distal part")
    s.add_argument("--noise-sigma", type=float, help="observation noise in mm")
    s.add_argument("--ground-truth", help="complete ground-truth mesh for evaluation")
    s.add_argument("--ground-truth-landmarks", help="landmarks of the ground truth (needed unless it has model topology)")
    s.add_argument("--out", help="output directory")
    common(s)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("experiment", help="run a landmark or skin experiment from a JSON spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--model", help="use this model instead of building one")
    s.add_argument("--reference", help="reference mesh for --model")
    s.add_argument("--cohort", help="test cohort directory (with --model)")
    s.add_argument("--out", help="report path (.csv or .json)")
    s.add_argument("--strict", action="store_true", help="exit non-zero when a trend check fails")
    common(s, seed=False)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("inspect-model", help="print vertex count, mode count and variances")
    s.add_argument("model")
    s.add_argument("--json", action="store_true", help="also print a JSON summary")
    s.set_defaults(func=cmd_inspect_model)
    for sp in sub.choices.values():
        sp.set_defaults(usage=sp.format_usage)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"boneshape {args.command}: {exc}", file=sys.stderr)
        print(args.usage(), end="", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"boneshape {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArgumentError as exc:
        print(f"boneshape {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BoneShapeError, OSError, ValueError) as exc:
        print(f"boneshape {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
