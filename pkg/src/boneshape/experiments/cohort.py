"""Cohort directories: meshes, landmark files and a checksummed manifest.

Layout::

    manifest.json                  format, version, seed, config, shapes[]
    <id>.ply                       bone surface
    <id>.landmarks.json            named landmarks (mm)
    <id>.skin.ply                  optional skin surface

Each ``shapes[]`` entry names its files, optional ground truth
(``hip_center``, generator parameters) and the SHA-256 of every file.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..exceptions import FormatError, ValidationError
from ..mesh import LandmarkSet, TriMesh, load_landmarks, load_mesh, save_landmarks, save_mesh
from ..mesh.io import atomic_write_bytes

MANIFEST = "manifest.json"
COHORT_FORMAT = "boneshape-cohort"
COHORT_VERSION = 1


@dataclass(frozen=True, eq=False)
class CohortMember:
    shape_id: str
    mesh: TriMesh
    landmarks: LandmarkSet
    hip_center: np.ndarray | None = None
    skin: TriMesh | None = None


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dumps_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def save_cohort(directory, femurs, seed=None, config=None, prefix="shape"):
    """Write synthetic femurs (or :class:`CohortMember`) to ``directory``; returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, f in enumerate(femurs):
        sid = getattr(f, "shape_id", None) or f"{prefix}_{i:03d}"
        files = {"mesh": f"{sid}.ply", "landmarks": f"{sid}.landmarks.json"}
        save_mesh(f.mesh, directory / files["mesh"])
        save_landmarks(f.landmarks, directory / files["landmarks"])
        if getattr(f, "skin", None) is not None:
            files["skin"] = f"{sid}.skin.ply"
            save_mesh(f.skin, directory / files["skin"])
        entry = {"id": sid, **files}
        if getattr(f, "hip_center", None) is not None:
            entry["hip_center"] = [float(c) for c in f.hip_center]
        if hasattr(f, "params"):
            entry["params"] = asdict(f.params)
        entry["sha256"] = {k: sha256_file(directory / v) for k, v in files.items()}
        entries.append(entry)
    manifest = {"format": COHORT_FORMAT, "version": COHORT_VERSION, "seed": seed, "config": config or {},
                "shapes": entries}
    atomic_write_bytes(directory / MANIFEST, dumps_json(manifest))
    return manifest


def _discover(directory: Path):
    entries = []
    for mesh in sorted(directory.glob("*.ply")) + sorted(directory.glob("*.obj")):
        if mesh.name.endswith(".skin.ply"):
            continue
        sid = mesh.stem
        lm = directory / f"{sid}.landmarks.json"
        if not lm.exists():
            raise ValidationError(f"shape {sid}: missing landmark file {lm.name}")
        entry = {"id": sid, "mesh": mesh.name, "landmarks": lm.name}
        skin = directory / f"{sid}.skin.ply"
        if skin.exists():
            entry["skin"] = skin.name
        entries.append(entry)
    if not entries:
        raise ValidationError(f"no meshes found in {directory}")
    return entries


def load_cohort(directory, verify=True, with_skin=True):
    """Read a cohort directory (manifest if present, else ``*.ply`` + ``*.landmarks.json`` pairs)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"cohort directory {directory} does not exist")
    path = directory / MANIFEST
    if path.exists():
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        if manifest.get("format") != COHORT_FORMAT or manifest.get("version") != COHORT_VERSION:
            raise FormatError(f"{path}: not a version-{COHORT_VERSION} cohort manifest")
        entries = manifest["shapes"]
    else:
        entries = _discover(directory)
    members = []
    for e in entries:
        sid = e["id"]
        if verify and "sha256" in e:
            for key, digest in e["sha256"].items():
                if sha256_file(directory / e[key]) != digest:
                    raise ValidationError(f"shape {sid}: checksum mismatch for {e[key]}")
        try:
            mesh = load_mesh(directory / e["mesh"])
            landmarks = load_landmarks(directory / e["landmarks"])
        except (FormatError, ValidationError) as exc:
            raise type(exc)(f"shape {sid}: {exc}") from exc
        skin = load_mesh(directory / e["skin"]) if with_skin and "skin" in e else None
        hip = np.asarray(e["hip_center"], dtype=np.float64) if "hip_center" in e else None
        members.append(CohortMember(sid, mesh, landmarks, hip, skin))
    return members
