"""Mesh and landmark data structures, file I/O and point-selection utilities."""
from .decimate import decimate
from .geometry import (
    face_normals,
    farthest_point_downsample,
    mean_surface_distance,
    nearest_vertex,
    nearest_vertices,
    select_ring_region,
    vertex_normals,
)
from .io import load_landmarks, load_mesh, save_landmarks, save_mesh
from .types import CANONICAL_LANDMARKS, SKIN_LANDMARKS, LandmarkSet, TriMesh, VertexRegion

__all__ = [
    "CANONICAL_LANDMARKS",
    "SKIN_LANDMARKS",
    "LandmarkSet",
    "TriMesh",
    "VertexRegion",
    "decimate",
    "face_normals",
    "farthest_point_downsample",
    "load_landmarks",
    "load_mesh",
    "mean_surface_distance",
    "nearest_vertex",
    "nearest_vertices",
    "save_landmarks",
    "save_mesh",
    "select_ring_region",
    "vertex_normals",
]
