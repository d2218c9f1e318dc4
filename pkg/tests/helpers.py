"""Small analytic meshes shared by the tests."""
import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import ConvexHull

from boneshape.mesh import TriMesh


def fibonacci_sphere(n, radius=1.0, center=(0.0, 0.0, 0.0)):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    p = np.c_[np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)]
    return radius * p + np.asarray(center, dtype=float)


def outward(vertices, faces, center):
    v = vertices[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = np.einsum("ij,ij->i", n, v.mean(axis=1) - center) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, ::-1]
    return faces


def sphere_mesh(n=500, radius=1.0, center=(0.0, 0.0, 0.0)):
    v = fibonacci_sphere(n, radius, center)
    faces = outward(v, ConvexHull(v).simplices.astype(np.int64), np.asarray(center, dtype=float))
    return TriMesh(v, faces)


def tetrahedron():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriMesh(v, f)


def flat_square(n=6):
    x, y = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    v = np.c_[x.ravel(), y.ravel(), np.zeros(n * n)]
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            faces += [[a, b, c], [a, c, d]]
    return TriMesh(v, np.array(faces))


def open_cylinder(n_around=48, n_rings=10, radius=1.0, height=2.0):
    t = 2 * np.pi * np.arange(n_around) / n_around
    z = np.linspace(0, height, n_rings)
    v = np.array([[radius * np.cos(a), radius * np.sin(a), h] for h in z for a in t])
    faces = []
    for r in range(n_rings - 1):
        for k in range(n_around):
            a, b = r * n_around + k, r * n_around + (k + 1) % n_around
            c, d = a + n_around, b + n_around
            faces += [[a, b, d], [a, d, c]]
    return TriMesh(v, np.array(faces))


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle_rotation(axis, degrees):
    axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    a = np.radians(degrees)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * K @ K


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, all (n, 3); Ericson's region test."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = np.einsum("ij,ij->i", ab, ap), np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3, d4 = np.einsum("ij,ij->i", ab, bp), np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5, d6 = np.einsum("ij,ij->i", ab, cp), np.einsum("ij,ij->i", ac, cp)
    va, vb, vc = d3 * d6 - d5 * d4, d5 * d2 - d1 * d6, d1 * d4 - d3 * d2
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = vb / denom
        w = vc / denom
    out = a + ab * v[:, None] + ac * w[:, None]
    cases = [
        ((d1 <= 0) & (d2 <= 0), a),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d6 >= 0) & (d5 <= d6), c),
    ]
    with np.errstate(divide="ignore", invalid="ignore"):
        edge_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(edge_ab[:, None], a + ab * (d1 / (d1 - d3))[:, None], out)
        edge_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(edge_ac[:, None], a + ac * (d2 / (d2 - d6))[:, None], out)
        edge_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out = np.where(edge_bc[:, None], b + (c - b) * t[:, None], out)
    for mask, q in cases:
        out = np.where(mask[:, None], q, out)
    return out


def point_to_mesh_distance(points, mesh, k=24):
    """Distance from each point to the surface of ``mesh`` (closest of the k nearest faces by centroid)."""
    from scipy.spatial import cKDTree

    tri = mesh.vertices[mesh.faces]
    _, cand = cKDTree(tri.mean(axis=1)).query(points, k=k)
    best = np.full(len(points), np.inf)
    for j in range(k):
        t = tri[cand[:, j]]
        q = closest_point_on_triangles(points, t[:, 0], t[:, 1], t[:, 2])
        best = np.minimum(best, np.linalg.norm(points - q, axis=1))
    return best


def hausdorff(a, b):
    """Symmetric Hausdorff distance between two meshes, sampled at vertices and face centroids."""
    def samples(m):
        return np.vstack([m.vertices, m.vertices[m.faces].mean(axis=1)])

    return max(point_to_mesh_distance(samples(a), b).max(), point_to_mesh_distance(samples(b), a).max())


CENTER, RADIUS = np.array([1.0, 2.0, 3.0]), 5.0


def sphere_points(n=30, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return CENTER + RADIUS * d + rng.normal(scale=noise, size=(n, 3)) if noise else CENTER + RADIUS * d


def lsq_oracle(P):
    """Geometric sphere fit by scipy's Levenberg-Marquardt least squares, started at the centroid."""
    c0 = P.mean(axis=0)
    x0 = np.r_[c0, np.linalg.norm(P - c0, axis=1).mean()]
    res = least_squares(lambda x: np.linalg.norm(P - x[:3], axis=1) - x[3], x0,
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, method="lm")
    return res.x[:3], res.x[3]


def make_cohort(n=14, n_vertices=200, seed=0, radius=50.0):
    """Smoothly deformed spheres in correspondence (mm scale)."""
    rng = np.random.default_rng(seed)
    base = sphere_mesh(n_vertices, radius)
    u = base.vertices / radius
    out = []
    for _ in range(n):
        a = rng.normal(size=(4, 3)) * 3.0
        # translation, axis-wise stretch and a smooth wave
        disp = a[0] + u * a[1] + np.sin(2 * u @ a[2])[:, None] * a[3]
        out.append(base.with_vertices(base.vertices + disp))
    return out
