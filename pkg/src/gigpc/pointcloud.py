"""Point clouds as ``(n, 3)`` float64 arrays, plus the distances and samplers
that operate on them.

Differentiable entry points (:func:`chamfer_distance`,
:func:`kernel_correlation`) accept either arrays or :class:`Tensor` objects
and return tensors; everything else is plain numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .autodiff import Tensor, _result, tensor

FAMILIES = ("sphere", "ellipsoid", "box", "torus")


def as_cloud(points, name: str = "cloud") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name}: expected shape (n, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name}: empty point cloud")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: non-finite coordinates")
    return arr


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("mesh: face index out of range")

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# ---------------------------------------------------------------- chamfer

def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances ``[..., na, nb]`` for ``a[..., na, 3]``, ``b[..., nb, 3]``."""
    # coordinate planes accumulated in x, y, z order; every caller shares this rounding
    d = a[..., :, None, 0] - b[..., None, :, 0]
    D = d * d
    for c in (1, 2):
        d = a[..., :, None, c] - b[..., None, :, c]
        d *= d
        D += d
    return D


def _chamfer_parts(a: np.ndarray, b: np.ndarray):
    lead = a.shape[:-2]
    af = np.ascontiguousarray(a.reshape(-1, a.shape[-2], 3))
    bf = np.ascontiguousarray(b.reshape(-1, b.shape[-2], 3))
    value, ia, ib = _k.chamfer_batch(af, bf)
    return (value.reshape(lead), ia.reshape(*lead, a.shape[-2]),
            ib.reshape(*lead, b.shape[-2]))


def chamfer_matrix(A, B) -> np.ndarray:
    """Chamfer distance between every cloud of ``A`` (S, n, 3) and of ``B`` (T, m, 3)."""
    return _k.chamfer_cross(np.ascontiguousarray(A, dtype=np.float64),
                            np.ascontiguousarray(B, dtype=np.float64))


def chamfer(a, b) -> float | np.ndarray:
    """Non-differentiable chamfer distance; batched over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("chamfer: empty cloud")
    value, _, _ = _chamfer_parts(a, b)
    return float(value) if value.ndim == 0 else value


def chamfer_distance(A, B) -> Tensor:
    """Symmetric chamfer distance on squared distances.

    ``A[..., na, 3]`` and ``B[..., nb, 3]`` share their leading (batch) axes;
    the result has exactly those axes. Gradients flow through the selected
    nearest-neighbour pairs, the argmin being held constant.
    """
    A, B = tensor(A), tensor(B)
    if A.ndim < 2 or A.shape[-1] != 3 or B.shape[-1] != 3:
        raise ValueError(f"chamfer_distance: bad shapes {A.shape}, {B.shape}")
    if A.shape[:-2] != B.shape[:-2]:
        raise ValueError(f"chamfer_distance: batch shapes differ {A.shape} vs {B.shape}")
    if A.shape[-2] == 0 or B.shape[-2] == 0:
        raise ValueError("chamfer_distance: empty cloud")
    a, b = A.data, B.data
    value, ia, ib = _chamfer_parts(a, b)
    lead = a.shape[:-2]
    na, nb = a.shape[-2], b.shape[-2]

    def fn(g):
        M = int(np.prod(lead, dtype=np.int64))
        af, bf = a.reshape(M, na, 3), b.reshape(M, nb, 3)
        iaf, ibf = ia.reshape(M, na), ib.reshape(M, nb)
        gf = np.asarray(g).reshape(M)
        rows = np.arange(M)[:, None]
        ga = np.zeros_like(af)
        gb = np.zeros_like(bf)
        t1 = 2.0 * (af - bf[rows, iaf]) * (0.5 / na * gf)[:, None, None]
        ga += t1
        np.add.at(gb, (np.broadcast_to(rows, iaf.shape), iaf), -t1)
        t2 = 2.0 * (bf - af[rows, ibf]) * (0.5 / nb * gf)[:, None, None]
        gb += t2
        np.add.at(ga, (np.broadcast_to(rows, ibf.shape), ibf), -t2)
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return _result(value, (A, B), fn, "chamfer")


# ---------------------------------------------------------------- neighbourhoods

def _smallest_k(D: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k smallest entries, ordered by (value, index)."""
    n_rows, n_cols = D.shape
    kth = np.partition(D, k - 1, axis=1)[:, k - 1:k]
    below = D < kth
    tied = D == kth
    need = k - below.sum(axis=1, keepdims=True)
    take = below | (tied & (np.cumsum(tied, axis=1) <= need))
    cols = np.nonzero(take)[1].reshape(n_rows, k)
    vals = np.take_along_axis(D, cols, axis=1)
    order = np.lexsort((cols, vals), axis=1)
    return np.take_along_axis(cols, order, axis=1)


def knn(points, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other points, nearest first, ties by index."""
    P = as_cloud(points)
    n = len(P)
    if not 1 <= k < n:
        raise ValueError(f"knn: need 1 <= k < n, got k={k}, n={n}")
    D = squared_distances(P, P)
    np.fill_diagonal(D, np.inf)
    return _smallest_k(D, k)


def kernel_correlation(P, neighbors: np.ndarray, kernels, sigma: float) -> Tensor:
    """Gaussian-of-chamfer similarity between kernel point sets and local patches.

    P: (n, 3) or (b, n, 3); neighbors: matching (n, k) or (b, n, k) indices;
    kernels: (L, m, 3). Patches are neighbour offsets ``x_j - x_i``.
    Returns (n, L) or (b, n, L) values in (0, 1].
    """
    if sigma <= 0:
        raise ValueError(f"kernel_correlation: sigma must be positive, got {sigma}")
    P, K = tensor(P), tensor(kernels)
    batched = P.ndim == 3
    pts = np.ascontiguousarray(P.data if batched else P.data[None])
    nbr = np.ascontiguousarray(neighbors if batched else np.asarray(neighbors)[None], dtype=np.int64)
    if nbr.ndim != 3 or nbr.shape[:2] != pts.shape[:2]:
        raise ValueError(f"kernel_correlation: neighbors {nbr.shape} do not match points {pts.shape}")
    kd = np.ascontiguousarray(K.data)
    scale = 2.0 * sigma ** 2
    dist, i_m, i_k = _k.kernel_patch_chamfer(pts, nbr, kd)
    out = np.exp(-dist / scale)

    def fn(g):
        g = np.ascontiguousarray(g if batched else g[None])
        dK, dP = _k.kernel_correlation_backward(pts, nbr, kd, scale, out, i_m, i_k, g,
                                                P.requires_grad)
        if not P.requires_grad:
            return None, dK
        return (dP if batched else dP[0]), dK

    return _result(out if batched else out[0], (P, K), fn, "kernel_correlation")


# ---------------------------------------------------------------- sampling and shaping

def sample_mesh_surface(mesh: Mesh, n: int, seed) -> np.ndarray:
    """Area-weighted uniform samples on a triangle mesh."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("sample_mesh_surface: mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    u, v, w = 1.0 - r1, r1 * (1.0 - r2), r1 * r2
    f = mesh.faces[tri]
    V = mesh.vertices
    return u[:, None] * V[f[:, 0]] + v[:, None] * V[f[:, 1]] + w[:, None] * V[f[:, 2]]


def normalize_unit_sphere(points):
    """Center on the centroid and divide by the largest radius.

    Returns ``(normalized, center, scale)`` with ``points == normalized * scale + center``.
    """
    P = as_cloud(points)
    center = P.mean(axis=0)
    shifted = P - center
    scale = float(np.sqrt((shifted * shifted).sum(axis=1)).max())
    if scale == 0.0:
        scale = 1.0
    return shifted / scale, center, scale


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def synthetic_shape(family: str, n: int, seed, **params) -> np.ndarray:
    """Points uniformly distributed (by area) over an analytic surface.

    sphere: radius; ellipsoid: axes=(a, b, c); box: half_extents=(x, y, z);
    torus: R, r.
    """
    if n < 1:
        raise ValueError("synthetic_shape: n must be positive")
    rng = np.random.default_rng(seed)
    if family == "sphere":
        radius = float(params.get("radius", 1.0))
        if radius <= 0:
            raise ValueError("sphere radius must be positive")
        return radius * _unit_vectors(rng, n)
    if family == "ellipsoid":
        a, b, c = (float(x) for x in params.get("axes", (1.0, 0.7, 0.5)))
        if min(a, b, c) <= 0:
            raise ValueError("ellipsoid axes must be positive")
        # area-uniform by rejection on the sphere parameterisation
        gmax = max(a * b, b * c, a * c)
        out = np.empty((0, 3))
        while len(out) < n:
            u = _unit_vectors(rng, 2 * n)
            g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
            keep = rng.random(2 * n) < g / gmax
            out = np.vstack([out, u[keep] * (a, b, c)])
        return out[:n]
    if family == "box":
        h = np.array(params.get("half_extents", (1.0, 1.0, 1.0)), dtype=np.float64)
        if np.any(h <= 0):
            raise ValueError("box half extents must be positive")
        face_area = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
        face = rng.choice(6, size=n, p=face_area / face_area.sum())
        pts = (rng.random((n, 3)) * 2.0 - 1.0) * h
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * h[axis]
        return pts
    if family == "torus":
        R, r = float(params.get("R", 1.0)), float(params.get("r", 0.3))
        if r <= 0 or R <= 0 or r >= R:
            raise ValueError("torus needs 0 < r < R")
        out = np.empty((0, 3))
        while len(out) < n:
            theta = rng.random(2 * n) * 2 * math.pi
            phi = rng.random(2 * n) * 2 * math.pi
            keep = rng.random(2 * n) < (R + r * np.cos(phi)) / (R + r)
            theta, phi = theta[keep], phi[keep]
            ring = R + r * np.cos(phi)
            out = np.vstack([out, np.stack([ring * np.cos(theta), ring * np.sin(theta),
                                            r * np.sin(phi)], axis=1)])
        return out[:n]
    raise ValueError(f"unknown shape family {family!r}; choose from {FAMILIES}")


def crop_halfspace(points, direction, keep_fraction: float, min_points: int = 1) -> np.ndarray:
    """Keep the points furthest along ``direction`` (original order preserved)."""
    P = as_cloud(points)
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if len(P) < min_points:
        raise ValueError(f"crop_halfspace: cloud has {len(P)} points, fewer than {min_points}")
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    count = max(int(round(keep_fraction * len(P))), min_points, 1)
    order = np.argsort(-(P @ d), kind="stable")[:count]
    return P[np.sort(order)]
