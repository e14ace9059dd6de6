"""Compiled inner loops for chamfer-type distances.

Nearest-neighbour minima are sorted before being summed sequentially, so a
value does not depend on the order of points in either cloud, and batched
kernels reproduce the single-pair results bit for bit.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def chamfer_pair(a, b, ia, ib):
    """Chamfer value of one pair; fills nearest-neighbour indices ``ia``, ``ib``."""
    return chamfer_pair_into(a, b, ia, ib, np.empty(a.shape[0]), np.empty(b.shape[0]))


@njit(cache=True)
def chamfer_pair_into(a, b, ia, ib, rowmin, colmin):
    na, nb = a.shape[0], b.shape[0]
    colmin[:] = np.inf
    for i in range(na):
        ax, ay, az = a[i, 0], a[i, 1], a[i, 2]
        best = np.inf
        arg = 0
        for j in range(nb):
            dx = ax - b[j, 0]
            dy = ay - b[j, 1]
            dz = az - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                arg = j
            if d < colmin[j]:
                colmin[j] = d
                ib[j] = i
        rowmin[i] = best
        ia[i] = arg
    return 0.5 * (sorted_sum(rowmin) / na) + 0.5 * (sorted_sum(colmin) / nb)


@njit(cache=True)
def sorted_sum(values):
    """Sum in ascending order; sorts ``values`` in place."""
    values.sort()
    total = 0.0
    for v in values:
        total += v
    return total


@njit(cache=True)
def chamfer_batch(a, b):
    """a: (M, na, 3), b: (M, nb, 3) -> values (M,), ia (M, na), ib (M, nb)."""
    M = a.shape[0]
    out = np.empty(M)
    ia = np.zeros((M, a.shape[1]), dtype=np.int64)
    ib = np.zeros((M, b.shape[1]), dtype=np.int64)
    for r in range(M):
        out[r] = chamfer_pair(a[r], b[r], ia[r], ib[r])
    return out, ia, ib


@njit(cache=True)
def chamfer_cross(A, B):
    """All-pairs chamfer between two sets of clouds: (S, n, 3) x (T, m, 3) -> (S, T)."""
    S, T = A.shape[0], B.shape[0]
    out = np.empty((S, T))
    ia = np.zeros(A.shape[1], dtype=np.int64)
    ib = np.zeros(B.shape[1], dtype=np.int64)
    rowmin = np.empty(A.shape[1])
    colmin = np.empty(B.shape[1])
    for s in range(S):
        for t in range(T):
            out[s, t] = chamfer_pair_into(A[s], B[t], ia, ib, rowmin, colmin)
    return out


@njit(cache=True)
def kernel_patch_chamfer(pts, nbr, kernels):
    """pts (B, n, 3), nbr (B, n, k), kernels (L, m, 3).

    Returns chamfer distances (B, n, L) between each kernel and each offset
    patch, plus nearest indices i_m (B, n, L, m) and i_k (B, n, L, k).
    """
    B, n, k = nbr.shape
    L, m = kernels.shape[0], kernels.shape[1]
    out = np.empty((B, n, L))
    i_m = np.zeros((B, n, L, m), dtype=np.int64)
    i_k = np.zeros((B, n, L, k), dtype=np.int64)
    patch = np.empty((k, 3))
    colmin = np.empty(k)
    rowmin = np.empty(m)
    for b in range(B):
        for i in range(n):
            for q in range(k):
                j = nbr[b, i, q]
                for c in range(3):
                    patch[q, c] = pts[b, j, c] - pts[b, i, c]
            for l in range(L):
                # inlined chamfer_pair_into(kernels[l], patch, ...), same arithmetic order
                for q in range(k):
                    colmin[q] = np.inf
                for p in range(m):
                    ax, ay, az = kernels[l, p, 0], kernels[l, p, 1], kernels[l, p, 2]
                    best = np.inf
                    arg = 0
                    for q in range(k):
                        dx = ax - patch[q, 0]
                        dy = ay - patch[q, 1]
                        dz = az - patch[q, 2]
                        d = dx * dx + dy * dy + dz * dz
                        if d < best:
                            best = d
                            arg = q
                        if d < colmin[q]:
                            colmin[q] = d
                            i_k[b, i, l, q] = p
                    rowmin[p] = best
                    i_m[b, i, l, p] = arg
                out[b, i, l] = 0.5 * (sorted_sum(rowmin) / m) + 0.5 * (sorted_sum(colmin) / k)
    return out, i_m, i_k


@njit(cache=True)
def kernel_correlation_backward(pts, nbr, kernels, scale, val, i_m, i_k, g, want_points):
    B, n, k = nbr.shape
    L, m = kernels.shape[0], kernels.shape[1]
    dK = np.zeros(kernels.shape)
    dP = np.zeros(pts.shape)
    patch = np.empty((k, 3))
    dpatch = np.empty((k, 3))
    wm = 0.5 / m
    wk = 0.5 / k
    for b in range(B):
        for i in range(n):
            for q in range(k):
                j = nbr[b, i, q]
                for c in range(3):
                    patch[q, c] = pts[b, j, c] - pts[b, i, c]
                    dpatch[q, c] = 0.0
            for l in range(L):
                gd = -g[b, i, l] * val[b, i, l] / scale
                if gd == 0.0:
                    continue
                for p in range(m):
                    q = i_m[b, i, l, p]
                    for c in range(3):
                        t = 2.0 * (kernels[l, p, c] - patch[q, c]) * (wm * gd)
                        dK[l, p, c] += t
                        dpatch[q, c] -= t
                for q in range(k):
                    p = i_k[b, i, l, q]
                    for c in range(3):
                        t = 2.0 * (patch[q, c] - kernels[l, p, c]) * (wk * gd)
                        dpatch[q, c] += t
                        dK[l, p, c] -= t
            if want_points:
                for q in range(k):
                    j = nbr[b, i, q]
                    for c in range(3):
                        dP[b, j, c] += dpatch[q, c]
                        dP[b, i, c] -= dpatch[q, c]
    return dK, dP
