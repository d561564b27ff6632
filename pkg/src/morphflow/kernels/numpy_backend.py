"""Vectorized numpy implementation of the closest-point-on-mesh kernels.

Same contract as the compiled extension `_closest_point`:

- `closest_points(points, tris)`: for every query point, the nearest triangle
  over all faces, its barycentric coordinates and squared distance. Ties on
  distance resolve to the lowest face index.
- `closest_points_subset(points, tris, cand, offsets)`: the same query
  restricted to per-point candidate lists in CSR layout; candidate lists must
  be non-empty and are expected in ascending face order so the tie rule
  matches the exhaustive scan.

The point-triangle projection classifies the closest feature (vertex, edge,
interior) from the edge-plane dot products and returns exact barycentric
weights for that feature.
"""

from __future__ import annotations

import numpy as np

__all__ = ["closest_points", "closest_points_subset", "closest_on_pairs"]

NAME = "numpy"


def closest_on_pairs(points: np.ndarray, tris: np.ndarray):
    """Pairwise closest point: points (K,3) against triangles (K,3,3).

    Returns (bary (K,3), sqdist (K,)).
    """
    p = np.asarray(points, dtype=np.float64)
    t = np.asarray(tris, dtype=np.float64)
    a, b, c = t[:, 0, :], t[:, 1, :], t[:, 2, :]

    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)

    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)

    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = p.shape[0]
    v = np.zeros(n)
    w = np.zeros(n)
    done = np.zeros(n, dtype=bool)

    def claim(mask, vv, ww):
        m = mask & ~done
        if np.any(m):
            v[m] = vv[m] if isinstance(vv, np.ndarray) else vv
            w[m] = ww[m] if isinstance(ww, np.ndarray) else ww
            done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        # vertex regions
        claim((d1 <= 0.0) & (d2 <= 0.0), 0.0, 0.0)
        claim((d3 >= 0.0) & (d4 <= d3), 1.0, 0.0)
        claim((d6 >= 0.0) & (d5 <= d6), 0.0, 1.0)
        # edge ab
        t_ab = d1 / (d1 - d3)
        claim((vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0), t_ab, 0.0)
        # edge ac
        t_ac = d2 / (d2 - d6)
        claim((vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0), 0.0, t_ac)
        # edge bc
        num = d4 - d3
        t_bc = num / (num + (d5 - d6))
        claim((va <= 0.0) & (num >= 0.0) & ((d5 - d6) >= 0.0), 1.0 - t_bc, t_bc)
        # interior
        denom = va + vb + vc
        claim(~done, vb / denom, vc / denom)

    u = 1.0 - v - w
    closest = a + v[:, None] * ab + w[:, None] * ac
    diff = closest - p
    sq = np.einsum("ij,ij->i", diff, diff)
    bary = np.stack([u, v, w], axis=1)
    return bary, sq


def closest_points(points: np.ndarray, tris: np.ndarray, chunk: int = 256):
    """Exhaustive nearest triangle per point. Returns (face, bary, sqdist)."""
    points = np.asarray(points, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.float64)
    n_pts = points.shape[0]
    n_tri = tris.shape[0]
    if n_tri == 0:
        raise ValueError("empty triangle set")

    face = np.empty(n_pts, dtype=np.int64)
    bary = np.empty((n_pts, 3), dtype=np.float64)
    sq = np.empty(n_pts, dtype=np.float64)

    for start in range(0, n_pts, chunk):
        stop = min(start + chunk, n_pts)
        m = stop - start
        pts_rep = np.repeat(points[start:stop], n_tri, axis=0)
        tri_rep = np.tile(tris, (m, 1, 1))
        b, d = closest_on_pairs(pts_rep, tri_rep)
        d = d.reshape(m, n_tri)
        # argmin returns the first (lowest-index) face on ties
        best = np.argmin(d, axis=1)
        rows = np.arange(m)
        face[start:stop] = best
        sq[start:stop] = d[rows, best]
        bary[start:stop] = b.reshape(m, n_tri, 3)[rows, best]
    return face, bary, sq


def closest_points_subset(points, tris, cand, offsets):
    """Nearest triangle per point over CSR candidate lists.

    cand: int64 (K,) face indices, offsets: int64 (P+1,). Every segment must
    be non-empty. Returns (face, bary, sqdist).
    """
    points = np.asarray(points, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.float64)
    cand = np.asarray(cand, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    n_pts = points.shape[0]
    counts = np.diff(offsets)
    if np.any(counts <= 0):
        raise ValueError("every candidate segment must be non-empty")

    pts_rep = np.repeat(points, counts, axis=0)
    b, d = closest_on_pairs(pts_rep, tris[cand])

    seg_min = np.minimum.reduceat(d, offsets[:-1])
    hit = d <= np.repeat(seg_min, counts)
    pos = np.where(hit, np.arange(d.shape[0]), d.shape[0])
    first = np.minimum.reduceat(pos, offsets[:-1])

    face = cand[first]
    bary = b[first]
    sq = d[first]
    assert face.shape[0] == n_pts
    return face, bary, sq
