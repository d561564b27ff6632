"""Cross-topology barycentric vertex mapping.

A map ties every target vertex to one source triangle: the target position is
reproduced as a convex combination of that triangle's three vertices. Applying
the map to any deformed source geometry re-samples it on the target topology;
the operation is linear in the source coordinates (equivalently a sparse
column-stochastic matrix).

Building the map is a closest-point-on-mesh query accelerated by a uniform
grid over the source bounding box. The grid search returns exactly the result
of the exhaustive scan (including the lowest-face-index tie rule): rings of
cells are expanded until no unexplored cell could hold a face at the current
best distance or closer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .bundle import load_bundle, save_bundle
from .geometry import Mesh, atomic_write_text, bbox_diagonal

__all__ = [
    "MappingError",
    "BarycentricMap",
    "build_map",
    "apply_map",
    "map_matrix",
    "save_map",
    "load_map",
    "closest_points_exhaustive",
]

_WEIGHT_TOL = 1e-12


class MappingError(Exception):
    """Map construction or application failure."""


@dataclass
class BarycentricMap:
    """Per-target-vertex triples of source vertex indices and convex weights.

    indices: (N,3) int64 source vertex ids (one source face per row);
    weights: (N,3) float64, each row in [0,1] and summing to 1.
    """

    source_vertex_count: int
    target_vertex_count: int
    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        wts = np.asarray(self.weights, dtype=np.float64)
        n = self.target_vertex_count
        if idx.shape != (n, 3) or wts.shape != (n, 3):
            raise MappingError(
                f"map arrays must be ({n},3); got {idx.shape} and {wts.shape}"
            )
        if idx.size and (idx.min() < 0 or idx.max() >= self.source_vertex_count):
            raise MappingError("map references a source vertex out of range")
        if np.any(wts < -_WEIGHT_TOL) or np.any(wts > 1.0 + _WEIGHT_TOL):
            raise MappingError("barycentric weights outside [0,1]")
        if np.any(np.abs(wts.sum(axis=1) - 1.0) > _WEIGHT_TOL):
            raise MappingError("barycentric weights must sum to 1")
        self.indices = idx
        self.weights = wts


# ---------------------------------------------------------------------------
# grid-accelerated closest point


def closest_points_exhaustive(points: np.ndarray, source: Mesh):
    """Brute-force nearest triangle per point via the active kernel backend."""
    tris = source.vertices[source.faces]
    return kernels.active.closest_points(np.ascontiguousarray(points, dtype=np.float64),
                                         np.ascontiguousarray(tris))


class _TriangleGrid:
    """Uniform grid over the source bbox; faces registered in every cell their
    bounding box overlaps."""

    def __init__(self, source: Mesh, target_cells: int = 40):
        v = source.vertices
        self.tris = np.ascontiguousarray(v[source.faces])
        lo = v.min(axis=0)
        hi = v.max(axis=0)
        span = hi - lo
        span = np.where(span > 0, span, 1.0)
        n_faces = source.n_faces
        # aim for a handful of faces per occupied cell
        res = int(np.clip(round(n_faces ** (1.0 / 3.0)), 1, target_cells))
        self.res = np.array([res, res, res], dtype=np.int64)
        self.lo = lo
        self.cell = span / self.res

        fmin = self.tris.min(axis=1)
        fmax = self.tris.max(axis=1)
        cmin = self._cell_of(fmin)
        cmax = self._cell_of(fmax)

        buckets: dict = {}
        for f in range(n_faces):
            x0, y0, z0 = cmin[f]
            x1, y1, z1 = cmax[f]
            for cx in range(x0, x1 + 1):
                for cy in range(y0, y1 + 1):
                    for cz in range(z0, z1 + 1):
                        buckets.setdefault((cx, cy, cz), []).append(f)
        self.buckets = {k: np.array(sorted(v), dtype=np.int64) for k, v in buckets.items()}

    def _cell_of(self, pts: np.ndarray) -> np.ndarray:
        c = np.floor((pts - self.lo) / self.cell).astype(np.int64)
        return np.clip(c, 0, self.res - 1)

    def _ring_cells(self, center, r):
        """Cells at Chebyshev distance exactly r from center, clipped to grid."""
        cx, cy, cz = center
        res = self.res
        cells = []
        if r == 0:
            cells.append((cx, cy, cz))
        else:
            for dx in range(-r, r + 1):
                for dy in range(-r, r + 1):
                    for dz in range(-r, r + 1):
                        if max(abs(dx), abs(dy), abs(dz)) != r:
                            continue
                        c = (cx + dx, cy + dy, cz + dz)
                        if 0 <= c[0] < res[0] and 0 <= c[1] < res[1] and 0 <= c[2] < res[2]:
                            cells.append(c)
        return cells

    def _explored_bound(self, point, center, r):
        """Distance from point to the boundary of the explored cell box; any
        face unseen after exploring rings 0..r lies entirely beyond it."""
        lo_box = self.lo + (np.maximum(center - r, 0)) * self.cell
        hi_box = self.lo + (np.minimum(center + r + 1, self.res)) * self.cell
        margin = np.minimum(point - lo_box, hi_box - point)
        covered_lo = center - r <= 0
        covered_hi = center + r + 1 >= self.res
        # a side of the box flush with the grid boundary is unbounded: no face beyond it
        margin = np.where(covered_lo & covered_hi, np.inf,
                          np.where(covered_lo, hi_box - point,
                                   np.where(covered_hi, point - lo_box, margin)))
        return float(max(np.min(margin), 0.0))

    def query(self, points: np.ndarray):
        points = np.ascontiguousarray(points, dtype=np.float64)
        n = points.shape[0]
        faces = np.empty(n, dtype=np.int64)
        bary = np.empty((n, 3), dtype=np.float64)
        sq = np.empty(n, dtype=np.float64)
        max_ring = int(self.res.max())
        backend = kernels.active
        for i in range(n):
            p = points[i]
            center = self._cell_of(p[None, :])[0]
            best_sq = np.inf
            best_face = -1
            best_bary = None
            seen: set = set()
            for r in range(0, max_ring + 1):
                cand: list = []
                for cell in self._ring_cells(tuple(center), r):
                    fs = self.buckets.get(cell)
                    if fs is not None:
                        cand.append(fs)
                if cand:
                    ids = np.unique(np.concatenate(cand))
                    if seen:
                        ids = ids[~np.isin(ids, list(seen))] if len(seen) < 8192 else ids[
                            ~np.isin(ids, np.fromiter(seen, dtype=np.int64))
                        ]
                    if ids.size:
                        seen.update(ids.tolist())
                        offs = np.array([0, ids.size], dtype=np.int64)
                        f, b, d = backend.closest_points_subset(p[None, :], self.tris, ids, offs)
                        if d[0] < best_sq or (d[0] == best_sq and f[0] < best_face):
                            best_sq = float(d[0])
                            best_face = int(f[0])
                            best_bary = b[0]
                bound = self._explored_bound(p, center, r)
                if best_face >= 0 and bound * bound > best_sq:
                    break
            if best_face < 0:
                raise MappingError("grid query found no faces (empty source?)")
            faces[i] = best_face
            bary[i] = best_bary
            sq[i] = best_sq
        return faces, bary, sq


def build_map(
    source: Mesh,
    target: Mesh,
    max_distance: float | None = None,
    accelerate: bool = True,
) -> BarycentricMap:
    """Tie each target vertex to its closest source triangle.

    max_distance bounds the allowed point-to-surface distance (default 5% of
    the source bbox diagonal); offending target vertices are reported in the
    error. Ties on distance resolve to the lowest source face index.
    """
    if source.n_faces == 0:
        raise MappingError("source mesh has no faces")
    if max_distance is None:
        max_distance = 0.05 * bbox_diagonal(source)

    if accelerate and source.n_faces > 64:
        grid = _TriangleGrid(source)
        faces, bary, sq = grid.query(target.vertices)
    else:
        faces, bary, sq = closest_points_exhaustive(target.vertices, source)

    dist = np.sqrt(sq)
    bad = np.flatnonzero(dist > max_distance)
    if bad.size:
        shown = ", ".join(str(int(i)) for i in bad[:10])
        more = "" if bad.size <= 10 else f" (+{bad.size - 10} more)"
        raise MappingError(
            f"{bad.size} target vertices farther than {max_distance:.6g} from the "
            f"source surface: [{shown}]{more}"
        )

    indices = source.faces[faces]
    weights = np.clip(bary, 0.0, 1.0)
    weights = weights / weights.sum(axis=1, keepdims=True)
    return BarycentricMap(
        source_vertex_count=source.n_vertices,
        target_vertex_count=target.n_vertices,
        indices=indices,
        weights=weights,
    )


def apply_map(bmap: BarycentricMap, source_vertices: np.ndarray) -> np.ndarray:
    """Re-sample source-topology geometry (M,3) onto the target topology (N,3).

    Linear in the input: apply_map(a*X + b*Y) == a*apply_map(X) + b*apply_map(Y).
    """
    v = np.asarray(source_vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape != (bmap.source_vertex_count, 3):
        raise MappingError(
            f"expected source geometry ({bmap.source_vertex_count},3), got {v.shape}"
        )
    gathered = v[bmap.indices]  # (N,3,3)
    return np.einsum("nkd,nk->nd", gathered, bmap.weights)


def map_matrix(bmap: BarycentricMap) -> np.ndarray:
    """Dense (M,N) matrix form: columns hold the weight triple of each target
    vertex, so resampled == source_coords.T @ M per coordinate. Columns sum to 1."""
    m = np.zeros((bmap.source_vertex_count, bmap.target_vertex_count))
    for k in range(3):
        np.add.at(m, (bmap.indices[:, k], np.arange(bmap.target_vertex_count)), bmap.weights[:, k])
    return m


def save_map(path: str, bmap: BarycentricMap) -> None:
    """Binary bundle (.npz, bit-exact reload) or text table (.txt):
    header `M N`, then rows `i q r l aq ar al`."""
    if path.endswith(".txt"):
        lines = [f"{bmap.source_vertex_count} {bmap.target_vertex_count}"]
        for i in range(bmap.target_vertex_count):
            q, r, l = bmap.indices[i]
            aq, ar, al = bmap.weights[i]
            lines.append(f"{i} {q} {r} {l} {aq:.17g} {ar:.17g} {al:.17g}")
        atomic_write_text(path, "\n".join(lines) + "\n")
    else:
        save_bundle(
            path,
            {"indices": bmap.indices, "weights": bmap.weights},
            {
                "kind": "barycentric_map",
                "source_vertex_count": bmap.source_vertex_count,
                "target_vertex_count": bmap.target_vertex_count,
            },
        )


def load_map(path: str) -> BarycentricMap:
    if path.endswith(".txt"):
        with open(path) as fh:
            header = fh.readline().split()
            m, n = int(header[0]), int(header[1])
            indices = np.empty((n, 3), dtype=np.int64)
            weights = np.empty((n, 3), dtype=np.float64)
            for lineno, raw in enumerate(fh, start=2):
                parts = raw.split()
                if not parts:
                    continue
                if len(parts) != 7:
                    raise MappingError(f"{path}: malformed map row at line {lineno}")
                i = int(parts[0])
                indices[i] = [int(parts[1]), int(parts[2]), int(parts[3])]
                weights[i] = [float(parts[4]), float(parts[5]), float(parts[6])]
        return BarycentricMap(m, n, indices, weights)
    arrays, meta = load_bundle(path)
    if meta.get("kind") != "barycentric_map":
        raise MappingError(f"{path}: not a barycentric map bundle")
    return BarycentricMap(
        int(meta["source_vertex_count"]),
        int(meta["target_vertex_count"]),
        arrays["indices"],
        arrays["weights"],
    )
