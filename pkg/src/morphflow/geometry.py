"""Triangle-mesh types, ASCII OBJ/PLY IO, rigid alignment, and plane symmetry ops.

Meshes are immutable after construction: coordinate and face arrays are marked
read-only. Text output writes 9 significant digits; formats are ASCII only
(binary PLY is rejected with a clear error).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MeshError",
    "Mesh",
    "SymmetryMap",
    "RigidTransform",
    "load_mesh",
    "save_mesh",
    "load_landmarks",
    "save_landmarks",
    "load_symmetry_map",
    "save_symmetry_map",
    "procrustes_align",
    "mirror_mesh",
    "symmetrize_mesh",
    "mesh_edges",
    "vertex_adjacency",
    "face_normals",
    "bbox_diagonal",
    "atomic_write_text",
]

_FMT = "%.9g"


class MeshError(Exception):
    """Malformed mesh data or unreadable mesh file."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass
class Mesh:
    """Triangle mesh: vertices (N,3) float64, faces (F,3) int64 vertex indices.

    Optional landmark vertex indices ride along. Faces must reference valid
    vertices and contain three distinct indices each.
    """

    vertices: np.ndarray
    faces: np.ndarray
    landmarks: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (N,3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (F,3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinate")
        n = v.shape[0]
        if f.size and (f.min() < 0 or f.max() >= n):
            raise MeshError("face references a vertex index out of range")
        same = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if np.any(same):
            bad = int(np.flatnonzero(same)[0])
            raise MeshError(f"degenerate face {bad}: repeated vertex index")
        self.vertices = _freeze(v)
        self.faces = _freeze(f)
        if self.landmarks is not None:
            lm = np.asarray(self.landmarks, dtype=np.int64)
            if lm.ndim != 1:
                raise MeshError("landmarks must be a 1-D index array")
            if lm.size and (lm.min() < 0 or lm.max() >= n):
                raise MeshError("landmark index out of range")
            self.landmarks = _freeze(lm)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same topology, new coordinates."""
        return Mesh(vertices, self.faces, self.landmarks)


@dataclass
class SymmetryMap:
    """Vertex pairing under a reflection plane.

    pairs: (P,2) index pairs (i mirrors to j); midline: (Q,) self-paired
    indices. Together they must cover every vertex exactly once and form an
    involution. The plane is given by a unit normal and offset
    (points x on the plane satisfy normal . x = offset).
    """

    n_vertices: int
    pairs: np.ndarray
    midline: np.ndarray
    plane_normal: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    plane_offset: float = 0.0

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        midline = np.asarray(self.midline, dtype=np.int64).reshape(-1)
        normal = np.asarray(self.plane_normal, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(normal))
        if not norm > 0:
            raise MeshError("symmetry plane normal must be nonzero")
        normal = normal / norm
        seen = np.zeros(self.n_vertices, dtype=np.int64)
        if pairs.size:
            if pairs.min() < 0 or pairs.max() >= self.n_vertices:
                raise MeshError("symmetry pair index out of range")
            if np.any(pairs[:, 0] == pairs[:, 1]):
                raise MeshError("self-pair listed as a pair; use a midline entry")
            np.add.at(seen, pairs.ravel(), 1)
        if midline.size:
            if midline.min() < 0 or midline.max() >= self.n_vertices:
                raise MeshError("midline index out of range")
            np.add.at(seen, midline, 1)
        if np.any(seen != 1):
            bad = int(np.flatnonzero(seen != 1)[0])
            raise MeshError(
                f"symmetry map must cover every vertex exactly once (vertex {bad} seen {seen[bad]}x)"
            )
        self.pairs = _freeze(pairs)
        self.midline = _freeze(midline)
        self.plane_normal = _freeze(normal)
        self.plane_offset = float(self.plane_offset)

    def partner(self) -> np.ndarray:
        """Involution array: partner[i] = mirrored index of i."""
        p = np.arange(self.n_vertices, dtype=np.int64)
        p[self.pairs[:, 0]] = self.pairs[:, 1]
        p[self.pairs[:, 1]] = self.pairs[:, 0]
        return p


@dataclass
class RigidTransform:
    """x -> scale * rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation


# ---------------------------------------------------------------------------
# file IO


def atomic_write_text(path: str, text: str) -> None:
    """Write text to path via a temp file + rename in the same directory."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _format_row(row) -> str:
    return " ".join(_FMT % x for x in row)


def save_mesh(path: str, mesh: Mesh) -> None:
    """Write ASCII OBJ or PLY depending on the file extension."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        lines = [f"v {_format_row(v)}" for v in mesh.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
        atomic_write_text(path, "\n".join(lines) + "\n")
    elif ext == ".ply":
        header = [
            "ply",
            "format ascii 1.0",
            f"element vertex {mesh.n_vertices}",
            "property double x",
            "property double y",
            "property double z",
            f"element face {mesh.n_faces}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
        lines = header + [_format_row(v) for v in mesh.vertices]
        lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
        atomic_write_text(path, "\n".join(lines) + "\n")
    else:
        raise MeshError(f"unsupported mesh format: {ext!r} (use .obj or .ply)")


def _load_obj(path: str) -> Mesh:
    verts: list = []
    faces: list = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}: malformed vertex at line {lineno}")
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                refs = parts[1:]
                if len(refs) != 3:
                    raise MeshError(f"{path}: non-triangular face at line {lineno}")
                idx = []
                for r in refs:
                    # accept v, v/vt, v//vn, v/vt/vn; only the vertex index is used
                    head = r.split("/")[0]
                    try:
                        k = int(head)
                    except ValueError:
                        raise MeshError(f"{path}: bad face index {r!r} at line {lineno}")
                    if k == 0:
                        raise MeshError(f"{path}: bad face index {r!r} at line {lineno}")
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                faces.append(idx)
            # other OBJ tags (vn, vt, o, g, s, usemtl, mtllib) are ignored
    if not verts:
        raise MeshError(f"{path}: no vertices found")
    return Mesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _load_ply(path: str) -> Mesh:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise MeshError(f"{path}: not a PLY file")
        n_vert = n_face = None
        lineno = 1
        elements: list = []  # (name, count) in declaration order
        while True:
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise MeshError(f"{path}: unexpected end of header")
            line = raw.decode("ascii", errors="replace").strip()
            if line.startswith("format"):
                if "ascii" not in line:
                    raise MeshError(f"{path}: binary PLY is not supported (ASCII only)")
            elif line.startswith("element"):
                parts = line.split()
                elements.append((parts[1], int(parts[2])))
                if parts[1] == "vertex":
                    n_vert = int(parts[2])
                elif parts[1] == "face":
                    n_face = int(parts[2])
            elif line == "end_header":
                break
        if n_vert is None or n_face is None:
            raise MeshError(f"{path}: PLY header missing vertex or face element")
        if [name for name, _ in elements] != ["vertex", "face"]:
            raise MeshError(f"{path}: unsupported PLY element layout")
        verts = np.empty((n_vert, 3), dtype=np.float64)
        for i in range(n_vert):
            lineno += 1
            parts = fh.readline().split()
            if len(parts) < 3:
                raise MeshError(f"{path}: malformed vertex at line {lineno}")
            verts[i] = [float(x) for x in parts[:3]]
        faces = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            lineno += 1
            parts = fh.readline().split()
            if not parts:
                raise MeshError(f"{path}: missing face at line {lineno}")
            if int(parts[0]) != 3 or len(parts) < 4:
                raise MeshError(f"{path}: non-triangular face at line {lineno}")
            faces[i] = [int(x) for x in parts[1:4]]
    return Mesh(verts, faces)


def load_mesh(path: str) -> Mesh:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        return _load_obj(path)
    if ext == ".ply":
        return _load_ply(path)
    raise MeshError(f"unsupported mesh format: {ext!r} (use .obj or .ply)")


def save_landmarks(path: str, indices: np.ndarray) -> None:
    atomic_write_text(path, "\n".join(str(int(i)) for i in np.asarray(indices).ravel()) + "\n")


def load_landmarks(path: str) -> np.ndarray:
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                out.append(int(line.split()[0]))
            except ValueError:
                raise MeshError(f"{path}: bad landmark index at line {lineno}")
    return np.array(out, dtype=np.int64)


def save_symmetry_map(path: str, sym: SymmetryMap) -> None:
    """Sidecar format: optional `plane nx ny nz offset` line, then `i j` pairs
    and `i i` midline lines."""
    lines = ["plane " + _format_row(list(sym.plane_normal) + [sym.plane_offset])]
    lines += [f"{i} {j}" for i, j in sym.pairs]
    lines += [f"{i} {i}" for i in sym.midline]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_symmetry_map(path: str, n_vertices: int) -> SymmetryMap:
    pairs = []
    midline = []
    normal = np.array([1.0, 0.0, 0.0])
    offset = 0.0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "plane":
                if len(parts) != 5:
                    raise MeshError(f"{path}: malformed plane line at line {lineno}")
                normal = np.array([float(x) for x in parts[1:4]])
                offset = float(parts[4])
                continue
            if len(parts) != 2:
                raise MeshError(f"{path}: malformed pair at line {lineno}")
            i, j = int(parts[0]), int(parts[1])
            if i == j:
                midline.append(i)
            else:
                pairs.append((i, j))
    return SymmetryMap(
        n_vertices=n_vertices,
        pairs=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        midline=np.array(midline, dtype=np.int64),
        plane_normal=normal,
        plane_offset=offset,
    )


# ---------------------------------------------------------------------------
# rigid alignment


def procrustes_align(
    mesh: Mesh, reference: Mesh | np.ndarray, allow_scale: bool = False
) -> tuple[Mesh, RigidTransform]:
    """Least-squares rigid (optionally similarity) alignment of mesh onto
    reference point set with identical vertex ordering.

    Closed form via SVD of the cross-covariance, with a determinant guard so
    the returned rotation is proper (no reflection).
    """
    src = mesh.vertices
    dst = reference.vertices if isinstance(reference, Mesh) else np.asarray(reference, float)
    if src.shape != dst.shape:
        raise MeshError(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xs.T @ xd
    u, s, vt = np.linalg.svd(cov)
    rank = int(np.sum(s > s[0] * 1e-12)) if s[0] > 0 else 0
    if rank < 2:
        raise MeshError("degenerate point set: rigid alignment is underdetermined")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    diag = np.ones(3)
    diag[-1] = d
    rotation = vt.T @ np.diag(diag) @ u.T
    if allow_scale:
        var_s = np.sum(xs * xs)
        scale = float(np.sum(s * diag) / var_s)
    else:
        scale = 1.0
    translation = mu_d - scale * rotation @ mu_s
    transform = RigidTransform(rotation=rotation, translation=translation, scale=scale)
    return mesh.with_vertices(transform.apply(src)), transform


# ---------------------------------------------------------------------------
# symmetry ops


def _reflect(points: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    dist = points @ normal - offset
    return points - 2.0 * dist[:, None] * normal[None, :]


def mirror_mesh(mesh: Mesh, sym: SymmetryMap) -> Mesh:
    """Mirror across the symmetry plane: output vertex i is the reflection of
    input vertex partner(i). Topology is unchanged."""
    if sym.n_vertices != mesh.n_vertices:
        raise MeshError("symmetry map size does not match mesh")
    partner = sym.partner()
    reflected = _reflect(mesh.vertices[partner], sym.plane_normal, sym.plane_offset)
    return mesh.with_vertices(reflected)


def symmetrize_mesh(mesh: Mesh, sym: SymmetryMap) -> Mesh:
    """Average of the mesh and its mirror; output is exactly plane-symmetric."""
    mirrored = mirror_mesh(mesh, sym)
    return mesh.with_vertices(0.5 * (mesh.vertices + mirrored.vertices))


# ---------------------------------------------------------------------------
# small mesh utilities


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges (E,2) with i < j."""
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [0, 2]]], axis=0)
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def vertex_adjacency(n_vertices: int, faces: np.ndarray) -> list:
    """Sorted neighbor index arrays per vertex."""
    edges = mesh_edges(faces)
    neighbors: list = [[] for _ in range(n_vertices)]
    for i, j in edges:
        neighbors[int(i)].append(int(j))
        neighbors[int(j)].append(int(i))
    return [np.array(sorted(n), dtype=np.int64) for n in neighbors]


def face_normals(mesh_or_vertices, faces: np.ndarray | None = None) -> np.ndarray:
    """Unnormalized face normals (cross products); zero rows for slivers."""
    if isinstance(mesh_or_vertices, Mesh):
        v, f = mesh_or_vertices.vertices, mesh_or_vertices.faces
    else:
        v, f = np.asarray(mesh_or_vertices), np.asarray(faces)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    return np.cross(b - a, c - a)


def bbox_diagonal(mesh_or_vertices) -> float:
    v = mesh_or_vertices.vertices if isinstance(mesh_or_vertices, Mesh) else np.asarray(mesh_or_vertices)
    return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))
