"""Expression deformation transfer through a blendshape bank.

The bank holds, per subject, a neutral geometry and one blendshape geometry
per action unit, all on a shared source topology, plus a table naming
composite expressions as AU combinations. An expression is synthesized
additively: neutral plus the offsets of its active AUs. The deformation
between two expression states is resampled onto a target topology through a
barycentric map and averaged over an ensemble of subjects; adding the scaled
average to the target's current geometry transfers the expression change.

On disk a bank is a directory of meshes named `s{k}_neutral.obj` /
`s{k}_au{j}.obj` plus an `expressions.txt` AU-combination table
(rows `name: au au ...`).
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

from .correspondence import BarycentricMap, apply_map
from .geometry import Mesh, atomic_write_text, face_normals, load_mesh, save_mesh

__all__ = [
    "TransferError",
    "ExpressionBank",
    "synthesize_expression",
    "deformation",
    "transfer_expression",
    "choose_subjects",
    "flipped_faces",
    "save_bank_dir",
    "load_bank_dir",
]


class TransferError(Exception):
    pass


@dataclass
class ExpressionBank:
    """Per-subject neutral + per-AU blendshape geometries on one topology.

    neutrals: (n_subjects, M, 3); blendshapes: (n_subjects, n_aus, M, 3).
    expression_table maps expression names to AU index tuples; row order is
    the expression index order used by the pipeline (first row = neutral).
    """

    neutrals: np.ndarray
    blendshapes: np.ndarray
    faces: np.ndarray
    expression_table: dict = field(default_factory=dict)
    subject_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.neutrals = np.asarray(self.neutrals, dtype=np.float64)
        self.blendshapes = np.asarray(self.blendshapes, dtype=np.float64)
        if self.neutrals.ndim != 3 or self.neutrals.shape[2] != 3:
            raise TransferError(f"neutrals must be (S,M,3), got {self.neutrals.shape}")
        s, m, _ = self.neutrals.shape
        if s == 0:
            raise TransferError("empty bank: at least one subject required")
        if self.blendshapes.shape[:1] != (s,) or self.blendshapes.shape[2:] != (m, 3):
            raise TransferError(
                f"blendshapes must be ({s},A,{m},3), got {self.blendshapes.shape}"
            )
        if not self.subject_ids:
            self.subject_ids = [f"s{i:03d}" for i in range(s)]
        for name, aus in self.expression_table.items():
            for a in aus:
                if not 0 <= int(a) < self.n_aus:
                    raise TransferError(f"expression {name!r} references AU {a} out of range")

    @property
    def n_subjects(self) -> int:
        return self.neutrals.shape[0]

    @property
    def n_aus(self) -> int:
        return self.blendshapes.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.neutrals.shape[1]

    def au_vector_for(self, expression_name: str) -> np.ndarray:
        if expression_name not in self.expression_table:
            raise TransferError(f"unknown expression {expression_name!r}")
        vec = np.zeros(self.n_aus, dtype=np.uint8)
        vec[list(self.expression_table[expression_name])] = 1
        return vec


def _check_au_vector(bank: ExpressionBank, au_vector) -> np.ndarray:
    v = np.asarray(au_vector).astype(np.float64)
    if v.shape != (bank.n_aus,):
        raise TransferError(f"AU vector must have length {bank.n_aus}, got {v.shape}")
    if not np.all(np.isin(v, (0.0, 1.0))):
        raise TransferError("AU vector entries must be 0 or 1")
    return v


def synthesize_expression(bank: ExpressionBank, subject: int, au_vector) -> np.ndarray:
    """Neutral geometry plus the blendshape offsets of every active AU."""
    if not 0 <= subject < bank.n_subjects:
        raise TransferError(f"subject {subject} out of range")
    v = _check_au_vector(bank, au_vector)
    neutral = bank.neutrals[subject]
    offsets = bank.blendshapes[subject] - neutral[None, :, :]
    return neutral + np.einsum("a,amd->md", v, offsets)


def deformation(bank: ExpressionBank, subject: int, source_au, target_au) -> np.ndarray:
    """Per-vertex displacement taking expression `source_au` to `target_au`
    for one subject. Identical states give exact zeros."""
    return synthesize_expression(bank, subject, target_au) - synthesize_expression(
        bank, subject, source_au
    )


def choose_subjects(bank: ExpressionBank, count: int, seed: int) -> np.ndarray:
    """Seeded sample of subject indices without replacement; count is clamped
    to the bank size."""
    count = min(int(count), bank.n_subjects)
    if count < 1:
        raise TransferError("ensemble needs at least one subject")
    rng = np.random.default_rng(seed)
    return rng.choice(bank.n_subjects, size=count, replace=False)


def transfer_expression(
    current: Mesh,
    source_au,
    target_au,
    bank: ExpressionBank,
    bmap: BarycentricMap,
    delta: float = 1.0,
    ensemble: int = 40,
    seed: int = 0,
    subjects=None,
) -> Mesh:
    """Move the target mesh from expression state `source_au` to `target_au`.

    The subject-wise deformations are resampled through the map, averaged in
    a fixed order over the chosen ensemble, scaled by delta, and added to the
    current geometry. Passing `subjects` overrides the seeded draw.
    """
    _check_au_vector(bank, source_au)
    _check_au_vector(bank, target_au)
    if bmap.source_vertex_count != bank.n_vertices:
        raise TransferError(
            f"map source side ({bmap.source_vertex_count}) does not match bank "
            f"topology ({bank.n_vertices})"
        )
    if bmap.target_vertex_count != current.n_vertices:
        raise TransferError(
            f"map target side ({bmap.target_vertex_count}) does not match mesh "
            f"({current.n_vertices})"
        )
    if subjects is None:
        subjects = choose_subjects(bank, ensemble, seed)
    subjects = np.asarray(subjects, dtype=np.int64)
    if subjects.size == 0:
        raise TransferError("ensemble needs at least one subject")

    total = np.zeros((current.n_vertices, 3))
    for s in subjects:  # fixed summation order
        d = deformation(bank, int(s), source_au, target_au)
        total += apply_map(bmap, d)
    mean = total / subjects.size
    return current.with_vertices(current.vertices + delta * mean)


def flipped_faces(before: Mesh, after: Mesh) -> np.ndarray:
    """Face indices whose normal reversed or collapsed; used to reject
    transfers that fold the surface."""
    if before.n_faces != after.n_faces:
        raise TransferError("meshes must share topology")
    n0 = face_normals(before)
    n1 = face_normals(after)
    dots = np.einsum("ij,ij->i", n0, n1)
    return np.flatnonzero(dots <= 0.0)


# ---------------------------------------------------------------------------
# on-disk bank


def save_bank_dir(path: str, bank: ExpressionBank) -> None:
    os.makedirs(path, exist_ok=True)
    for s in range(bank.n_subjects):
        sid = bank.subject_ids[s]
        save_mesh(os.path.join(path, f"{sid}_neutral.obj"), Mesh(bank.neutrals[s], bank.faces))
        for a in range(bank.n_aus):
            save_mesh(
                os.path.join(path, f"{sid}_au{a:02d}.obj"),
                Mesh(bank.blendshapes[s, a], bank.faces),
            )
    rows = [f"{name}: " + " ".join(str(int(a)) for a in aus)
            for name, aus in bank.expression_table.items()]
    atomic_write_text(os.path.join(path, "expressions.txt"), "\n".join(rows) + "\n")


def load_bank_dir(path: str) -> ExpressionBank:
    names = sorted(os.listdir(path))
    neutral_pat = re.compile(r"^(.*)_neutral\.(obj|ply)$")
    au_pat = re.compile(r"^(.*)_au(\d+)\.(obj|ply)$")
    subjects: dict = {}
    for name in names:
        m = neutral_pat.match(name)
        if m:
            subjects.setdefault(m.group(1), {})["neutral"] = name
            continue
        m = au_pat.match(name)
        if m:
            subjects.setdefault(m.group(1), {})[int(m.group(2))] = name
    if not subjects:
        raise TransferError(f"{path}: no bank meshes found")

    subject_ids = sorted(subjects)
    au_ids = sorted(k for k in subjects[subject_ids[0]] if k != "neutral")
    neutrals = []
    blends = []
    faces = None
    for sid in subject_ids:
        entry = subjects[sid]
        if "neutral" not in entry:
            raise TransferError(f"{path}: subject {sid} is missing its neutral mesh")
        if sorted(k for k in entry if k != "neutral") != au_ids:
            raise TransferError(f"{path}: subject {sid} has an inconsistent AU set")
        mesh = load_mesh(os.path.join(path, entry["neutral"]))
        if faces is None:
            faces = mesh.faces
        elif not np.array_equal(faces, mesh.faces):
            raise TransferError(f"{path}: subject {sid} topology differs")
        neutrals.append(mesh.vertices)
        row = []
        for a in au_ids:
            m2 = load_mesh(os.path.join(path, entry[a]))
            if not np.array_equal(faces, m2.faces):
                raise TransferError(f"{path}: subject {sid} AU {a} topology differs")
            row.append(m2.vertices)
        blends.append(np.stack(row) if row else np.zeros((0,) + mesh.vertices.shape))

    table: dict = {}
    table_path = os.path.join(path, "expressions.txt")
    if os.path.exists(table_path):
        with open(table_path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if ":" not in line:
                    raise TransferError(f"{table_path}: malformed row at line {lineno}")
                name, _, rest = line.partition(":")
                table[name.strip()] = tuple(int(x) for x in rest.split())

    return ExpressionBank(
        neutrals=np.stack(neutrals),
        blendshapes=np.stack(blends),
        faces=faces,
        expression_table=table,
        subject_ids=subject_ids,
    )
