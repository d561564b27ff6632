"""Deterministic synthetic mesh family: an ellipsoid head grid with smooth
per-identity warps, localized per-AU bumps, an expression table combining
AUs, a coarse blendshape bank on a second topology, and a labeled AU pool
for classifier training. Everything derives from one seed so reruns are
bit-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .bundle import sha256_file
from .geometry import (
    Mesh,
    SymmetryMap,
    atomic_write_text,
    save_landmarks,
    save_mesh,
    save_symmetry_map,
)
from .transfer import ExpressionBank, save_bank_dir

__all__ = [
    "SyntheticError",
    "SyntheticFamilySpec",
    "SyntheticFamily",
    "LANDMARK_DIRECTIONS",
    "ellipsoid_grid",
    "grid_symmetry",
    "grid_dims",
    "landmark_indices",
    "expression_table",
    "generate_family",
    "write_family",
    "family_mesh_name",
]

MANIFEST_FORMAT = "morphflow-synth 1"

# named anchor directions on the unit head sphere: y up, z facial, x lateral
LANDMARK_DIRECTIONS = (
    ("nose_tip", (0.0, -0.10, 1.0)),
    ("mouth_left", (0.35, -0.45, 0.85)),
    ("mouth_right", (-0.35, -0.45, 0.85)),
    ("eye_left", (0.35, 0.35, 0.90)),
    ("eye_right", (-0.35, 0.35, 0.90)),
    ("chin", (0.0, -0.80, 0.55)),
    ("brow_left", (0.30, 0.55, 0.80)),
    ("brow_right", (-0.30, 0.55, 0.80)),
    ("lip_lower", (0.0, -0.60, 0.90)),
    ("cheek_left", (0.60, -0.15, 0.70)),
    ("cheek_right", (-0.60, -0.15, 0.70)),
    ("forehead", (0.0, 0.75, 0.60)),
)

DEFAULT_RADII = (1.0, 1.25, 0.95)


class SyntheticError(Exception):
    pass


@dataclass
class SyntheticFamilySpec:
    n_id: int = 5
    n_ex: int = 6
    n_vertices: int = 500          # requested; the grid rounds to the nearest layout
    identity_amplitude: float = 0.08
    expression_amplitude: float = 0.06
    noise: float = 0.0
    seed: int = 0
    n_aus: int = 8
    n_bank_subjects: int = 10
    au_train: int = 40
    au_test: int = 20
    separable: bool = True

    def __post_init__(self):
        if self.n_id < 1 or self.n_ex < 1:
            raise SyntheticError("identity and expression counts must be positive")
        if self.n_vertices < 50:
            raise SyntheticError("need at least 50 vertices")
        if not 1 <= self.n_aus <= len(LANDMARK_DIRECTIONS):
            raise SyntheticError(
                f"n_aus must be in 1..{len(LANDMARK_DIRECTIONS)}"
            )
        if self.identity_amplitude < 0 or self.expression_amplitude < 0 or self.noise < 0:
            raise SyntheticError("amplitudes must be nonnegative")
        if self.n_bank_subjects < 1:
            raise SyntheticError("bank needs at least one subject")
        if self.au_train < 2 or self.au_test < 2:
            raise SyntheticError("AU pool sizes must be at least 2")


@dataclass
class SyntheticFamily:
    spec: SyntheticFamilySpec
    base: Mesh                     # fine neutral ellipsoid, with landmarks set
    symmetry: SymmetryMap
    landmark_names: list
    family_meshes: dict            # (i, e) -> Mesh
    identity_meshes: list          # fine identity-only meshes (expression 0)
    expression_table: dict         # name -> AU index tuple, insertion order = index
    identity_labels: list
    expression_labels: list
    expression_region: np.ndarray  # fine vertex indices moved by any expression
    bank: ExpressionBank
    bank_base: Mesh
    bank_symmetry: SymmetryMap
    au_pool_train: list            # Meshes on the bank topology
    au_pool_test: list
    au_labels_train: np.ndarray    # (au_train, n_aus) uint8
    au_labels_test: np.ndarray
    ground_truth: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# base geometry


def grid_dims(n_vertices: int):
    """Near-square UV layout for a requested vertex count; n_phi stays a
    multiple of 4 so the x=0 midline lands on grid columns."""
    n_phi = int(round(np.sqrt(2.0 * max(n_vertices - 2, 8))))
    n_phi = max(8, (n_phi // 4) * 4)
    n_theta = max(3, int(round((n_vertices - 2) / n_phi)))
    return n_theta, n_phi


def ellipsoid_grid(n_theta: int, n_phi: int, radii=DEFAULT_RADII) -> Mesh:
    """UV-sphere ellipsoid with poles on the y axis."""
    if n_phi % 4 != 0 or n_phi < 8:
        raise SyntheticError("n_phi must be a multiple of 4, at least 8")
    if n_theta < 3:
        raise SyntheticError("n_theta must be at least 3")
    radii = np.asarray(radii, dtype=np.float64)
    verts = [np.array([0.0, radii[1], 0.0])]
    for i in range(n_theta):
        theta = np.pi * (i + 1) / (n_theta + 1)
        for k in range(n_phi):
            phi = 2.0 * np.pi * k / n_phi
            d = np.array([
                np.sin(theta) * np.cos(phi),
                np.cos(theta),
                np.sin(theta) * np.sin(phi),
            ])
            verts.append(d * radii)
    verts.append(np.array([0.0, -radii[1], 0.0]))
    south = 1 + n_theta * n_phi

    def ring(i, k):
        return 1 + i * n_phi + (k % n_phi)

    faces = []
    for k in range(n_phi):
        faces.append((0, ring(0, k + 1), ring(0, k)))
    for i in range(n_theta - 1):
        for k in range(n_phi):
            a, b = ring(i, k), ring(i, k + 1)
            c, d = ring(i + 1, k + 1), ring(i + 1, k)
            faces.append((a, b, c))
            faces.append((a, c, d))
    for k in range(n_phi):
        faces.append((south, ring(n_theta - 1, k), ring(n_theta - 1, k + 1)))
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))


def grid_symmetry(n_theta: int, n_phi: int) -> SymmetryMap:
    """Left/right correspondence of the UV grid about the x=0 plane."""
    n = n_theta * n_phi + 2
    pairs = []
    midline = [0, n - 1]
    for i in range(n_theta):
        for k in range(n_phi):
            mk = (n_phi // 2 - k) % n_phi
            a = 1 + i * n_phi + k
            b = 1 + i * n_phi + mk
            if a == b:
                midline.append(a)
            elif a < b:
                pairs.append((a, b))
    return SymmetryMap(n, pairs=pairs, midline=sorted(midline))


def _unit_dirs(vertices: np.ndarray, radii) -> np.ndarray:
    d = np.asarray(vertices, dtype=np.float64) / np.asarray(radii, dtype=np.float64)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def landmark_indices(mesh: Mesh, radii=DEFAULT_RADII, names=None):
    """Vertex nearest (by direction) to each named anchor; first index wins
    ties. Returns (indices, names)."""
    table = LANDMARK_DIRECTIONS if names is None else [
        entry for entry in LANDMARK_DIRECTIONS if entry[0] in names
    ]
    dirs = _unit_dirs(mesh.vertices, radii)
    idx = []
    for _, target in table:
        t = np.asarray(target, dtype=np.float64)
        t = t / np.linalg.norm(t)
        idx.append(int(np.argmax(dirs @ t)))
    return np.array(idx, dtype=np.int64), [name for name, _ in table]


# ---------------------------------------------------------------------------
# deformation fields


def _bump(dirs: np.ndarray, center: np.ndarray, sigma: float) -> np.ndarray:
    d2 = np.sum((dirs - center) ** 2, axis=1)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def _identity_fields(rng, n_fields=4):
    """Broad random Gaussian fields on the direction sphere with decaying
    weights; one field set is shared by every identity."""
    centers = rng.normal(size=(n_fields, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    sigmas = 0.7 + 0.3 * rng.random(n_fields)
    decay = 0.6 ** np.arange(n_fields)
    return centers, sigmas, decay


def _identity_factor(dirs, centers, sigmas, coeffs, amplitude):
    f = np.zeros(len(dirs))
    for c, s, w in zip(centers, sigmas, coeffs):
        f += w * _bump(dirs, c, s)
    return 1.0 + amplitude * f


def _au_parameters(n_aus: int):
    """Center direction, falloff width, and gain per AU; all deterministic."""
    params = []
    for j in range(n_aus):
        name, target = LANDMARK_DIRECTIONS[j]
        c = np.asarray(target, dtype=np.float64)
        c /= np.linalg.norm(c)
        sigma = 0.28 + 0.03 * (j % 4)
        gain = 0.8 + 0.1 * ((j * 7) % 5)
        params.append({"au": j, "anchor": name, "center": c, "sigma": sigma,
                       "gain": gain})
    return params


def _au_offsets(vertices, radii, au_params, amplitude, warp_factor=None):
    """(n_aus, N, 3) outward bump displacements evaluated at the vertices'
    directions, so both topologies sample one analytic field. A warp factor
    couples AU magnitude to identity (the non-separable mode)."""
    dirs = _unit_dirs(vertices, radii)
    radial = np.asarray(vertices, dtype=np.float64)
    radial = radial / np.linalg.norm(radial, axis=1, keepdims=True)
    out = np.zeros((len(au_params), len(dirs), 3))
    for j, p in enumerate(au_params):
        mag = amplitude * p["gain"] * _bump(dirs, p["center"], p["sigma"])
        if warp_factor is not None:
            mag = mag * warp_factor
        out[j] = mag[:, None] * radial
    return out


def expression_table(n_ex: int, n_aus: int) -> dict:
    """Expression 0 is the neutral (empty AU set); later expressions cycle
    through single AUs, then pairs."""
    table = {"neutral": ()}
    for e in range(1, n_ex):
        if e <= n_aus:
            aus = ((e - 1) % n_aus,)
        else:
            first = (e - 1) % n_aus
            second = (2 * e + 1) % n_aus
            aus = tuple(sorted({first, second}))
        table[f"expr{e:02d}"] = aus
    return table


# ---------------------------------------------------------------------------
# family generation


def generate_family(spec: SyntheticFamilySpec) -> SyntheticFamily:
    radii = DEFAULT_RADII
    n_theta, n_phi = grid_dims(spec.n_vertices)
    base = ellipsoid_grid(n_theta, n_phi, radii)
    sym = grid_symmetry(n_theta, n_phi)
    lm_idx, lm_names = landmark_indices(base, radii)
    base = Mesh(base.vertices, base.faces, landmarks=lm_idx)

    bank_theta = max(4, n_theta // 2)
    bank_phi = max(8, (n_phi // 2) // 4 * 4)
    bank_base = ellipsoid_grid(bank_theta, bank_phi, radii)
    bank_sym = grid_symmetry(bank_theta, bank_phi)
    bank_lm, _ = landmark_indices(bank_base, radii)
    bank_base = Mesh(bank_base.vertices, bank_base.faces, landmarks=bank_lm)

    seeds = np.random.SeedSequence(spec.seed).spawn(4)
    rng_id = np.random.default_rng(seeds[0])
    rng_bank = np.random.default_rng(seeds[1])
    rng_pool = np.random.default_rng(seeds[2])
    rng_noise = np.random.default_rng(seeds[3])

    centers, sigmas, decay = _identity_fields(rng_id)
    id_coeffs = rng_id.normal(size=(spec.n_id, len(decay))) * decay
    au_params = _au_parameters(spec.n_aus)
    table = expression_table(spec.n_ex, spec.n_aus)
    ex_names = list(table.keys())

    base_dirs = _unit_dirs(base.vertices, radii)
    au_fine = _au_offsets(base.vertices, radii, au_params,
                          spec.expression_amplitude)
    ex_fine = np.zeros((spec.n_ex, base.n_vertices, 3))
    for e, name in enumerate(ex_names):
        for j in table[name]:
            ex_fine[e] += au_fine[j]

    identity_meshes = []
    family = {}
    for i in range(spec.n_id):
        factor = _identity_factor(base_dirs, centers, sigmas, id_coeffs[i],
                                  spec.identity_amplitude)
        warped = base.vertices * factor[:, None]
        identity_meshes.append(Mesh(warped, base.faces, landmarks=lm_idx))
        if spec.separable:
            per_id_ex = ex_fine
        else:
            per_id_ex = _au_offsets(base.vertices, radii, au_params,
                                    spec.expression_amplitude,
                                    warp_factor=factor)
            stacked = np.zeros_like(ex_fine)
            for e, name in enumerate(ex_names):
                for j in table[name]:
                    stacked[e] += per_id_ex[j]
            per_id_ex = stacked
        for e in range(spec.n_ex):
            pts = warped + per_id_ex[e]
            if spec.noise > 0:
                pts = pts + rng_noise.normal(scale=spec.noise, size=pts.shape)
            family[(i, e)] = Mesh(pts, base.faces, landmarks=lm_idx)

    # union of AU supports: vertices materially moved by some expression
    moved = np.linalg.norm(ex_fine, axis=2).max(axis=0)
    threshold = 0.05 * moved.max() if moved.max() > 0 else 0.0
    region = np.flatnonzero(moved > threshold)

    # coarse blendshape bank: fresh identities on the bank topology
    bank_dirs = _unit_dirs(bank_base.vertices, radii)
    bank_coeffs = rng_bank.normal(size=(spec.n_bank_subjects, len(decay))) * decay
    au_bank = _au_offsets(bank_base.vertices, radii, au_params,
                          spec.expression_amplitude)
    neutrals = np.zeros((spec.n_bank_subjects, bank_base.n_vertices, 3))
    blends = np.zeros((spec.n_bank_subjects, spec.n_aus, bank_base.n_vertices, 3))
    for s in range(spec.n_bank_subjects):
        factor = _identity_factor(bank_dirs, centers, sigmas, bank_coeffs[s],
                                  spec.identity_amplitude)
        neutrals[s] = bank_base.vertices * factor[:, None]
        for j in range(spec.n_aus):
            blends[s, j] = neutrals[s] + au_bank[j]
    bank = ExpressionBank(neutrals, blends, bank_base.faces,
                          expression_table=dict(table))

    # labeled AU pool on the bank topology; every AU must see both classes
    # in both splits
    total = spec.au_train + spec.au_test
    for _ in range(100):
        acts = (rng_pool.random((total, spec.n_aus)) < 0.5).astype(np.uint8)
        tr, te = acts[:spec.au_train], acts[spec.au_train:]
        if (tr.min(axis=0).max() == 0 and tr.max(axis=0).min() == 1
                and te.min(axis=0).max() == 0 and te.max(axis=0).min() == 1):
            break
    else:
        raise SyntheticError("could not draw a balanced AU pool")
    intensities = 0.7 + 0.6 * rng_pool.random((total, spec.n_aus))
    pool_coeffs = rng_pool.normal(size=(total, len(decay))) * decay
    pool = []
    for p in range(total):
        factor = _identity_factor(bank_dirs, centers, sigmas, pool_coeffs[p],
                                  spec.identity_amplitude)
        pts = bank_base.vertices * factor[:, None]
        for j in range(spec.n_aus):
            if acts[p, j]:
                pts = pts + intensities[p, j] * au_bank[j]
        pool.append(Mesh(pts, bank_base.faces, landmarks=bank_lm))

    ground_truth = {
        "radii": list(radii),
        "grid": {"n_theta": n_theta, "n_phi": n_phi,
                 "bank_n_theta": bank_theta, "bank_n_phi": bank_phi},
        "identity_fields": {
            "centers": centers.tolist(),
            "sigmas": sigmas.tolist(),
            "decay": decay.tolist(),
        },
        "identity_coefficients": id_coeffs.tolist(),
        "bank_coefficients": bank_coeffs.tolist(),
        "au_parameters": [
            {"au": p["au"], "anchor": p["anchor"], "center": p["center"].tolist(),
             "sigma": p["sigma"], "gain": p["gain"]}
            for p in au_params
        ],
        "expression_table": {k: list(v) for k, v in table.items()},
        "expression_region": region.tolist(),
        "landmarks": {name: int(ix) for name, ix in zip(lm_names, lm_idx)},
    }
    return SyntheticFamily(
        spec=spec,
        base=base,
        symmetry=sym,
        landmark_names=lm_names,
        family_meshes=family,
        identity_meshes=identity_meshes,
        expression_table=table,
        identity_labels=[f"id{i:02d}" for i in range(spec.n_id)],
        expression_labels=ex_names,
        expression_region=region,
        bank=bank,
        bank_base=bank_base,
        bank_symmetry=bank_sym,
        au_pool_train=pool[:spec.au_train],
        au_pool_test=pool[spec.au_train:],
        au_labels_train=acts[:spec.au_train],
        au_labels_test=acts[spec.au_train:],
        ground_truth=ground_truth,
    )


# ---------------------------------------------------------------------------
# persistence


def family_mesh_name(i: int, e: int) -> str:
    return f"id{i:02d}_ex{e:02d}.obj"


def _labels_csv(names, labels):
    n_aus = labels.shape[1]
    header = "mesh," + ",".join(f"au{j:02d}" for j in range(n_aus))
    rows = [header]
    for name, row in zip(names, labels):
        rows.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(rows) + "\n"


def write_family(family: SyntheticFamily, out_dir: str) -> dict:
    """Write every artifact plus a manifest with ground truth and content
    hashes. Returns the manifest dict."""
    fam_dir = os.path.join(out_dir, "family")
    mesh_dir = os.path.join(fam_dir, "meshes")
    bank_dir = os.path.join(out_dir, "bank")
    au_dir = os.path.join(out_dir, "au_data")
    for d in (mesh_dir, bank_dir, os.path.join(au_dir, "train"),
              os.path.join(au_dir, "test")):
        os.makedirs(d, exist_ok=True)

    save_mesh(os.path.join(fam_dir, "topology.obj"), family.base)
    save_landmarks(os.path.join(fam_dir, "landmarks.txt"), family.base.landmarks)
    save_symmetry_map(os.path.join(fam_dir, "symmetry.txt"), family.symmetry)
    for (i, e), mesh in sorted(family.family_meshes.items()):
        save_mesh(os.path.join(mesh_dir, family_mesh_name(i, e)), mesh)

    save_mesh(os.path.join(bank_dir, "base.obj"), family.bank_base)
    save_landmarks(os.path.join(bank_dir, "landmarks.txt"),
                   family.bank_base.landmarks)
    save_symmetry_map(os.path.join(bank_dir, "symmetry.txt"),
                      family.bank_symmetry)
    save_bank_dir(os.path.join(bank_dir, "subjects"), family.bank)

    train_names = [f"m{k:03d}.obj" for k in range(len(family.au_pool_train))]
    test_names = [f"m{k:03d}.obj" for k in range(len(family.au_pool_test))]
    for name, mesh in zip(train_names, family.au_pool_train):
        save_mesh(os.path.join(au_dir, "train", name), mesh)
    for name, mesh in zip(test_names, family.au_pool_test):
        save_mesh(os.path.join(au_dir, "test", name), mesh)
    atomic_write_text(os.path.join(au_dir, "train_labels.csv"),
                      _labels_csv(train_names, family.au_labels_train))
    atomic_write_text(os.path.join(au_dir, "test_labels.csv"),
                      _labels_csv(test_names, family.au_labels_test))

    hashes = {}
    for root, _, files in os.walk(out_dir):
        for f in sorted(files):
            p = os.path.join(root, f)
            hashes[os.path.relpath(p, out_dir)] = sha256_file(p)

    spec = family.spec
    manifest = {
        "format": MANIFEST_FORMAT,
        "spec": {
            "n_id": spec.n_id, "n_ex": spec.n_ex,
            "n_vertices": spec.n_vertices,
            "identity_amplitude": spec.identity_amplitude,
            "expression_amplitude": spec.expression_amplitude,
            "noise": spec.noise, "seed": spec.seed, "n_aus": spec.n_aus,
            "n_bank_subjects": spec.n_bank_subjects,
            "au_train": spec.au_train, "au_test": spec.au_test,
            "separable": spec.separable,
        },
        "counts": {
            "family_vertices": family.base.n_vertices,
            "family_faces": family.base.n_faces,
            "bank_vertices": family.bank_base.n_vertices,
            "identities": spec.n_id,
            "expressions": spec.n_ex,
        },
        "identity_labels": family.identity_labels,
        "expression_labels": family.expression_labels,
        "ground_truth": family.ground_truth,
        "files": hashes,
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest
