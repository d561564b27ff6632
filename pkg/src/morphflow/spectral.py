"""Spectral patch descriptors and linear SVM action-unit detection.

Around each landmark a vertex patch is grown ring by ring until it can support
the requested spectral resolution. The combinatorial graph Laplacian of the
patch (edges from the triangulation, -1 off-diagonal, vertex valence on the
diagonal) is eigendecomposed with cyclic Jacobi rotations; the tau smallest
eigenpairs form an ordered basis. Projecting the patch's x/y/z coordinate
channels onto that basis gives a compact descriptor, and one linear
soft-margin SVM per action unit turns descriptors into on/off decisions.

The Laplacian depends only on connectivity, so a basis computed once on the
template topology applies to every mesh sharing it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Mesh, atomic_write_text, vertex_adjacency

__all__ = [
    "SpectralError",
    "PatchSpectrum",
    "AuClassifier",
    "grow_patch",
    "patch_laplacian",
    "jacobi_eigh",
    "spectral_embedding",
    "build_patch_spectrum",
    "project_patch",
    "mesh_features",
    "train_svm",
    "svm_objective",
    "train_au_svm",
    "decision_values",
    "detect_aus",
    "save_bank",
    "load_bank",
]

BANK_FORMAT = "morphflow-au-bank 1"
FEATURE_LAYOUT = "per-landmark [x|y|z] spectral blocks, landmarks in listed order"


class SpectralError(Exception):
    pass


@dataclass
class PatchSpectrum:
    """Fixed spectral basis of one landmark patch.

    patch_vertex_indices: mesh vertex ids in patch order (landmark first,
    then rings in ascending vertex order). basis: (n, tau) eigenvectors of the
    patch Laplacian, eigenvalues ascending, sign fixed so each column's
    largest-magnitude component is positive.
    """

    landmark: int
    patch_vertex_indices: np.ndarray
    rings: int
    eigenvalues: np.ndarray
    basis: np.ndarray

    @property
    def tau(self) -> int:
        return self.basis.shape[1]


@dataclass
class AuClassifier:
    au_id: int
    weights: np.ndarray
    bias: float
    C: float


# ---------------------------------------------------------------------------
# patches and Laplacians


def grow_patch(adjacency: list, landmark: int, rings: int) -> np.ndarray:
    """Vertex ids within `rings` edge hops of the landmark, breadth-first,
    each ring sorted ascending. Deterministic."""
    seen = {int(landmark)}
    order = [int(landmark)]
    frontier = [int(landmark)]
    for _ in range(rings):
        nxt: set = set()
        for v in frontier:
            for u in adjacency[v]:
                u = int(u)
                if u not in seen:
                    nxt.add(u)
        frontier = sorted(nxt)
        order.extend(frontier)
        seen.update(frontier)
        if not frontier:
            break
    return np.array(order, dtype=np.int64)


def patch_laplacian(mesh: Mesh, landmark: int, rings: int):
    """Combinatorial Laplacian of the patch subgraph.

    Returns (L, patch_vertex_indices). L is symmetric with zero row sums:
    L[i,j] = -1 for patch-internal edges, valence on the diagonal.
    """
    if not 0 <= landmark < mesh.n_vertices:
        raise SpectralError(f"landmark {landmark} out of range")
    adjacency = vertex_adjacency(mesh.n_vertices, mesh.faces)
    patch = grow_patch(adjacency, landmark, rings)
    return _laplacian_of(adjacency, patch), patch


def _laplacian_of(adjacency: list, patch: np.ndarray) -> np.ndarray:
    pos = {int(v): k for k, v in enumerate(patch)}
    n = len(patch)
    lap = np.zeros((n, n))
    for k, v in enumerate(patch):
        for u in adjacency[int(v)]:
            j = pos.get(int(u))
            if j is not None and j != k:
                lap[k, j] = -1.0
                lap[k, k] += 1.0
    return lap


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60):
    """Eigendecomposition of a dense symmetric matrix by cyclic Jacobi
    rotations. Returns (eigenvalues ascending, eigenvectors as columns)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SpectralError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-10 * max(1.0, np.abs(a).max())):
        raise SpectralError("matrix must be symmetric")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    vecs = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), vecs
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta  # asymptotic, avoids theta**2 overflow
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                v_p = vecs[:, p].copy()
                v_q = vecs[:, q].copy()
                vecs[:, p] = c * v_p - s * v_q
                vecs[:, q] = s * v_p + c * v_q
    eigvals = np.diag(a).copy()
    order = np.argsort(eigvals, kind="stable")
    return eigvals[order], vecs[:, order]


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude component is positive."""
    out = basis.copy()
    for j in range(out.shape[1]):
        k = int(np.argmax(np.abs(out[:, j])))
        if out[k, j] < 0:
            out[:, j] = -out[:, j]
    return out


def spectral_embedding(laplacian: np.ndarray, tau: int):
    """tau smallest eigenpairs of a symmetric Laplacian, ascending, with the
    sign convention applied. Returns (eigenvalues (tau,), basis (n, tau))."""
    n = laplacian.shape[0]
    if tau < 1 or tau > n:
        raise SpectralError(f"tau must be in [1, {n}], got {tau}")
    eigvals, vecs = jacobi_eigh(laplacian)
    return eigvals[:tau], _fix_signs(vecs[:, :tau])


def build_patch_spectrum(
    mesh: Mesh, landmark: int, tau: int, margin: int = 5, max_rings: int = 64
) -> PatchSpectrum:
    """Grow the landmark patch ring by ring until it holds at least
    tau + margin vertices, then decompose its Laplacian."""
    adjacency = vertex_adjacency(mesh.n_vertices, mesh.faces)
    need = tau + margin
    patch = None
    rings = 0
    for rings in range(1, max_rings + 1):
        patch = grow_patch(adjacency, landmark, rings)
        if len(patch) >= need:
            break
        if rings > 1 and len(patch) == len(grow_patch(adjacency, landmark, rings - 1)):
            raise SpectralError(
                f"patch around landmark {landmark} exhausted the mesh at "
                f"{len(patch)} vertices; need {need}"
            )
    if patch is None or len(patch) < need:
        raise SpectralError(
            f"patch around landmark {landmark} cannot reach {need} vertices"
        )
    lap = _laplacian_of(adjacency, patch)
    eigvals, basis = spectral_embedding(lap, tau)
    return PatchSpectrum(
        landmark=int(landmark),
        patch_vertex_indices=patch,
        rings=rings,
        eigenvalues=eigvals,
        basis=basis,
    )


# ---------------------------------------------------------------------------
# descriptors


def project_patch(spectrum: PatchSpectrum, vertices: np.ndarray) -> np.ndarray:
    """Project the patch's coordinates onto the basis.

    vertices: full-mesh (N,3) array. Returns (3*tau,) laid out as the x-channel
    block, then y, then z (each block = basis.T @ channel)."""
    v = np.asarray(vertices, dtype=np.float64)[spectrum.patch_vertex_indices]
    omega = spectrum.basis.T @ v  # (tau, 3)
    return omega.T.reshape(-1)  # x block, y block, z block


def mesh_features(vertices: np.ndarray, spectra: list) -> np.ndarray:
    """Concatenated patch descriptors over all landmarks, in listed order."""
    return np.concatenate([project_patch(s, vertices) for s in spectra])


# ---------------------------------------------------------------------------
# linear soft-margin SVM (dual coordinate descent)


def svm_objective(weights, bias, features, labels, C) -> float:
    """Primal objective 0.5*(||w||^2 + b^2) + C * sum hinge.

    The bias is folded into the weight vector through a constant feature and
    regularized with it; the solver and any oracle must share this objective.
    """
    w = np.asarray(weights, float)
    y = np.asarray(labels, float)
    margins = y * (features @ w + bias)
    hinge = np.maximum(0.0, 1.0 - margins)
    return 0.5 * (w @ w + bias * bias) + C * hinge.sum()


def train_svm(
    features: np.ndarray,
    labels: np.ndarray,
    C: float = 1.0,
    max_epochs: int = 1000,
    tol: float = 1e-10,
    seed: int = 0,
):
    """Dual coordinate descent for the L1-loss linear SVM.

    labels: {0,1} or {-1,+1}. Returns (weights, bias, history) where history
    is the per-epoch negated dual objective, monotone nonincreasing by
    construction (each coordinate update increases the dual).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).copy()
    y[y == 0] = -1.0
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise SpectralError("labels must be binary")
    if C <= 0:
        raise SpectralError("C must be positive")
    n, d = x.shape
    aug = np.concatenate([x, np.ones((n, 1))], axis=1)
    qdiag = np.einsum("ij,ij->i", aug, aug)
    alpha = np.zeros(n)
    w = np.zeros(d + 1)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(max_epochs):
        worst = 0.0
        for i in rng.permutation(n):
            g = y[i] * (aug[i] @ w) - 1.0
            if alpha[i] <= 0.0:
                pg = min(g, 0.0)
            elif alpha[i] >= C:
                pg = max(g, 0.0)
            else:
                pg = g
            worst = max(worst, abs(pg))
            if pg != 0.0:
                old = alpha[i]
                alpha[i] = min(max(old - g / qdiag[i], 0.0), C)
                delta = alpha[i] - old
                if delta != 0.0:
                    w = w + delta * y[i] * aug[i]
        history.append(0.5 * (w @ w) - alpha.sum())
        if worst < tol:
            break
    return w[:d].copy(), float(w[d]), history


def train_au_svm(
    au_id: int, features, labels, C: float = 1.0, seed: int = 0,
    standardize: bool = True,
) -> AuClassifier:
    """Linear AU classifier over patch descriptors.

    Columns are standardized for the solver and the learned hyperplane is
    folded back to raw feature space afterwards, so the stored classifier
    stays a plain linear function of the descriptors. Without this, the
    constant geometry component shared by every mesh dominates the Gram
    diagonal and coordinate descent crawls.
    """
    x = np.asarray(features, dtype=np.float64)
    if standardize:
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd < 1e-12 * max(1.0, float(np.abs(x).max())), 1.0, sd)
        w_s, bias_s, _ = train_svm((x - mu) / sd, labels, C=C, seed=seed)
        weights = w_s / sd
        bias = float(bias_s - float(w_s @ (mu / sd)))
    else:
        weights, bias, _ = train_svm(x, labels, C=C, seed=seed)
    return AuClassifier(au_id=int(au_id), weights=weights, bias=bias, C=float(C))


def decision_values(features: np.ndarray, classifiers: list) -> np.ndarray:
    f = np.atleast_2d(np.asarray(features, float))
    return np.stack([f @ c.weights + c.bias for c in classifiers], axis=1)


def detect_aus(vertices: np.ndarray, spectra: list, classifiers: list) -> np.ndarray:
    """Binary AU vector for one mesh's coordinates: 1 where the decision value
    is strictly positive."""
    feats = mesh_features(vertices, spectra)
    vals = decision_values(feats[None, :], classifiers)[0]
    return (vals > 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# bank persistence (text)


def save_bank(path: str, spectra: list, classifiers: list) -> None:
    taus = {s.tau for s in spectra}
    if len(taus) != 1:
        raise SpectralError("all patch spectra must share one tau")
    tau = taus.pop()
    lines = [
        BANK_FORMAT,
        f"layout {FEATURE_LAYOUT}",
        f"tau {tau}",
        "landmarks " + " ".join(str(s.landmark) for s in spectra),
    ]
    for s in spectra:
        lines.append(
            f"patch {s.landmark} rings {s.rings} vertices "
            + " ".join(str(int(v)) for v in s.patch_vertex_indices)
        )
        lines.append("eigenvalues " + " ".join("%.17g" % e for e in s.eigenvalues))
        for j in range(tau):
            lines.append("basis " + " ".join("%.17g" % b for b in s.basis[:, j]))
    for c in classifiers:
        lines.append(
            f"au {c.au_id} C {'%.17g' % c.C} bias {'%.17g' % c.bias} "
            + " ".join("%.17g" % w for w in c.weights)
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_bank(path: str):
    """Returns (spectra, classifiers)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != BANK_FORMAT:
        raise SpectralError(f"{path}: not a recognized AU bank file")
    tau = None
    spectra: list = []
    classifiers: list = []
    i = 1
    current = None
    basis_rows: list = []

    def finish_patch():
        nonlocal current, basis_rows
        if current is not None:
            landmark, rings, verts, eigvals = current
            basis = np.array(basis_rows).T  # rows were columns
            spectra.append(
                PatchSpectrum(
                    landmark=landmark,
                    patch_vertex_indices=np.array(verts, dtype=np.int64),
                    rings=rings,
                    eigenvalues=np.array(eigvals),
                    basis=basis,
                )
            )
        current = None
        basis_rows = []

    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        tag = parts[0]
        if tag == "layout" or tag == "landmarks":
            continue
        if tag == "tau":
            tau = int(parts[1])
        elif tag == "patch":
            finish_patch()
            landmark = int(parts[1])
            rings = int(parts[3])
            verts = [int(v) for v in parts[5:]]
            current = (landmark, rings, verts, [])
        elif tag == "eigenvalues":
            current = (current[0], current[1], current[2], [float(x) for x in parts[1:]])
        elif tag == "basis":
            basis_rows.append([float(x) for x in parts[1:]])
        elif tag == "au":
            finish_patch()
            au_id = int(parts[1])
            c_val = float(parts[3])
            bias = float(parts[5])
            weights = np.array([float(x) for x in parts[6:]])
            classifiers.append(AuClassifier(au_id=au_id, weights=weights, bias=bias, C=c_val))
        else:
            raise SpectralError(f"{path}: unknown bank line tag {tag!r}")
    finish_patch()
    if tau is None:
        raise SpectralError(f"{path}: bank file missing tau")
    return spectra, classifiers
