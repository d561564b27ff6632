"""Identity/expression tensor assembly and HOSVD bilinear factorization.

A complete identity-by-expression grid of meshes on one topology is stacked
into a 3-mode tensor (vertex coordinates, identities, expressions). Higher-
order SVD of the grand-mean-centered tensor gives orthonormal identity and
expression bases plus a core tensor kept uncompressed along the vertex mode,
so a face is the bilinear contraction

    x = core x2 w_id x3 w_ex + mean

Per-mode eigenvalue vectors (singular values squared over count minus one)
feed the Gaussian prior used downstream during fitting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bundle
from .geometry import Mesh, SymmetryMap, mirror_mesh, symmetrize_mesh

__all__ = [
    "BilinearError",
    "ShapeTensor",
    "BilinearModel",
    "EncodeResult",
    "unfold",
    "fold",
    "assemble_tensor",
    "hosvd",
    "reconstruct",
    "encode",
    "variance_truncation",
    "parallel_analysis",
    "save_model",
    "load_model",
]


class BilinearError(Exception):
    pass


@dataclass
class ShapeTensor:
    """data: (3N, n_id_total, n_ex); mode-1 fibers are vertex coordinates
    interleaved as (x1, y1, z1, x2, y2, z2, ...)."""

    data: np.ndarray
    identity_labels: list
    expression_labels: list

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise BilinearError(f"tensor must be 3-mode, got shape {self.data.shape}")
        if self.data.shape[0] % 3 != 0:
            raise BilinearError("first mode must be 3N")
        if self.data.shape[1] != len(self.identity_labels):
            raise BilinearError("identity label count does not match tensor")
        if self.data.shape[2] != len(self.expression_labels):
            raise BilinearError("expression label count does not match tensor")

    @property
    def n_vertices(self) -> int:
        return self.data.shape[0] // 3


@dataclass
class BilinearModel:
    mean: np.ndarray          # (3N,)
    core: np.ndarray          # (3N, d_id, d_ex)
    u_id: np.ndarray          # (n_id_total, d_id), orthonormal columns
    u_ex: np.ndarray          # (n_ex, d_ex), orthonormal columns
    lambda_id: np.ndarray     # (d_id,), nonnegative descending
    lambda_ex: np.ndarray     # (d_ex,)
    meta: dict = field(default_factory=dict)

    @property
    def d_id(self) -> int:
        return self.core.shape[1]

    @property
    def d_ex(self) -> int:
        return self.core.shape[2]

    @property
    def n_vertices(self) -> int:
        return self.mean.shape[0] // 3


def unfold(tensor: np.ndarray, mode: int) -> np.ndarray:
    """Mode-n unfolding with column-major fiber order.

    Mode-n fibers become columns; the remaining indices are enumerated with
    the earliest original index varying fastest. Worked example for a 2x2x2
    tensor T with T[i,j,k] = 4i + 2j + k (values 0..7):

        unfold(T, 0) = [[0, 2, 1, 3],      columns ordered (j,k) =
                        [4, 6, 5, 7]]      (0,0), (1,0), (0,1), (1,1)

        unfold(T, 1) = [[0, 4, 1, 5],      columns ordered (i,k)
                        [2, 6, 3, 7]]

        unfold(T, 2) = [[0, 4, 2, 6],      columns ordered (i,j)
                        [1, 5, 3, 7]]
    """
    t = np.asarray(tensor)
    if not 0 <= mode < t.ndim:
        raise BilinearError(f"mode {mode} out of range for {t.ndim}-mode tensor")
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1), order="F")


def fold(matrix: np.ndarray, mode: int, shape: tuple) -> np.ndarray:
    """Inverse of unfold for the given full tensor shape."""
    shape = tuple(shape)
    if not 0 <= mode < len(shape):
        raise BilinearError(f"mode {mode} out of range")
    rest = shape[:mode] + shape[mode + 1:]
    t = np.reshape(np.asarray(matrix), (shape[mode],) + rest, order="F")
    return np.moveaxis(t, 0, mode)


def assemble_tensor(
    meshes: dict,
    identity_order,
    expression_order,
    sym: SymmetryMap = None,
    augment: bool = False,
) -> ShapeTensor:
    """Stack a complete {(identity, expression): Mesh} grid into a tensor.

    With augment, the identity mode triples: all originals first, then the
    mirrored version of each, then the symmetrized version, so provenance is
    recoverable from position. Mirroring and symmetrizing need `sym`.
    """
    identity_order = list(identity_order)
    expression_order = list(expression_order)
    missing = [
        (i, e)
        for i in identity_order
        for e in expression_order
        if (i, e) not in meshes
    ]
    if missing:
        shown = ", ".join(f"({i}, {e})" for i, e in missing[:10])
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        raise BilinearError(f"incomplete grid, missing cells: {shown}{more}")
    if augment and sym is None:
        raise BilinearError("augmentation requires a symmetry map")

    variants = [("", lambda m: m)]
    if augment:
        variants += [
            ("+mirror", lambda m: mirror_mesh(m, sym)),
            ("+sym", lambda m: symmetrize_mesh(m, sym)),
        ]

    first = meshes[(identity_order[0], expression_order[0])]
    n = first.n_vertices
    columns = []
    id_labels = []
    for suffix, transform in variants:
        for ident in identity_order:
            id_labels.append(f"{ident}{suffix}")
            for expr in expression_order:
                mesh = meshes[(ident, expr)]
                if mesh.n_vertices != n:
                    raise BilinearError(
                        f"grid cell ({ident}, {expr}) has {mesh.n_vertices} "
                        f"vertices, expected {n}"
                    )
                columns.append(transform(mesh).vertices.reshape(-1))

    n_id = len(id_labels)
    n_ex = len(expression_order)
    data = np.empty((3 * n, n_id, n_ex))
    k = 0
    for i in range(n_id):
        for e in range(n_ex):
            data[:, i, e] = columns[k]
            k += 1
    return ShapeTensor(data, id_labels, [str(e) for e in expression_order])


def _fix_signs(u: np.ndarray) -> np.ndarray:
    out = u.copy()
    for j in range(out.shape[1]):
        k = int(np.argmax(np.abs(out[:, j])))
        if out[k, j] < 0:
            out[:, j] = -out[:, j]
    return out


def _mode_basis(unfolding: np.ndarray, rank: int):
    # left singular vectors via the small-side Gram matrix
    gram = unfolding @ unfolding.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = _fix_signs(evecs[:, order])
    return evecs[:, :rank], evals


def hosvd(tensor: ShapeTensor, d_id: int = None, d_ex: int = None) -> BilinearModel:
    """Factorize the grand-mean-centered tensor. The vertex mode stays
    uncompressed: core = centered data contracted with the identity and
    expression bases."""
    data = tensor.data
    _, n_id, n_ex = data.shape
    if d_id is None:
        d_id = n_id
    if d_ex is None:
        d_ex = n_ex
    if not 1 <= d_id <= n_id:
        raise BilinearError(f"identity rank {d_id} outside [1, {n_id}]")
    if not 1 <= d_ex <= n_ex:
        raise BilinearError(f"expression rank {d_ex} outside [1, {n_ex}]")

    mean = data.mean(axis=(1, 2))
    centered = data - mean[:, None, None]

    u_id, sq_id = _mode_basis(unfold(centered, 1), d_id)
    u_ex, sq_ex = _mode_basis(unfold(centered, 2), d_ex)
    core = np.einsum("vie,ia,eb->vab", centered, u_id, u_ex, optimize=True)

    lambda_id = sq_id[:d_id] / max(n_id - 1, 1)
    lambda_ex = sq_ex[:d_ex] / max(n_ex - 1, 1)
    return BilinearModel(
        mean=mean,
        core=core,
        u_id=u_id,
        u_ex=u_ex,
        lambda_id=lambda_id,
        lambda_ex=lambda_ex,
        meta={
            "identity_labels": list(tensor.identity_labels),
            "expression_labels": list(tensor.expression_labels),
        },
    )


def reconstruct(model: BilinearModel, w_id: np.ndarray, w_ex: np.ndarray) -> np.ndarray:
    """mean + core x2 w_id x3 w_ex, returned as a 3N-vector."""
    w_id = np.asarray(w_id, dtype=np.float64)
    w_ex = np.asarray(w_ex, dtype=np.float64)
    if w_id.shape != (model.d_id,):
        raise BilinearError(f"w_id must have shape ({model.d_id},), got {w_id.shape}")
    if w_ex.shape != (model.d_ex,):
        raise BilinearError(f"w_ex must have shape ({model.d_ex},), got {w_ex.shape}")
    return model.mean + np.einsum("vab,a,b->v", model.core, w_id, w_ex, optimize=True)


@dataclass
class EncodeResult:
    w_id: np.ndarray
    w_ex: np.ndarray
    residuals: np.ndarray   # objective after each least-squares half-step
    converged: bool


def _solve_half(core: np.ndarray, fixed: np.ndarray, target: np.ndarray, fix_ex: bool):
    if fix_ex:
        a = np.einsum("vab,b->va", core, fixed, optimize=True)
    else:
        a = np.einsum("vab,a->vb", core, fixed, optimize=True)
    if np.linalg.norm(a) < 1e-14:
        raise BilinearError("fixed factor annihilates the core (singular system)")
    sol, *_ = np.linalg.lstsq(a, target, rcond=None)
    return sol, float(np.linalg.norm(a @ sol - target))


def encode(
    model: BilinearModel,
    face: np.ndarray,
    fix_expression: np.ndarray = None,
    fix_identity: np.ndarray = None,
    iterations: int = 50,
    tol: float = 1e-10,
) -> EncodeResult:
    """Least-squares coefficients for a face.

    With one factor supplied the other is solved in a single linear
    least-squares step. With neither, alternate between the two half-steps
    until the residual change drops below tol; the residual sequence is
    nonincreasing because each half-step is an exact minimizer.
    """
    face = np.asarray(face, dtype=np.float64).reshape(-1)
    if face.shape != model.mean.shape:
        raise BilinearError(f"face must have shape {model.mean.shape}, got {face.shape}")
    target = face - model.mean

    if fix_expression is not None and fix_identity is not None:
        raise BilinearError("fix at most one factor")
    if fix_expression is not None:
        w_ex = np.asarray(fix_expression, dtype=np.float64)
        w_id, r = _solve_half(model.core, w_ex, target, fix_ex=True)
        return EncodeResult(w_id, w_ex, np.array([r]), True)
    if fix_identity is not None:
        w_id = np.asarray(fix_identity, dtype=np.float64)
        w_ex, r = _solve_half(model.core, w_id, target, fix_ex=False)
        return EncodeResult(w_id, w_ex, np.array([r]), True)

    # alternate, starting from the mean training expression coefficient
    w_ex = model.u_ex.mean(axis=0)
    if np.linalg.norm(w_ex) < 1e-12:
        w_ex = np.zeros(model.d_ex)
        w_ex[0] = 1.0
    residuals = []
    w_id = np.zeros(model.d_id)
    converged = False
    for _ in range(iterations):
        w_id, r1 = _solve_half(model.core, w_ex, target, fix_ex=True)
        residuals.append(r1)
        w_ex, r2 = _solve_half(model.core, w_id, target, fix_ex=False)
        residuals.append(r2)
        if len(residuals) >= 4 and residuals[-3] - residuals[-1] < tol:
            converged = True
            break
    return EncodeResult(w_id, w_ex, np.array(residuals), converged)


def variance_truncation(singular_values: np.ndarray, fraction: float = 0.95) -> int:
    """Smallest rank whose leading squared singular values reach the given
    fraction of the total. Pass singular values, not variances."""
    s = np.asarray(singular_values, dtype=np.float64)
    if s.size == 0:
        raise BilinearError("empty spectrum")
    if not 0.0 < fraction <= 1.0:
        raise BilinearError(f"fraction must be in (0, 1], got {fraction}")
    energy = s * s
    total = energy.sum()
    if total == 0.0:
        return 1
    ratio = np.cumsum(energy) / total
    return int(np.searchsorted(ratio, fraction - 1e-12) + 1)


def parallel_analysis(
    data: np.ndarray,
    n_permutations: int = 100,
    seed: int = 0,
    percentile: float = 95.0,
) -> int:
    """Count of leading sample-covariance eigenvalues exceeding the given
    percentile of eigenvalues from column-wise independently permuted copies.
    The count stops at the first non-significant component."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise BilinearError(f"data must be 2-D, got shape {x.shape}")
    n, p = x.shape
    if n < 3:
        raise BilinearError("parallel analysis needs at least 3 samples")

    def eigvals(mat):
        c = np.cov(mat, rowvar=False, ddof=1)
        c = np.atleast_2d(c)
        return np.sort(np.linalg.eigvalsh(c))[::-1]

    observed = eigvals(x)
    rng = np.random.default_rng(seed)
    perm_eigs = np.empty((n_permutations, p))
    for k in range(n_permutations):
        shuffled = np.column_stack([rng.permutation(x[:, j]) for j in range(p)])
        perm_eigs[k] = eigvals(shuffled)
    thresholds = np.percentile(perm_eigs, percentile, axis=0)

    count = 0
    for lam, thr in zip(observed, thresholds):
        if lam > thr:
            count += 1
        else:
            break
    return count


# ---------------------------------------------------------------------------
# persistence


def save_model(path: str, model: BilinearModel) -> None:
    arrays = {
        "mean": model.mean,
        "core": model.core,
        "u_id": model.u_id,
        "u_ex": model.u_ex,
        "lambda_id": model.lambda_id,
        "lambda_ex": model.lambda_ex,
    }
    bundle.save_bundle(path, arrays, {"kind": "bilinear_model", "meta": model.meta})


def load_model(path: str) -> BilinearModel:
    arrays, meta = bundle.load_bundle(path)
    if meta.get("kind") != "bilinear_model":
        raise BilinearError(f"{path}: not a bilinear model bundle")
    return BilinearModel(
        mean=arrays["mean"],
        core=arrays["core"],
        u_id=arrays["u_id"],
        u_ex=arrays["u_ex"],
        lambda_id=arrays["lambda_id"],
        lambda_ex=arrays["lambda_ex"],
        meta=meta.get("meta", {}),
    )
