"""3D-3D model fitting by alternating latent-block minimization.

The energy is E(z) = gamma1 * E_verts + gamma2 * E_prior with

    E_verts = || core x2 w_id x3 w_ex - (x - mean) ||^2,   w = flow_inverse(z)
    E_prior = sum(z_id^2 / lambda_id) + sum(z_ex^2 / lambda_ex)

The target is Procrustes-aligned to the model mean first. Each outer
iteration minimizes one latent block by gradient descent with Armijo
backtracking, gradients flowing through the flow inverse on the autodiff
tape, so the energy trace is nonincreasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .bilinear import BilinearModel, encode, reconstruct
from .flow import Flow, _inverse_graph, forward, inverse
from .geometry import Mesh, procrustes_align
from .latent import LatentCode

__all__ = [
    "FittingError",
    "FitConfig",
    "FitResult",
    "energy",
    "fit",
    "per_vertex_error",
    "error_summary",
]


class FittingError(Exception):
    pass


@dataclass
class FitConfig:
    gamma1: float = 0.98
    gamma2: float = 0.02
    max_iterations: int = 30      # outer alternations
    inner_iterations: int = 20    # gradient steps per block
    tol: float = 1e-9             # stop when an outer pass improves less
    init: str = "neutral"         # neutral | zero | encode
    align: bool = True
    step_init: float = 1.0
    blocks: tuple = ("id", "ex")  # drop one to freeze that factor at init

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise FittingError("energy weights must be nonnegative")
        if abs(self.gamma1 + self.gamma2 - 1.0) > 1e-12:
            raise FittingError("gamma1 + gamma2 must equal 1")
        if self.init not in ("neutral", "zero", "encode"):
            raise FittingError(f"unknown init {self.init!r}")
        if self.max_iterations < 1 or self.inner_iterations < 1:
            raise FittingError("iteration counts must be positive")
        if not self.blocks or any(b not in ("id", "ex") for b in self.blocks):
            raise FittingError("blocks must be a nonempty subset of ('id', 'ex')")


@dataclass
class FitResult:
    z_id: LatentCode
    z_ex: LatentCode
    w_id: np.ndarray
    w_ex: np.ndarray
    reconstruction: Mesh
    aligned_target: Mesh
    per_vertex_errors: np.ndarray
    energy_trace: np.ndarray
    e_verts: float
    e_prior: float
    converged: bool


def _floored(lam: np.ndarray) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    top = float(lam.max()) if lam.size else 1.0
    return np.maximum(lam, 1e-10 * max(top, 1e-300))


def _recover_w(flows, z_id, z_ex):
    w_id = inverse(flows[0], z_id)
    w_ex = inverse(flows[1], z_ex)
    if not (np.all(np.isfinite(w_id)) and np.all(np.isfinite(w_ex))):
        raise FittingError("flow inverse produced non-finite coefficients")
    return w_id, w_ex


def energy(model: BilinearModel, flows, z_id, z_ex, target, config: FitConfig):
    """(total, e_verts, e_prior) at latent point (z_id, z_ex) for a 3N target
    vector already in model space."""
    z_id = np.asarray(z_id, dtype=np.float64).reshape(-1)
    z_ex = np.asarray(z_ex, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if z_id.shape != (model.d_id,) or z_ex.shape != (model.d_ex,):
        raise FittingError("latent dimensions do not match the model")
    if target.shape != model.mean.shape:
        raise FittingError("target length does not match the model")
    w_id, w_ex = _recover_w(flows, z_id, z_ex)
    offset = np.einsum("vab,a,b->v", model.core, w_id, w_ex, optimize=True)
    resid = offset - (target - model.mean)
    e_verts = float(resid @ resid)
    e_prior = float(np.sum(z_id * z_id / _floored(model.lambda_id))
                    + np.sum(z_ex * z_ex / _floored(model.lambda_ex)))
    return config.gamma1 * e_verts + config.gamma2 * e_prior, e_verts, e_prior


def _block_gradient(model, flows, z_id, z_ex, target, config, block):
    """Gradient of the full energy w.r.t. one latent block, through the flow
    inverse. Returns (grad, total_energy)."""
    total, _, _ = energy(model, flows, z_id, z_ex, target, config)
    if block == "id":
        flow, z_free, z_other = flows[0], z_id, z_ex
        w_other = inverse(flows[1], z_other)
        a_mat = np.einsum("vab,b->va", model.core, w_other, optimize=True)
        lam = _floored(model.lambda_id)
    else:
        flow, z_free, z_other = flows[1], z_ex, z_id
        w_other = inverse(flows[0], z_other)
        a_mat = np.einsum("vab,a->vb", model.core, w_other, optimize=True)
        lam = _floored(model.lambda_ex)

    zv = ad.Var(z_free.reshape(1, -1))
    w = _inverse_graph(flow, zv)
    recon = ad.matmul(w, a_mat.T)
    resid = ad.sub(recon, (target - model.mean))
    e_verts = ad.sum_(ad.mul(resid, resid))
    e_prior = ad.sum_(ad.mul(ad.mul(zv, zv), 1.0 / lam))
    obj = ad.add(ad.mul(e_verts, config.gamma1), ad.mul(e_prior, config.gamma2))
    ad.backward(obj)
    return zv.grad.reshape(-1), total


def fit(model: BilinearModel, flows, target: Mesh, config: FitConfig = None,
        neutral_w_ex: np.ndarray = None) -> FitResult:
    """Alternating block minimization of the fitting energy.

    flows: (identity Flow, expression Flow). init "neutral" starts z_ex at
    the flow image of neutral_w_ex (default: the first expression basis row,
    which is the neutral expression's training coefficient when the bank puts
    neutral first) and z_id at zero; "encode" least-squares-projects the
    target first; "zero" starts both blocks at zero.
    """
    if config is None:
        config = FitConfig()
    flow_id, flow_ex = flows
    if not isinstance(flow_id, Flow) or not isinstance(flow_ex, Flow):
        raise FittingError("flows must be (identity Flow, expression Flow)")
    if flow_id.dim != model.d_id or flow_ex.dim != model.d_ex:
        raise FittingError("flow dimensions do not match the model ranks")
    n = model.n_vertices
    if target.n_vertices != n:
        raise FittingError(
            f"target has {target.n_vertices} vertices, model expects {n}"
        )

    mean_pts = model.mean.reshape(n, 3)
    if config.align:
        aligned, _ = procrustes_align(target, mean_pts, allow_scale=False)
    else:
        aligned = target
    x = aligned.vertices.reshape(-1)

    # initialization
    if neutral_w_ex is None:
        neutral_w_ex = model.u_ex[0]
    if config.init == "zero":
        z_id = np.zeros(model.d_id)
        z_ex = np.zeros(model.d_ex)
    elif config.init == "neutral":
        z_id = np.zeros(model.d_id)
        z_ex, _ = _forward_point(flow_ex, neutral_w_ex)
    else:  # encode
        enc = encode(model, x, iterations=30)
        z_id, _ = _forward_point(flow_id, enc.w_id)
        z_ex, _ = _forward_point(flow_ex, enc.w_ex)

    total, _, _ = energy(model, (flow_id, flow_ex), z_id, z_ex, x, config)
    trace = [total]
    steps = {"id": config.step_init, "ex": config.step_init}
    converged = False
    for _ in range(config.max_iterations):
        start = trace[-1]
        for block in config.blocks:
            z_free = z_id if block == "id" else z_ex
            for _ in range(config.inner_iterations):
                grad, current = _block_gradient(
                    model, (flow_id, flow_ex), z_id, z_ex, x, config, block
                )
                gnorm_sq = float(grad @ grad)
                if gnorm_sq == 0.0:
                    break
                s = steps[block]
                accepted = False
                while s > 1e-14:
                    candidate = z_free - s * grad
                    try:
                        cand_total, _, _ = energy(
                            model, (flow_id, flow_ex),
                            candidate if block == "id" else z_id,
                            candidate if block == "ex" else z_ex,
                            x, config,
                        )
                    except FittingError:
                        cand_total = np.inf
                    if np.isfinite(cand_total) and cand_total <= current - 1e-4 * s * gnorm_sq:
                        accepted = True
                        break
                    s *= 0.5
                if not accepted:
                    break
                steps[block] = min(s * 1.5, 1e6)
                if block == "id":
                    z_id = candidate
                    z_free = z_id
                else:
                    z_ex = candidate
                    z_free = z_ex
                trace.append(cand_total)
        if start - trace[-1] < config.tol:
            converged = True
            break

    total, e_verts, e_prior = energy(model, (flow_id, flow_ex), z_id, z_ex, x, config)
    w_id, w_ex = _recover_w((flow_id, flow_ex), z_id, z_ex)
    recon_vec = reconstruct(model, w_id, w_ex)
    recon = Mesh(recon_vec.reshape(n, 3), aligned.faces)
    return FitResult(
        z_id=LatentCode(z_id, "identity", "z"),
        z_ex=LatentCode(z_ex, "expression", "z"),
        w_id=w_id,
        w_ex=w_ex,
        reconstruction=recon,
        aligned_target=aligned,
        per_vertex_errors=per_vertex_error(recon, aligned),
        energy_trace=np.array(trace),
        e_verts=e_verts,
        e_prior=e_prior,
        converged=converged,
    )


def _forward_point(flow: Flow, w: np.ndarray):
    z, logdet = forward(flow, np.asarray(w, dtype=np.float64))
    return z, logdet


def per_vertex_error(reconstruction: Mesh, target: Mesh) -> np.ndarray:
    """Euclidean distance per corresponding vertex; no alignment applied."""
    if reconstruction.n_vertices != target.n_vertices:
        raise FittingError("vertex counts differ")
    return np.linalg.norm(reconstruction.vertices - target.vertices, axis=1)


def error_summary(errors: np.ndarray) -> dict:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise FittingError("empty error vector")
    return {
        "mean": float(errors.mean()),
        "std": float(errors.std()),
        "max": float(errors.max()),
        "rms": float(np.sqrt(np.mean(errors * errors))),
    }
