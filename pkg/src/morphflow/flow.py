"""Real-NVP style normalizing flows over coefficient vectors.

A flow is a stack of affine coupling layers over a per-dimension input
standardization. Each layer keeps one contiguous half of the vector fixed,
feeds it through small scale and translation networks, and transforms the
other half as b' = b * exp(s(a)) + t(a); halves alternate per layer. The
Jacobian of a layer is triangular, so the log-determinant is the sum of the
scale outputs and the likelihood is exact.

Training minimizes mean negative log-likelihood under a standard Gaussian
base plus a weighted Frobenius norm of the composed Jacobian, with gradients
from the reverse-mode tape in `autodiff`. The Frobenius term is assembled
analytically from the per-layer blocks, so its parameter gradient is exact
without second-order differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import bundle

__all__ = [
    "FlowError",
    "DenseNet",
    "CouplingLayer",
    "Flow",
    "TrainConfig",
    "make_flow",
    "make_identity_flow",
    "forward",
    "inverse",
    "nll",
    "jacobian_matrix",
    "jacobian_frobenius",
    "dequantize",
    "train",
    "sample",
    "save_flow",
    "load_flow",
    "save_history_csv",
]

_LOG_2PI = math.log(2.0 * math.pi)


class FlowError(Exception):
    pass


class DenseNet:
    """Two hidden tanh layers of fixed width; the final affine layer starts
    at zero so a fresh network is the constant-zero map."""

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, d_in: int, d_out: int, width: int = 64, rng=None):
        if rng is None:
            self.w1 = np.zeros((d_in, width))
            self.w2 = np.zeros((width, width))
        else:
            self.w1 = rng.standard_normal((d_in, width)) / np.sqrt(d_in)
            self.w2 = rng.standard_normal((width, width)) / np.sqrt(width)
        self.b1 = np.zeros(width)
        self.b2 = np.zeros(width)
        self.w3 = np.zeros((width, d_out))
        self.b3 = np.zeros(d_out)

    def params(self) -> list:
        return [getattr(self, n) for n in self.PARAM_NAMES]

    def set_params(self, arrays) -> None:
        for name, arr in zip(self.PARAM_NAMES, arrays):
            setattr(self, name, np.asarray(arr, dtype=np.float64))

    def apply(self, x: np.ndarray) -> np.ndarray:
        h1 = np.tanh(x @ self.w1 + self.b1)
        h2 = np.tanh(h1 @ self.w2 + self.b2)
        return h2 @ self.w3 + self.b3

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        """(n, d_out, d_in) Jacobians of apply at each row of x."""
        h1 = np.tanh(x @ self.w1 + self.b1)
        h2 = np.tanh(h1 @ self.w2 + self.b2)
        j1 = (1.0 - h1 * h1)[:, :, None] * self.w1.T[None]
        j2 = np.matmul((1.0 - h2 * h2)[:, :, None] * self.w2.T[None], j1)
        return np.matmul(self.w3.T[None], j2)


@dataclass
class CouplingLayer:
    dim: int
    swap: bool
    s_net: DenseNet
    t_net: DenseNet
    scale_bound: float = 3.0

    @property
    def split(self) -> int:
        return self.dim // 2

    @property
    def a_slice(self) -> slice:
        # pass-through half
        d = self.split
        return slice(d, self.dim) if self.swap else slice(0, d)

    @property
    def b_slice(self) -> slice:
        d = self.split
        return slice(0, d) if self.swap else slice(d, self.dim)


@dataclass
class Flow:
    dim: int
    layers: list
    mean: np.ndarray = None   # standardization, applied before layer 1
    std: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.std is None:
            self.std = np.ones(self.dim)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise FlowError("standardization std must be positive")

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out.extend(layer.s_net.params())
            out.extend(layer.t_net.params())
        return out

    def set_parameters(self, arrays) -> None:
        arrays = list(arrays)
        k = 0
        for layer in self.layers:
            layer.s_net.set_params(arrays[k:k + 6])
            layer.t_net.set_params(arrays[k + 6:k + 12])
            k += 12


def make_flow(
    dim: int,
    n_layers: int = 6,
    width: int = 64,
    scale_bound: float = 3.0,
    seed: int = 0,
) -> Flow:
    if dim < 2:
        raise FlowError("coupling flows need dimension >= 2")
    if n_layers < 1:
        raise FlowError("need at least one layer")
    rng = np.random.default_rng(seed)
    d = dim // 2
    layers = []
    for k in range(n_layers):
        swap = bool(k % 2)
        n_pass = (dim - d) if swap else d
        n_out = dim - n_pass
        layers.append(
            CouplingLayer(
                dim,
                swap,
                DenseNet(n_pass, n_out, width, rng),
                DenseNet(n_pass, n_out, width, rng),
                scale_bound,
            )
        )
    return Flow(dim, layers)


def make_identity_flow(dim: int, n_layers: int = 2, width: int = 8) -> Flow:
    """All-zero networks and identity standardization: f(w) = w exactly."""
    flow = make_flow(dim, n_layers=n_layers, width=width)
    for layer in flow.layers:
        layer.s_net = DenseNet(layer.s_net.w1.shape[0], layer.s_net.b3.shape[0], width)
        layer.t_net = DenseNet(layer.t_net.w1.shape[0], layer.t_net.b3.shape[0], width)
    return flow


# ---------------------------------------------------------------------------
# numpy inference path


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise FlowError(f"non-finite values after {where}")


def _scale_values(layer: CouplingLayer, a: np.ndarray) -> np.ndarray:
    return layer.scale_bound * np.tanh(layer.s_net.apply(a))


def forward(flow: Flow, w: np.ndarray):
    """(z, logdet). Accepts a single vector or an (n, D) batch."""
    w = np.asarray(w, dtype=np.float64)
    single = w.ndim == 1
    x = np.atleast_2d(w)
    if x.shape[1] != flow.dim:
        raise FlowError(f"expected dimension {flow.dim}, got {x.shape[1]}")
    _check_finite(x, "input")
    u = (x - flow.mean) / flow.std
    logdet = np.full(x.shape[0], -np.sum(np.log(flow.std)))
    for k, layer in enumerate(flow.layers):
        a = u[:, layer.a_slice]
        b = u[:, layer.b_slice]
        s = _scale_values(layer, a)
        b = b * np.exp(s) + layer.t_net.apply(a)
        nxt = np.empty_like(u)
        nxt[:, layer.a_slice] = a
        nxt[:, layer.b_slice] = b
        u = nxt
        logdet = logdet + s.sum(axis=1)
        _check_finite(u, f"coupling layer {k}")
    if single:
        return u[0], float(logdet[0])
    return u, logdet


def inverse(flow: Flow, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    u = np.atleast_2d(z).copy()
    if u.shape[1] != flow.dim:
        raise FlowError(f"expected dimension {flow.dim}, got {u.shape[1]}")
    _check_finite(u, "input")
    for k in range(len(flow.layers) - 1, -1, -1):
        layer = flow.layers[k]
        a = u[:, layer.a_slice]
        b = u[:, layer.b_slice]
        s = _scale_values(layer, a)
        b = (b - layer.t_net.apply(a)) * np.exp(-s)
        nxt = np.empty_like(u)
        nxt[:, layer.a_slice] = a
        nxt[:, layer.b_slice] = b
        u = nxt
        _check_finite(u, f"coupling layer {k}")
    w = u * flow.std + flow.mean
    return w[0] if single else w


def nll(flow: Flow, w: np.ndarray):
    """0.5 ||z||^2 + 0.5 D log(2 pi) - logdet, per sample."""
    z, logdet = forward(flow, w)
    if z.ndim == 1:
        return float(0.5 * z @ z + 0.5 * flow.dim * _LOG_2PI - logdet)
    return 0.5 * np.sum(z * z, axis=1) + 0.5 * flow.dim * _LOG_2PI - logdet


def jacobian_matrix(flow: Flow, w: np.ndarray) -> np.ndarray:
    """Dense (D, D) Jacobian of forward at one point, composed layer by
    layer from the analytic triangular blocks."""
    w = np.asarray(w, dtype=np.float64).reshape(1, -1)
    if w.shape[1] != flow.dim:
        raise FlowError(f"expected dimension {flow.dim}, got {w.shape[1]}")
    u = (w - flow.mean) / flow.std
    jac = np.diag(1.0 / flow.std)
    for layer in flow.layers:
        a = u[:, layer.a_slice]
        b = u[:, layer.b_slice]
        raw = layer.s_net.apply(a)
        ts = np.tanh(raw)
        s = layer.scale_bound * ts
        es = np.exp(s)
        dsda = (layer.scale_bound * (1.0 - ts * ts))[:, :, None] * layer.s_net.input_jacobian(a)
        dtda = layer.t_net.input_jacobian(a)
        m = (b * es)[0][:, None] * dsda[0] + dtda[0]
        ja = jac[layer.a_slice, :]
        jb = jac[layer.b_slice, :]
        new = np.empty_like(jac)
        new[layer.a_slice, :] = ja
        new[layer.b_slice, :] = m @ ja + es[0][:, None] * jb
        jac = new
        nxt = np.empty_like(u)
        nxt[:, layer.a_slice] = a
        nxt[:, layer.b_slice] = b * es + layer.t_net.apply(a)
        u = nxt
    return jac


def jacobian_frobenius(flow: Flow, w: np.ndarray, mode: str = "composed") -> float:
    """Frobenius norm of the forward Jacobian at w; "per_layer" sums the
    per-layer norms instead of composing."""
    if mode == "composed":
        return float(np.linalg.norm(jacobian_matrix(flow, w)))
    if mode != "per_layer":
        raise FlowError(f"unknown jacobian mode {mode!r}")
    w = np.asarray(w, dtype=np.float64).reshape(1, -1)
    u = (w - flow.mean) / flow.std
    total = float(np.linalg.norm(1.0 / flow.std))
    for layer in flow.layers:
        a = u[:, layer.a_slice]
        b = u[:, layer.b_slice]
        raw = layer.s_net.apply(a)
        ts = np.tanh(raw)
        s = layer.scale_bound * ts
        es = np.exp(s)
        dsda = (layer.scale_bound * (1.0 - ts * ts))[:, :, None] * layer.s_net.input_jacobian(a)
        m = (b * es)[0][:, None] * dsda[0] + layer.t_net.input_jacobian(a)[0]
        n_pass = a.shape[1]
        total += float(np.sqrt(n_pass + np.sum(m * m) + np.sum(es * es)))
        nxt = np.empty_like(u)
        nxt[:, layer.a_slice] = a
        nxt[:, layer.b_slice] = b * es + layer.t_net.apply(a)
        u = nxt
    return total


def dequantize(w: np.ndarray, sigma_w: np.ndarray, seed: int = 0) -> np.ndarray:
    """Additive per-dimension noise uniform in [0, sqrt(sigma_w)]."""
    rng = np.random.default_rng(seed)
    return _dequantize_with(rng, np.asarray(w, dtype=np.float64), sigma_w)


def _dequantize_with(rng, w: np.ndarray, sigma_w) -> np.ndarray:
    sigma = np.broadcast_to(np.asarray(sigma_w, dtype=np.float64), w.shape[-1:])
    if np.any(sigma < 0):
        raise FlowError("dequantization variance must be nonnegative")
    return w + np.sqrt(sigma) * rng.random(w.shape)


def sample(flow: Flow, count: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, flow.dim))
    return inverse(flow, z)


# ---------------------------------------------------------------------------
# tape graphs


def _net_graph(x, params):
    """params: 6 entries (arrays or Vars) in DenseNet.PARAM_NAMES order.
    Returns (output, h1, h2) Vars for reuse in Jacobian assembly."""
    w1, b1, w2, b2, w3, b3 = params
    h1 = ad.tanh(ad.add(ad.matmul(x, w1), b1))
    h2 = ad.tanh(ad.add(ad.matmul(h1, w2), b2))
    out = ad.add(ad.matmul(h2, w3), b3)
    return out, h1, h2


def _net_input_jacobian_graph(h1, h2, params, n):
    """(n, d_out, d_in) Jacobian of the net at the forward pass that produced
    h1, h2, built from the same Vars so parameter gradients flow through."""
    w1, _, w2, _, w3, _ = params
    one = 1.0
    g1 = ad.sub(one, ad.mul(h1, h1))              # (n, H)
    g2 = ad.sub(one, ad.mul(h2, h2))
    w1t = ad.transpose(w1, (1, 0)) if isinstance(w1, ad.Var) else w1.T
    w2t = ad.transpose(w2, (1, 0)) if isinstance(w2, ad.Var) else w2.T
    w3t = ad.transpose(w3, (1, 0)) if isinstance(w3, ad.Var) else w3.T
    hh = h1.value.shape[1]
    j1 = ad.mul(ad.reshape(g1, (n, hh, 1)), w1t)  # (n, H, d_in)
    j2 = ad.matmul(ad.mul(ad.reshape(g2, (n, hh, 1)), w2t), j1)
    return ad.matmul(w3t, j2)                     # (n, d_out, d_in)


def _forward_graph(flow: Flow, x: ad.Var, layer_params, with_jacobian=False,
                   jacobian_mode="composed"):
    """Forward pass as a tape graph.

    layer_params: per layer, (s_params, t_params) with entries either Vars
    (training) or raw arrays (inputs-only differentiation). Returns
    (z, logdet (n,), fro (n,) or None).
    """
    n = x.value.shape[0]
    dim = flow.dim
    inv_std = 1.0 / flow.std
    u = ad.mul(ad.sub(x, flow.mean), inv_std)
    logdet = ad.constant(np.full(n, -np.sum(np.log(flow.std))))

    jac = None
    per_layer_fro = None
    if with_jacobian:
        if jacobian_mode == "composed":
            jac = ad.constant(np.broadcast_to(np.diag(inv_std), (n, dim, dim)).copy())
        elif jacobian_mode == "per_layer":
            per_layer_fro = ad.constant(np.full(n, float(np.linalg.norm(inv_std))))
        else:
            raise FlowError(f"unknown jacobian mode {jacobian_mode!r}")

    for layer, (s_params, t_params) in zip(flow.layers, layer_params):
        a_sl, b_sl = layer.a_slice, layer.b_slice
        a = ad.getitem(u, (slice(None), a_sl))
        b = ad.getitem(u, (slice(None), b_sl))
        raw, hs1, hs2 = _net_graph(a, s_params)
        ts = ad.tanh(raw)
        s = ad.mul(ts, layer.scale_bound)
        es = ad.exp(s)
        t, ht1, ht2 = _net_graph(a, t_params)
        b_new = ad.add(ad.mul(b, es), t)
        if layer.swap:
            u = ad.concatenate([b_new, a], axis=1)
        else:
            u = ad.concatenate([a, b_new], axis=1)
        logdet = ad.add(logdet, ad.sum_(s, axis=1))

        if with_jacobian:
            n_out = layer.dim - (a_sl.stop - a_sl.start)
            dsdraw = ad.mul(ad.sub(1.0, ad.mul(ts, ts)), layer.scale_bound)
            js = ad.mul(ad.reshape(dsdraw, (n, n_out, 1)),
                        _net_input_jacobian_graph(hs1, hs2, s_params, n))
            jt = _net_input_jacobian_graph(ht1, ht2, t_params, n)
            m = ad.add(ad.mul(ad.reshape(ad.mul(b, es), (n, n_out, 1)), js), jt)
            if jacobian_mode == "composed":
                ja = ad.getitem(jac, (slice(None), a_sl, slice(None)))
                jb = ad.getitem(jac, (slice(None), b_sl, slice(None)))
                jb_new = ad.add(ad.matmul(m, ja),
                                ad.mul(ad.reshape(es, (n, n_out, 1)), jb))
                if layer.swap:
                    jac = ad.concatenate([jb_new, ja], axis=1)
                else:
                    jac = ad.concatenate([ja, jb_new], axis=1)
            else:
                n_pass = a_sl.stop - a_sl.start
                sq = ad.add(ad.sum_(ad.mul(m, m), axis=(1, 2)),
                            ad.add(ad.sum_(ad.mul(es, es), axis=1), float(n_pass)))
                per_layer_fro = ad.add(per_layer_fro, ad.sqrt(sq))

    fro = None
    if with_jacobian:
        if jacobian_mode == "composed":
            fro = ad.sqrt(ad.sum_(ad.mul(jac, jac), axis=(1, 2)))
        else:
            fro = per_layer_fro
    return u, logdet, fro


def _inverse_graph(flow: Flow, z: ad.Var) -> ad.Var:
    """Inverse pass with parameters held constant; differentiable in z."""
    u = z
    for k in range(len(flow.layers) - 1, -1, -1):
        layer = flow.layers[k]
        a = ad.getitem(u, (slice(None), layer.a_slice))
        b = ad.getitem(u, (slice(None), layer.b_slice))
        raw, _, _ = _net_graph(a, layer.s_net.params())
        s = ad.mul(ad.tanh(raw), layer.scale_bound)
        t, _, _ = _net_graph(a, layer.t_net.params())
        b_new = ad.mul(ad.sub(b, t), ad.exp(ad.neg(s)))
        if layer.swap:
            u = ad.concatenate([b_new, a], axis=1)
        else:
            u = ad.concatenate([a, b_new], axis=1)
    return ad.add(ad.mul(u, flow.std), flow.mean)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    jacobian_weight: float = 1.0
    jacobian_mode: str = "composed"
    dequantize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise FlowError("epochs and batch size must be positive")
        if self.learning_rate <= 0:
            raise FlowError("learning rate must be positive")
        if self.jacobian_weight < 0:
            raise FlowError("jacobian weight must be nonnegative")


def _batch_loss_graph(flow, batch, pvars, config):
    n = batch.shape[0]
    x = ad.constant(batch)
    layer_params = [
        (pvars[12 * k:12 * k + 6], pvars[12 * k + 6:12 * k + 12])
        for k in range(len(flow.layers))
    ]
    want_j = config.jacobian_weight > 0
    z, logdet, fro = _forward_graph(
        flow, x, layer_params, with_jacobian=want_j, jacobian_mode=config.jacobian_mode
    )
    nll_sum = ad.add(
        ad.mul(ad.sum_(ad.mul(z, z)), 0.5),
        ad.neg(ad.sum_(logdet)),
    )
    nll_mean = ad.add(ad.mul(nll_sum, 1.0 / n), 0.5 * flow.dim * _LOG_2PI)
    if want_j:
        fro_mean = ad.mul(ad.sum_(fro), 1.0 / n)
        total = ad.add(nll_mean, ad.mul(fro_mean, config.jacobian_weight))
        return total, float(nll_mean.value), float(fro_mean.value)
    return nll_mean, float(nll_mean.value), 0.0


def train(flow: Flow, data: np.ndarray, config: TrainConfig = None):
    """Adam with cosine-decayed learning rate on mean NLL plus the weighted
    Jacobian Frobenius term. Returns (flow, history) where history rows are
    (epoch, nll, frobenius, total), averaged over each epoch's batches."""
    if config is None:
        config = TrainConfig()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != flow.dim:
        raise FlowError(f"data must be (n, {flow.dim}), got {data.shape}")
    n = data.shape[0]
    if n < 2:
        raise FlowError("training needs at least 2 samples")

    flow.mean = data.mean(axis=0)
    std = data.std(axis=0)
    flow.std = np.where(std < 1e-8, 1.0, std)
    sigma_w = data.var(axis=0, ddof=1)

    params = [p.copy() for p in flow.parameters()]
    flow.set_parameters(params)
    params = flow.parameters()
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    rng = np.random.default_rng(config.seed)
    n_batches = max(1, (n + config.batch_size - 1) // config.batch_size)
    total_steps = config.epochs * n_batches
    history = np.zeros((config.epochs, 4))
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        nll_acc = fro_acc = 0.0
        count = 0
        for bi in range(n_batches):
            idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
            if idx.size == 0:
                continue
            batch = data[idx]
            if config.dequantize:
                batch = _dequantize_with(rng, batch, sigma_w)
            pvars = [ad.Var(p) for p in params]
            loss, nll_val, fro_val = _batch_loss_graph(flow, batch, pvars, config)
            if not np.isfinite(loss.value):
                raise FlowError(f"training diverged at epoch {epoch}")
            ad.backward(loss)

            lr = config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            step += 1
            # divergence surfaces as a non-finite loss on the next batch, so
            # let an exploding update overflow quietly here
            with np.errstate(invalid="ignore", over="ignore"):
                for p, pv, ms, vs in zip(params, pvars, m_state, v_state):
                    g = pv.grad if pv.grad is not None else np.zeros_like(p)
                    ms *= beta1
                    ms += (1 - beta1) * g
                    vs *= beta2
                    vs += (1 - beta2) * g * g
                    mhat = ms / (1 - beta1 ** step)
                    vhat = vs / (1 - beta2 ** step)
                    p -= lr * mhat / (np.sqrt(vhat) + eps)
            nll_acc += nll_val * idx.size
            fro_acc += fro_val * idx.size
            count += idx.size
        nll_e = nll_acc / count
        fro_e = fro_acc / count
        history[epoch] = (epoch, nll_e, fro_e, nll_e + config.jacobian_weight * fro_e)
    return flow, history


def save_history_csv(path: str, history: np.ndarray) -> None:
    lines = ["epoch,nll,frobenius,total"]
    for row in np.asarray(history):
        lines.append(f"{int(row[0])},{row[1]:.10g},{row[2]:.10g},{row[3]:.10g}")
    from .geometry import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# persistence


def save_flow(path: str, flow: Flow, extra_meta: dict = None) -> None:
    arrays = {"mean": flow.mean, "std": flow.std}
    for k, layer in enumerate(flow.layers):
        for tag, net in (("s", layer.s_net), ("t", layer.t_net)):
            for name, arr in zip(DenseNet.PARAM_NAMES, net.params()):
                arrays[f"layer{k:02d}_{tag}_{name}"] = arr
    meta = {
        "kind": "flow",
        "dim": flow.dim,
        "n_layers": len(flow.layers),
        "swaps": [bool(l.swap) for l in flow.layers],
        "scale_bound": flow.layers[0].scale_bound if flow.layers else 3.0,
    }
    if extra_meta:
        meta["meta"] = extra_meta
    bundle.save_bundle(path, arrays, meta)


def load_flow(path: str) -> Flow:
    arrays, meta = bundle.load_bundle(path)
    if meta.get("kind") != "flow":
        raise FlowError(f"{path}: not a flow bundle")
    dim = int(meta["dim"])
    layers = []
    for k in range(int(meta["n_layers"])):
        swap = bool(meta["swaps"][k])
        s_net = DenseNet(1, 1)
        t_net = DenseNet(1, 1)
        s_net.set_params([arrays[f"layer{k:02d}_s_{n}"] for n in DenseNet.PARAM_NAMES])
        t_net.set_params([arrays[f"layer{k:02d}_t_{n}"] for n in DenseNet.PARAM_NAMES])
        layers.append(CouplingLayer(dim, swap, s_net, t_net, float(meta["scale_bound"])))
    return Flow(dim, layers, mean=arrays["mean"], std=arrays["std"])
