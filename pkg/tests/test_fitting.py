import numpy as np
import pytest

from morphflow.bilinear import BilinearModel, reconstruct
from morphflow.fitting import (
    FitConfig,
    FittingError,
    energy,
    fit,
    per_vertex_error,
    _block_gradient,
)
from morphflow.flow import forward, inverse, make_flow, make_identity_flow
from morphflow.geometry import Mesh
from morphflow.latent import chi2_critical


# --- independent oracles, written before the implementation under test -----


def dense_energy_oracle(model, flows, z_id, z_ex, target, gamma1, gamma2):
    """Loop-based energy: no einsum, no shared helpers."""
    w_id = inverse(flows[0], np.asarray(z_id, float))
    w_ex = inverse(flows[1], np.asarray(z_ex, float))
    n3 = model.mean.shape[0]
    offset = np.zeros(n3)
    for v in range(n3):
        acc = 0.0
        for a in range(model.d_id):
            for b in range(model.d_ex):
                acc += model.core[v, a, b] * w_id[a] * w_ex[b]
        offset[v] = acc
    resid = offset - (np.asarray(target, float) - model.mean)
    e_verts = float(np.dot(resid, resid))

    def prior_term(z, lam):
        lam = np.asarray(lam, float)
        floor = 1e-10 * lam.max()
        out = 0.0
        for zi, li in zip(z, lam):
            out += zi * zi / max(li, floor)
        return out

    e_prior = prior_term(z_id, model.lambda_id) + prior_term(z_ex, model.lambda_ex)
    return gamma1 * e_verts + gamma2 * e_prior, e_verts, e_prior


def fd_energy_gradient(model, flows, z_id, z_ex, target, config, block, h=1e-6):
    """Central finite differences of the full energy in one latent block."""
    base = np.array(z_id if block == "id" else z_ex, float)
    grad = np.zeros_like(base)
    for i in range(base.size):
        for sign in (+1, -1):
            z = base.copy()
            z[i] += sign * h
            if block == "id":
                e = energy(model, flows, z, z_ex, target, config)[0]
            else:
                e = energy(model, flows, z_id, z, target, config)[0]
            grad[i] += sign * e
    return grad / (2 * h)


def als_oracle(model, target, w_ex0, iterations=200):
    """Exact alternating least squares on the raw coefficients (the latent
    problem with identity flows and no prior). Returns final E_verts."""
    rhs = np.asarray(target, float) - model.mean
    w_ex = np.array(w_ex0, float)
    w_id = np.zeros(model.d_id)
    for _ in range(iterations):
        a_id = np.einsum("vab,b->va", model.core, w_ex)
        w_id = np.linalg.lstsq(a_id, rhs, rcond=None)[0]
        a_ex = np.einsum("vab,a->vb", model.core, w_id)
        w_ex = np.linalg.lstsq(a_ex, rhs, rcond=None)[0]
    r = np.einsum("vab,a,b->v", model.core, w_id, w_ex) - rhs
    return float(r @ r)


# --- fixtures ---------------------------------------------------------------


def make_model(rng, n_vertices=12, d_id=3, d_ex=2):
    mean = rng.normal(size=3 * n_vertices)
    core = rng.normal(size=(3 * n_vertices, d_id, d_ex))
    u_id = np.linalg.qr(rng.normal(size=(d_id + 2, d_id)))[0]
    u_ex = np.linalg.qr(rng.normal(size=(d_ex + 2, d_ex)))[0]
    lambda_id = np.linspace(2.0, 0.5, d_id)
    lambda_ex = np.linspace(1.5, 0.75, d_ex)
    return BilinearModel(mean, core, u_id, u_ex, lambda_id, lambda_ex)


def identity_flows(model):
    return make_identity_flow(model.d_id), make_identity_flow(model.d_ex)


def randomized_flows(model, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for dim in (model.d_id, model.d_ex):
        flow = make_flow(dim, n_layers=2, width=6, seed=seed)
        flow.set_parameters(
            [rng.normal(scale=0.3, size=p.shape) for p in flow.parameters()]
        )
        out.append(flow)
    return tuple(out)


def mesh_from_vector(vec, faces=None):
    pts = np.asarray(vec, float).reshape(-1, 3)
    if faces is None:
        faces = [[0, 1, 2], [1, 2, 3], [2, 3, 4]]
    return Mesh(pts, faces)


# --- config -----------------------------------------------------------------


def test_config_weights_must_sum_to_one():
    FitConfig(gamma1=0.98, gamma2=0.02)
    FitConfig(gamma1=1.0, gamma2=0.0)
    with pytest.raises(FittingError):
        FitConfig(gamma1=0.9, gamma2=0.2)
    with pytest.raises(FittingError):
        FitConfig(gamma1=1.2, gamma2=-0.2)
    with pytest.raises(FittingError):
        FitConfig(init="random")
    with pytest.raises(FittingError):
        FitConfig(max_iterations=0)


def test_config_defaults():
    config = FitConfig()
    assert config.gamma1 == 0.98
    assert config.gamma2 == 0.02
    assert config.init == "neutral"


# --- energy -----------------------------------------------------------------


def test_energy_zero_at_mean_with_zero_latents():
    rng = np.random.default_rng(0)
    model = make_model(rng)
    flows = identity_flows(model)
    config = FitConfig()
    total, e_verts, e_prior = energy(
        model, flows, np.zeros(model.d_id), np.zeros(model.d_ex), model.mean, config
    )
    assert total == 0.0
    assert e_verts == 0.0
    assert e_prior == 0.0


def test_energy_matches_dense_oracle_identity_flows():
    rng = np.random.default_rng(1)
    model = make_model(rng)
    flows = identity_flows(model)
    config = FitConfig()
    for trial in range(5):
        z_id = rng.normal(size=model.d_id)
        z_ex = rng.normal(size=model.d_ex)
        target = rng.normal(size=model.mean.shape)
        got = energy(model, flows, z_id, z_ex, target, config)
        want = dense_energy_oracle(model, flows, z_id, z_ex, target, 0.98, 0.02)
        for g, w in zip(got, want):
            assert abs(g - w) <= 1e-10 * max(1.0, abs(w))


def test_energy_matches_dense_oracle_affine_flow():
    # standardization only: inverse(z) = z * std + mean
    rng = np.random.default_rng(2)
    model = make_model(rng)
    f_id, f_ex = identity_flows(model)
    f_id.mean = np.array([0.3, -0.2, 0.1])
    f_id.std = np.array([1.5, 0.5, 2.0])
    config = FitConfig()
    z_id = rng.normal(size=model.d_id)
    z_ex = rng.normal(size=model.d_ex)
    target = rng.normal(size=model.mean.shape)
    got = energy(model, (f_id, f_ex), z_id, z_ex, target, config)
    want = dense_energy_oracle(model, (f_id, f_ex), z_id, z_ex, target, 0.98, 0.02)
    for g, w in zip(got, want):
        assert abs(g - w) <= 1e-10 * max(1.0, abs(w))


def test_energy_pure_vertex_term_when_gamma2_zero():
    rng = np.random.default_rng(3)
    model = make_model(rng)
    flows = identity_flows(model)
    config = FitConfig(gamma1=1.0, gamma2=0.0)
    z_id = rng.normal(size=model.d_id)
    z_ex = rng.normal(size=model.d_ex)
    target = rng.normal(size=model.mean.shape)
    total, e_verts, _ = energy(model, flows, z_id, z_ex, target, config)
    assert total == pytest.approx(e_verts, rel=0, abs=0)


def test_energy_lambda_floor_keeps_prior_finite():
    rng = np.random.default_rng(4)
    model = make_model(rng)
    model.lambda_id[-1] = 0.0
    flows = identity_flows(model)
    config = FitConfig()
    z_id = np.ones(model.d_id)
    z_ex = np.zeros(model.d_ex)
    total, _, e_prior = energy(model, flows, z_id, z_ex, model.mean, config)
    assert np.isfinite(total)
    floor = 1e-10 * model.lambda_id.max()
    want = np.sum(1.0 / np.maximum(model.lambda_id, floor))
    assert e_prior == pytest.approx(want, rel=1e-12)


def test_energy_shape_validation():
    rng = np.random.default_rng(5)
    model = make_model(rng)
    flows = identity_flows(model)
    config = FitConfig()
    with pytest.raises(FittingError):
        energy(model, flows, np.zeros(model.d_id + 1), np.zeros(model.d_ex),
               model.mean, config)
    with pytest.raises(FittingError):
        energy(model, flows, np.zeros(model.d_id), np.zeros(model.d_ex),
               model.mean[:-3], config)


# --- gradients ---------------------------------------------------------------


def test_block_gradient_matches_fd_identity_flows():
    rng = np.random.default_rng(6)
    model = make_model(rng)
    flows = identity_flows(model)
    config = FitConfig()
    z_id = rng.normal(size=model.d_id)
    z_ex = rng.normal(size=model.d_ex)
    target = rng.normal(size=model.mean.shape)
    for block in ("id", "ex"):
        grad, total = _block_gradient(model, flows, z_id, z_ex, target, config, block)
        want = fd_energy_gradient(model, flows, z_id, z_ex, target, config, block)
        assert np.linalg.norm(grad - want) <= 1e-6 * max(1.0, np.linalg.norm(want))
        ref = energy(model, flows, z_id, z_ex, target, config)[0]
        assert total == pytest.approx(ref, rel=1e-12)


def test_block_gradient_matches_fd_through_real_flows():
    rng = np.random.default_rng(7)
    model = make_model(rng)
    flows = randomized_flows(model, seed=11)
    config = FitConfig()
    z_id = rng.normal(size=model.d_id) * 0.5
    z_ex = rng.normal(size=model.d_ex) * 0.5
    target = rng.normal(size=model.mean.shape)
    for block in ("id", "ex"):
        grad, _ = _block_gradient(model, flows, z_id, z_ex, target, config, block)
        want = fd_energy_gradient(model, flows, z_id, z_ex, target, config, block, h=1e-5)
        assert np.linalg.norm(grad - want) <= 1e-4 * max(1.0, np.linalg.norm(want))


# --- fit ---------------------------------------------------------------------


def fit_config(**kw):
    base = dict(gamma1=1.0 - 1e-6, gamma2=1e-6, max_iterations=40,
                inner_iterations=30, align=False)
    base.update(kw)
    return FitConfig(**base)


def test_fit_self_consistency_identity_flows():
    rng = np.random.default_rng(8)
    model = make_model(rng, n_vertices=15)
    flows = identity_flows(model)
    w_id = rng.normal(size=model.d_id)
    w_ex = rng.normal(size=model.d_ex)
    target = mesh_from_vector(reconstruct(model, w_id, w_ex))
    result = fit(model, flows, target, fit_config())
    from morphflow.geometry import bbox_diagonal

    rms = float(np.sqrt(np.mean(result.per_vertex_errors ** 2)))
    assert rms < 1e-3 * bbox_diagonal(target)
    assert result.converged
    assert result.e_verts < 1e-6


def test_fit_recovers_mean_target():
    rng = np.random.default_rng(9)
    model = make_model(rng)
    flows = identity_flows(model)
    target = mesh_from_vector(model.mean)
    result = fit(model, flows, target, fit_config(gamma1=0.98, gamma2=0.02))
    assert result.e_verts < 1e-8
    assert np.linalg.norm(result.z_id.values) < 1e-4
    assert np.linalg.norm(result.z_ex.values) < 1e-4


def test_fit_alignment_recovers_moved_mean():
    rng = np.random.default_rng(10)
    model = make_model(rng)
    flows = identity_flows(model)
    # rotate about z and translate; alignment must undo this exactly
    theta = 0.7
    rot = np.array([
        [np.cos(theta), -np.sin(theta), 0.0],
        [np.sin(theta), np.cos(theta), 0.0],
        [0.0, 0.0, 1.0],
    ])
    pts = model.mean.reshape(-1, 3) @ rot.T + np.array([0.4, -1.0, 2.5])
    target = Mesh(pts, [[0, 1, 2], [1, 2, 3]])
    result = fit(model, flows, target,
                 fit_config(gamma1=0.98, gamma2=0.02, align=True))
    assert result.e_verts < 1e-8
    assert np.linalg.norm(result.z_id.values) < 1e-4
    want = model.mean.reshape(-1, 3)
    assert np.allclose(result.aligned_target.vertices, want, atol=1e-8)


def test_fit_matches_als_oracle():
    rng = np.random.default_rng(11)
    model = make_model(rng, n_vertices=10)
    flows = identity_flows(model)
    target_vec = rng.normal(size=model.mean.shape)
    target = mesh_from_vector(target_vec)
    w_ex0 = model.u_ex[0]
    want = als_oracle(model, target_vec, w_ex0)
    result = fit(
        model, flows, target,
        fit_config(gamma1=1.0, gamma2=0.0, max_iterations=80, inner_iterations=60,
                   tol=1e-14),
        neutral_w_ex=w_ex0,
    )
    assert abs(result.e_verts - want) <= 1e-4 * max(want, 1e-12)


def test_fit_noise_floor():
    rng = np.random.default_rng(12)
    model = make_model(rng, n_vertices=20)
    flows = identity_flows(model)
    w_id = rng.normal(size=model.d_id) * 0.8
    w_ex = rng.normal(size=model.d_ex) * 0.8
    clean = reconstruct(model, w_id, w_ex)
    sigma = 0.01
    noisy = clean + rng.normal(scale=sigma, size=clean.shape)
    result = fit(model, flows, mesh_from_vector(noisy), fit_config())
    clean_mesh = mesh_from_vector(clean)
    rms_clean = float(np.sqrt(np.mean(
        per_vertex_error(result.reconstruction, clean_mesh) ** 2)))
    assert rms_clean <= 1.5 * sigma
    # against the noisy target itself the floor is the full noise magnitude
    rms_noisy = float(np.sqrt(np.mean(result.per_vertex_errors ** 2)))
    assert rms_noisy <= 2.0 * sigma * np.sqrt(3)


def test_fit_energy_trace_monotone():
    rng = np.random.default_rng(13)
    model = make_model(rng)
    flows = randomized_flows(model, seed=21)
    target = mesh_from_vector(rng.normal(size=model.mean.shape))
    result = fit(model, flows, target,
                 FitConfig(max_iterations=10, inner_iterations=10, align=False))
    diffs = np.diff(result.energy_trace)
    assert np.all(diffs <= 1e-12)
    assert result.energy_trace[-1] <= result.energy_trace[0]
    assert np.all(np.isfinite(result.energy_trace))


def test_fit_stays_inside_credible_shell():
    rng = np.random.default_rng(14)
    model = make_model(rng, n_vertices=15)
    flows = identity_flows(model)
    w_id = rng.normal(size=model.d_id) * 0.3
    w_ex = rng.normal(size=model.d_ex) * 0.3
    target = mesh_from_vector(reconstruct(model, w_id, w_ex))
    result = fit(model, flows, target, fit_config(gamma1=0.98, gamma2=0.02))
    beta_id = chi2_critical(model.d_id, 0.99)
    beta_ex = chi2_critical(model.d_ex, 0.99)
    assert np.all(np.isfinite(result.z_id.values))
    assert np.all(np.isfinite(result.z_ex.values))
    assert np.linalg.norm(result.z_id.values) <= beta_id
    assert np.linalg.norm(result.z_ex.values) <= beta_ex


def test_fit_init_modes():
    rng = np.random.default_rng(15)
    model = make_model(rng)
    flows = identity_flows(model)
    w_id = rng.normal(size=model.d_id) * 0.5
    w_ex = rng.normal(size=model.d_ex) * 0.5
    target = mesh_from_vector(reconstruct(model, w_id, w_ex))
    for init in ("neutral", "encode"):
        result = fit(model, flows, target, fit_config(init=init))
        assert result.e_verts < 1e-6, init


def test_fit_zero_init_with_standardized_flows():
    # with exact identity flows the origin is a saddle of the bilinear term
    # (both block gradients vanish), so zero init only makes progress when
    # the flow standardization moves inverse(0) off the origin, as trained
    # flows do
    rng = np.random.default_rng(15)
    model = make_model(rng)
    f_id, f_ex = identity_flows(model)
    f_id.mean = np.full(model.d_id, 0.2)
    f_ex.mean = np.full(model.d_ex, 0.2)
    w_id = rng.normal(size=model.d_id) * 0.5
    w_ex = rng.normal(size=model.d_ex) * 0.5
    target = mesh_from_vector(reconstruct(model, w_id, w_ex))
    result = fit(model, (f_id, f_ex), target, fit_config(init="zero"))
    assert result.e_verts < 1e-6


def test_fit_reconstruction_consistent_with_latents():
    rng = np.random.default_rng(16)
    model = make_model(rng)
    flows = randomized_flows(model, seed=31)
    target = mesh_from_vector(rng.normal(size=model.mean.shape))
    result = fit(model, flows, target,
                 FitConfig(max_iterations=5, inner_iterations=5, align=False))
    w_id = inverse(flows[0], result.z_id.values)
    w_ex = inverse(flows[1], result.z_ex.values)
    assert np.allclose(w_id, result.w_id, atol=1e-12)
    assert np.allclose(w_ex, result.w_ex, atol=1e-12)
    want = reconstruct(model, result.w_id, result.w_ex).reshape(-1, 3)
    assert np.allclose(result.reconstruction.vertices, want, atol=1e-12)
    # round trip: forward of the recovered coefficients gives back z
    z_back, _ = forward(flows[0], result.w_id)
    assert np.allclose(z_back, result.z_id.values, atol=1e-9)


def test_fit_non_convergence_is_flag_not_error():
    rng = np.random.default_rng(17)
    model = make_model(rng)
    flows = identity_flows(model)
    target = mesh_from_vector(rng.normal(size=model.mean.shape))
    result = fit(model, flows, target,
                 FitConfig(max_iterations=1, inner_iterations=1, tol=0.0,
                           align=False))
    assert result.converged is False
    assert np.all(np.isfinite(result.energy_trace))


def test_fit_validation_errors():
    rng = np.random.default_rng(18)
    model = make_model(rng)
    flows = identity_flows(model)
    config = FitConfig(align=False)
    short = Mesh(rng.normal(size=(model.n_vertices - 1, 3)), [[0, 1, 2]])
    with pytest.raises(FittingError):
        fit(model, flows, short, config)
    wrong_dim = (make_identity_flow(model.d_id + 1), flows[1])
    target = mesh_from_vector(model.mean)
    with pytest.raises(FittingError):
        fit(model, wrong_dim, target, config)
    with pytest.raises(FittingError):
        fit(model, ("not a flow", flows[1]), target, config)


# --- per-vertex error --------------------------------------------------------


def test_per_vertex_error_uniform_shift():
    rng = np.random.default_rng(19)
    pts = rng.normal(size=(8, 3))
    faces = [[0, 1, 2]]
    a = Mesh(pts, faces)
    b = Mesh(pts + np.array([1.0, 0.0, 0.0]), faces)
    err = per_vertex_error(a, b)
    assert err.shape == (8,)
    assert np.allclose(err, 1.0, atol=1e-15)


def test_per_vertex_error_count_mismatch():
    a = Mesh(np.zeros((4, 3)), [[0, 1, 2]])
    b = Mesh(np.zeros((5, 3)), [[0, 1, 2]])
    with pytest.raises(FittingError):
        per_vertex_error(a, b)


def test_per_vertex_error_matches_direct_norms():
    rng = np.random.default_rng(20)
    pts = rng.normal(size=(10, 3))
    delta = rng.normal(size=(10, 3)) * 0.1
    a = Mesh(pts, [[0, 1, 2]])
    b = Mesh(pts + delta, [[0, 1, 2]])
    err = per_vertex_error(a, b)
    want = np.array([np.sqrt(np.sum(d * d)) for d in delta])
    assert np.allclose(err, want, atol=1e-15)
    identical = per_vertex_error(a, a)
    assert np.all(identical == 0.0)


def test_error_summary():
    from morphflow.fitting import error_summary

    errs = np.array([1.0, 2.0, 3.0])
    stats = error_summary(errs)
    assert stats["mean"] == pytest.approx(2.0)
    assert stats["max"] == 3.0
    assert stats["rms"] == pytest.approx(np.sqrt(14 / 3))
    with pytest.raises(FittingError):
        error_summary(np.array([]))


class TestFrozenBlocks:
    def test_frozen_expression_block_keeps_init(self):
        rng = np.random.default_rng(21)
        model = make_model(rng)
        flows = identity_flows(model)
        target = mesh_from_vector(reconstruct(model, model.u_id[1], model.u_ex[1]))
        config = fit_config(init="neutral", blocks=("id",))
        result = fit(model, flows, target, config, neutral_w_ex=model.u_ex[0])
        # expression stayed where the init put it
        np.testing.assert_allclose(result.w_ex, model.u_ex[0], atol=1e-12)

    def test_empty_blocks_rejected(self):
        with pytest.raises(FittingError):
            fit_config(blocks=())

    def test_unknown_block_rejected(self):
        with pytest.raises(FittingError):
            fit_config(blocks=("id", "shear"))
