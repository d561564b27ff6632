"""Pipeline stages over the synthetic family, with content-hash manifests.

Each stage reads its upstream artifacts from the shared stage directory,
writes its own outputs atomically, and records a manifest holding the
effective config, a stage-specific seed, and sha256 hashes of every input
and output file, so a rerun is verifiable end to end. No timestamps are
recorded anywhere: reruns from one seed are bit-identical.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import os
import shutil

import numpy as np

from . import __version__
from .bilinear import (
    ShapeTensor,
    assemble_tensor,
    encode,
    hosvd,
    load_model,
    reconstruct,
    save_model,
    variance_truncation,
)
from .bundle import load_bundle, save_bundle, sha256_file
from .correspondence import build_map, load_map, save_map
from .fitting import FitConfig, error_summary, fit
from .flow import (
    TrainConfig,
    forward,
    inverse,
    load_flow,
    make_flow,
    sample as flow_sample,
    save_flow,
    save_history_csv,
    train,
)
from .geometry import Mesh, atomic_write_text, load_landmarks, load_mesh, load_symmetry_map, save_mesh
from .latent import LatentCode, chi2_critical, fit_prior, mahalanobis, project_to_hyperellipsoid, save_codes, load_codes, interpolate
from .spectral import build_patch_spectrum, detect_aus, load_bank, mesh_features, save_bank, train_au_svm
from .synthetic import SyntheticFamilySpec, family_mesh_name, generate_family, write_family
from .transfer import flipped_faces, load_bank_dir, synthesize_expression, transfer_expression

__all__ = [
    "STAGES",
    "PipelineError",
    "ConfigError",
    "default_config",
    "load_config",
    "config_errors",
    "config_to_dict",
    "stage_seed",
    "run_stage",
    "run_all",
    "verify_run",
]

STAGES = (
    "synth",
    "build-map",
    "detect-aus",
    "transfer",
    "assemble",
    "hosvd",
    "train-flows",
    "sample",
    "interpolate",
    "project",
    "fit",
    "report",
)

MANIFEST_FORMAT = "morphflow-stage 1"


class PipelineError(Exception):
    """Runtime stage failure (missing upstream artifact, bad data)."""


class ConfigError(Exception):
    """Invalid configuration; carries every problem at once."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# ---------------------------------------------------------------------------
# configuration


DEFAULT_CONFIG = {
    "pipeline": {
        "seed": "0",
        "stage_dir": "pipeline_out",
    },
    "synth": {
        "n_id": "5",
        "n_ex": "6",
        "n_vertices": "500",
        "identity_amplitude": "0.08",
        "expression_amplitude": "0.06",
        "noise": "0.0",
        "n_aus": "8",
        "n_bank_subjects": "10",
        "au_train": "40",
        "au_test": "20",
        "separable": "true",
    },
    "spectral": {
        "tau": "12",
        "svm_c": "1.0",
    },
    "transfer": {
        "delta": "1.0",
        "ensemble": "40",
        "source_expression": "neutral",
        "target_expression": "expr01",
        "target_identity": "0",
    },
    "bilinear": {
        "variance_fraction": "0.95",
        "augment": "false",
        "d_id": "0",
        "d_ex": "0",
    },
    "flow": {
        "n_layers": "6",
        "width": "32",
        "epochs": "150",
        "batch_size": "16",
        "learning_rate": "1e-3",
        "jacobian_weight": "0.05",
        "jacobian_mode": "composed",
        "dequantize": "true",
    },
    "latent": {
        "rho": "0.99",
        "zeta_ex": "7",
        "beta_ex": "4.07",
        "zeta_id": "26",
        "beta_id": "6.01",
        "n_samples": "8",
        "interpolation_step": "0.25",
    },
    "fit": {
        "gamma1": "0.98",
        "gamma2": "0.02",
        "max_iterations": "25",
        "inner_iterations": "12",
        "tol": "1e-9",
        "init": "neutral",
        "n_targets": "20",
    },
}


def default_config() -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    cfg.read_dict(DEFAULT_CONFIG)
    return cfg


def load_config(path: str = None) -> configparser.ConfigParser:
    """Defaults overlaid with an optional INI file."""
    cfg = default_config()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError([f"config file not found: {path}"])
        try:
            with open(path) as f:
                cfg.read_file(f)
        except configparser.Error as exc:
            raise ConfigError([f"config parse error: {exc}"])
    return cfg


def write_default_config(path: str) -> None:
    cfg = default_config()
    buf = io.StringIO()
    cfg.write(buf)
    atomic_write_text(path, buf.getvalue())


def config_to_dict(cfg: configparser.ConfigParser) -> dict:
    return {s: dict(cfg.items(s)) for s in cfg.sections()}


def _checked(cfg, errors, section, key, conv, pred, msg):
    try:
        value = conv(cfg.get(section, key))
    except (configparser.Error, ValueError):
        errors.append(f"[{section}] {key}: invalid value")
        return None
    if not pred(value):
        errors.append(f"[{section}] {key}: {msg}")
        return None
    return value


def _bool(text):
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(text)


def config_errors(cfg: configparser.ConfigParser) -> list:
    """Every validation problem, collected in one pass."""
    e = []
    _checked(cfg, e, "pipeline", "seed", int, lambda v: v >= 0, "must be >= 0")
    for key, low in (("n_id", 1), ("n_ex", 1), ("n_bank_subjects", 1),
                     ("au_train", 2), ("au_test", 2)):
        _checked(cfg, e, "synth", key, int, lambda v, low=low: v >= low,
                 f"must be >= {low}")
    _checked(cfg, e, "synth", "n_vertices", int, lambda v: v >= 50,
             "must be >= 50")
    _checked(cfg, e, "synth", "n_aus", int, lambda v: 1 <= v <= 12,
             "must be in 1..12")
    for key in ("identity_amplitude", "expression_amplitude", "noise"):
        _checked(cfg, e, "synth", key, float, lambda v: v >= 0,
                 "must be nonnegative")
    _checked(cfg, e, "synth", "separable", _bool, lambda v: True, "")
    _checked(cfg, e, "spectral", "tau", int, lambda v: v >= 1, "must be >= 1")
    _checked(cfg, e, "spectral", "svm_c", float, lambda v: v > 0,
             "must be positive")
    _checked(cfg, e, "transfer", "delta", float, lambda v: np.isfinite(v),
             "must be finite")
    _checked(cfg, e, "transfer", "ensemble", int, lambda v: v >= 1,
             "must be >= 1")
    _checked(cfg, e, "transfer", "target_identity", int, lambda v: v >= 0,
             "must be >= 0")
    for key in ("source_expression", "target_expression"):
        _checked(cfg, e, "transfer", key, str, lambda v: len(v.strip()) > 0,
                 "must be a name")
    _checked(cfg, e, "bilinear", "variance_fraction", float,
             lambda v: 0 < v <= 1, "must be in (0, 1]")
    for key in ("d_id", "d_ex"):
        _checked(cfg, e, "bilinear", key, int, lambda v: v == 0 or v >= 2,
                 "must be 0 (auto) or >= 2")
    _checked(cfg, e, "bilinear", "augment", _bool, lambda v: True, "")
    for key in ("n_layers", "width", "epochs", "batch_size"):
        _checked(cfg, e, "flow", key, int, lambda v: v >= 1, "must be >= 1")
    _checked(cfg, e, "flow", "learning_rate", float, lambda v: v > 0,
             "must be positive")
    _checked(cfg, e, "flow", "jacobian_weight", float, lambda v: v >= 0,
             "must be nonnegative")
    _checked(cfg, e, "flow", "jacobian_mode", str,
             lambda v: v in ("composed", "per_layer"),
             "must be composed or per_layer")
    _checked(cfg, e, "flow", "dequantize", _bool, lambda v: True, "")
    _checked(cfg, e, "latent", "rho", float, lambda v: 0 < v < 1,
             "must be in (0, 1)")
    for key in ("zeta_ex", "beta_ex", "zeta_id", "beta_id"):
        _checked(cfg, e, "latent", key, float, lambda v: v > 0,
                 "must be positive")
    _checked(cfg, e, "latent", "n_samples", int, lambda v: v >= 1,
             "must be >= 1")
    _checked(cfg, e, "latent", "interpolation_step", float,
             lambda v: 0 < v <= 0.5, "must be in (0, 0.5]")
    g1 = _checked(cfg, e, "fit", "gamma1", float, lambda v: v >= 0,
                  "must be nonnegative")
    g2 = _checked(cfg, e, "fit", "gamma2", float, lambda v: v >= 0,
                  "must be nonnegative")
    if g1 is not None and g2 is not None and abs(g1 + g2 - 1.0) > 1e-12:
        e.append("[fit] gamma1 + gamma2 must equal 1")
    for key in ("max_iterations", "inner_iterations", "n_targets"):
        _checked(cfg, e, "fit", key, int, lambda v: v >= 1, "must be >= 1")
    _checked(cfg, e, "fit", "tol", float, lambda v: v >= 0,
             "must be nonnegative")
    _checked(cfg, e, "fit", "init", str,
             lambda v: v in ("neutral", "zero", "encode"),
             "must be neutral, zero, or encode")
    return e


def stage_seed(root_seed: int, stage: str) -> int:
    """Per-stage seed derived from the pipeline seed and the stage's index."""
    idx = STAGES.index(stage)
    ss = np.random.SeedSequence([int(root_seed), idx])
    return int(ss.generate_state(1, np.uint32)[0])


# ---------------------------------------------------------------------------
# manifest plumbing


def _stage_root(stage_dir: str, stage: str) -> str:
    return os.path.join(stage_dir, stage)


def _require(stage_dir: str, needed: dict) -> dict:
    """Check upstream artifacts exist; returns {relpath: sha256}.

    needed: {relpath: producing stage name}."""
    hashes = {}
    for rel, producer in needed.items():
        path = os.path.join(stage_dir, rel)
        if not os.path.exists(path):
            raise PipelineError(
                f"missing {os.path.basename(rel)} artifact: {rel} not found; "
                f"run the '{producer}' stage first"
            )
        if os.path.isdir(path):
            for root, _, files in os.walk(path):
                for f in sorted(files):
                    p = os.path.join(root, f)
                    hashes[os.path.relpath(p, stage_dir)] = sha256_file(p)
        else:
            hashes[rel] = sha256_file(path)
    return hashes


def _hash_outputs(stage_dir: str, stage: str) -> dict:
    root = _stage_root(stage_dir, stage)
    out = {}
    for base, _, files in os.walk(root):
        for f in sorted(files):
            if f == "manifest.json":
                continue
            p = os.path.join(base, f)
            out[os.path.relpath(p, stage_dir)] = sha256_file(p)
    return out


def _write_manifest(stage_dir, stage, cfg, inputs, extra=None) -> dict:
    echo = config_to_dict(cfg)
    # the stage directory is where this manifest lives, not a semantic
    # setting; leaving it out keeps reruns bit-identical across locations
    echo.get("pipeline", {}).pop("stage_dir", None)
    manifest = {
        "format": MANIFEST_FORMAT,
        "stage": stage,
        "version": __version__,
        "seed": stage_seed(cfg.getint("pipeline", "seed"), stage),
        "config": echo,
        "inputs": inputs,
        "outputs": _hash_outputs(stage_dir, stage),
    }
    if extra:
        manifest["report"] = extra
    atomic_write_text(
        os.path.join(_stage_root(stage_dir, stage), "manifest.json"),
        json.dumps(manifest, sort_keys=True, indent=2) + "\n",
    )
    return manifest


def _load_manifest(stage_dir: str, stage: str) -> dict:
    path = os.path.join(_stage_root(stage_dir, stage), "manifest.json")
    if not os.path.exists(path):
        raise PipelineError(
            f"missing manifest for stage '{stage}'; run the '{stage}' stage first"
        )
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# stages


def _run_synth(cfg, stage_dir):
    spec = SyntheticFamilySpec(
        n_id=cfg.getint("synth", "n_id"),
        n_ex=cfg.getint("synth", "n_ex"),
        n_vertices=cfg.getint("synth", "n_vertices"),
        identity_amplitude=cfg.getfloat("synth", "identity_amplitude"),
        expression_amplitude=cfg.getfloat("synth", "expression_amplitude"),
        noise=cfg.getfloat("synth", "noise"),
        seed=stage_seed(cfg.getint("pipeline", "seed"), "synth"),
        n_aus=cfg.getint("synth", "n_aus"),
        n_bank_subjects=cfg.getint("synth", "n_bank_subjects"),
        au_train=cfg.getint("synth", "au_train"),
        au_test=cfg.getint("synth", "au_test"),
        separable=cfg.getboolean("synth", "separable"),
    )
    family = generate_family(spec)
    write_family(family, _stage_root(stage_dir, "synth"))
    return _write_manifest(stage_dir, "synth", cfg, inputs={})


def _run_build_map(cfg, stage_dir):
    inputs = _require(stage_dir, {
        "synth/bank/base.obj": "synth",
        "synth/family/topology.obj": "synth",
    })
    source = load_mesh(os.path.join(stage_dir, "synth/bank/base.obj"))
    target = load_mesh(os.path.join(stage_dir, "synth/family/topology.obj"))
    bmap = build_map(source, target)
    root = _stage_root(stage_dir, "build-map")
    os.makedirs(root, exist_ok=True)
    save_map(os.path.join(root, "bank_to_family.map"), bmap)
    return _write_manifest(stage_dir, "build-map", cfg, inputs)


def _read_labels_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    names = [r[0] for r in rows[1:]]
    labels = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    return names, labels


def _run_detect_aus(cfg, stage_dir):
    inputs = _require(stage_dir, {
        "synth/bank/base.obj": "synth",
        "synth/bank/landmarks.txt": "synth",
        "synth/au_data": "synth",
    })
    base = load_mesh(os.path.join(stage_dir, "synth/bank/base.obj"))
    landmarks = load_landmarks(os.path.join(stage_dir, "synth/bank/landmarks.txt"))
    tau = cfg.getint("spectral", "tau")
    c = cfg.getfloat("spectral", "svm_c")
    n_aus = cfg.getint("synth", "n_aus")
    spectra = [build_patch_spectrum(base, int(landmarks[j]), tau)
               for j in range(n_aus)]

    au_dir = os.path.join(stage_dir, "synth/au_data")
    train_names, train_labels = _read_labels_csv(os.path.join(au_dir, "train_labels.csv"))
    test_names, test_labels = _read_labels_csv(os.path.join(au_dir, "test_labels.csv"))
    feats_train = np.stack([
        mesh_features(load_mesh(os.path.join(au_dir, "train", n)).vertices, spectra)
        for n in train_names
    ])
    feats_test = np.stack([
        mesh_features(load_mesh(os.path.join(au_dir, "test", n)).vertices, spectra)
        for n in test_names
    ])

    seed = stage_seed(cfg.getint("pipeline", "seed"), "detect-aus")
    classifiers = []
    accuracy = {}
    for j in range(n_aus):
        y_train = np.where(train_labels[:, j] > 0, 1.0, -1.0)
        clf = train_au_svm(j, feats_train, y_train, C=c, seed=seed + j)
        classifiers.append(clf)
        pred = (feats_test @ clf.weights + clf.bias) > 0
        accuracy[f"au{j:02d}"] = float(np.mean(pred == (test_labels[:, j] > 0)))

    root = _stage_root(stage_dir, "detect-aus")
    os.makedirs(root, exist_ok=True)
    save_bank(os.path.join(root, "au_bank.txt"), spectra, classifiers)
    atomic_write_text(os.path.join(root, "accuracy.json"),
                      json.dumps(accuracy, sort_keys=True, indent=2) + "\n")
    report = {"mean_accuracy": float(np.mean(list(accuracy.values()))),
              "per_au": accuracy}
    return _write_manifest(stage_dir, "detect-aus", cfg, inputs, extra=report)


def _run_transfer(cfg, stage_dir):
    inputs = _require(stage_dir, {
        "synth/bank/subjects": "synth",
        "synth/family/meshes": "synth",
        "build-map/bank_to_family.map": "build-map",
        "detect-aus/au_bank.txt": "detect-aus",
    })
    bank = load_bank_dir(os.path.join(stage_dir, "synth/bank/subjects"))
    bmap = load_map(os.path.join(stage_dir, "build-map/bank_to_family.map"))
    src_name = cfg.get("transfer", "source_expression")
    dst_name = cfg.get("transfer", "target_expression")
    ident = cfg.getint("transfer", "target_identity")
    if ident >= cfg.getint("synth", "n_id"):
        raise PipelineError(f"target_identity {ident} out of range")
    source_au = bank.au_vector_for(src_name)
    target_au = bank.au_vector_for(dst_name)
    current = load_mesh(os.path.join(
        stage_dir, "synth/family/meshes", family_mesh_name(ident, 0)))
    seed = stage_seed(cfg.getint("pipeline", "seed"), "transfer")
    moved = transfer_expression(
        current, source_au, target_au, bank, bmap,
        delta=cfg.getfloat("transfer", "delta"),
        ensemble=cfg.getint("transfer", "ensemble"),
        seed=seed,
    )
    flipped = flipped_faces(current, moved)

    # cross-check: the classifier bank should see the target AUs on the
    # bank's own synthesized version of that expression
    spectra, classifiers = load_bank(os.path.join(stage_dir, "detect-aus/au_bank.txt"))
    synth_pose = synthesize_expression(bank, 0, target_au)
    detected = detect_aus(synth_pose, spectra, classifiers)

    root = _stage_root(stage_dir, "transfer")
    os.makedirs(root, exist_ok=True)
    out_name = f"id{ident:02d}_{src_name}_to_{dst_name}.obj"
    save_mesh(os.path.join(root, out_name), moved)
    report = {
        "output": out_name,
        "flipped_faces": int(len(flipped)),
        "target_au_vector": [int(v) for v in target_au],
        "detected_on_bank_pose": [int(v) for v in detected],
    }
    atomic_write_text(os.path.join(root, "transfer.json"),
                      json.dumps(report, sort_keys=True, indent=2) + "\n")
    return _write_manifest(stage_dir, "transfer", cfg, inputs, extra=report)


def _family_labels(cfg):
    n_id = cfg.getint("synth", "n_id")
    n_ex = cfg.getint("synth", "n_ex")
    ids = [f"id{i:02d}" for i in range(n_id)]
    exs = ["neutral"] + [f"expr{e:02d}" for e in range(1, n_ex)]
    return ids, exs


def _run_assemble(cfg, stage_dir):
    inputs = _require(stage_dir, {
        "synth/family/meshes": "synth",
        "synth/family/symmetry.txt": "synth",
    })
    n_id = cfg.getint("synth", "n_id")
    n_ex = cfg.getint("synth", "n_ex")
    ids, exs = _family_labels(cfg)
    meshes = {}
    for i in range(n_id):
        for e in range(n_ex):
            mesh = load_mesh(os.path.join(
                stage_dir, "synth/family/meshes", family_mesh_name(i, e)))
            meshes[(ids[i], exs[e])] = mesh
    sym = None
    augment = cfg.getboolean("bilinear", "augment")
    if augment:
        first = next(iter(meshes.values()))
        sym = load_symmetry_map(
            os.path.join(stage_dir, "synth/family/symmetry.txt"),
            first.n_vertices)
    tensor = assemble_tensor(meshes, ids, exs, sym=sym, augment=augment)
    root = _stage_root(stage_dir, "assemble")
    os.makedirs(root, exist_ok=True)
    save_bundle(os.path.join(root, "tensor.bundle"),
                {"data": tensor.data},
                {"kind": "shape_tensor",
                 "identity_labels": tensor.identity_labels,
                 "expression_labels": tensor.expression_labels})
    return _write_manifest(stage_dir, "assemble", cfg, inputs)


def _load_tensor(stage_dir):
    arrays, meta = load_bundle(os.path.join(stage_dir, "assemble/tensor.bundle"))
    if meta.get("kind") != "shape_tensor":
        raise PipelineError("assemble/tensor.bundle is not a shape tensor")
    return ShapeTensor(arrays["data"], meta["identity_labels"],
                       meta["expression_labels"])


def _run_hosvd(cfg, stage_dir):
    inputs = _require(stage_dir, {"assemble/tensor.bundle": "assemble"})
    tensor = _load_tensor(stage_dir)
    full = hosvd(tensor)
    fraction = cfg.getfloat("bilinear", "variance_fraction")
    d_id = cfg.getint("bilinear", "d_id")
    d_ex = cfg.getint("bilinear", "d_ex")
    if d_id == 0:
        d_id = max(2, variance_truncation(np.sqrt(full.lambda_id), fraction))
    if d_ex == 0:
        d_ex = max(2, variance_truncation(np.sqrt(full.lambda_ex), fraction))
    d_id = min(d_id, full.u_id.shape[1])
    d_ex = min(d_ex, full.u_ex.shape[1])
    model = hosvd(tensor, d_id=d_id, d_ex=d_ex)
    model.meta["identity_labels"] = tensor.identity_labels
    model.meta["expression_labels"] = tensor.expression_labels

    # per-mesh training coefficients feed the flow stage
    codes_id, codes_ex = [], []
    n_id = len(tensor.identity_labels)
    n_ex = len(tensor.expression_labels)
    for i in range(n_id):
        for e in range(n_ex):
            enc = encode(model, tensor.data[:, i, e])
            codes_id.append(LatentCode(enc.w_id, "identity", "w"))
            codes_ex.append(LatentCode(enc.w_ex, "expression", "w"))

    root = _stage_root(stage_dir, "hosvd")
    os.makedirs(root, exist_ok=True)
    save_model(os.path.join(root, "model.bundle"), model)
    save_codes(os.path.join(root, "codes_id.txt"), codes_id)
    save_codes(os.path.join(root, "codes_ex.txt"), codes_ex)
    report = {"d_id": int(d_id), "d_ex": int(d_ex),
              "lambda_id": [float(v) for v in model.lambda_id],
              "lambda_ex": [float(v) for v in model.lambda_ex]}
    return _write_manifest(stage_dir, "hosvd", cfg, inputs, extra=report)


def _train_one_flow(cfg, data, seed):
    flow = make_flow(
        data.shape[1],
        n_layers=cfg.getint("flow", "n_layers"),
        width=cfg.getint("flow", "width"),
        seed=seed,
    )
    config = TrainConfig(
        epochs=cfg.getint("flow", "epochs"),
        batch_size=cfg.getint("flow", "batch_size"),
        learning_rate=cfg.getfloat("flow", "learning_rate"),
        jacobian_weight=cfg.getfloat("flow", "jacobian_weight"),
        jacobian_mode=cfg.get("flow", "jacobian_mode"),
        dequantize=cfg.getboolean("flow", "dequantize"),
        seed=seed + 1,
    )
    flow, history = train(flow, data, config)
    return flow, history


def _run_train_flows(cfg, stage_dir):
    inputs = _require(stage_dir, {
        "hosvd/model.bundle": "hosvd",
        "hosvd/codes_id.txt": "hosvd",
        "hosvd/codes_ex.txt": "hosvd",
    })
    codes_id = load_codes(os.path.join(stage_dir, "hosvd/codes_id.txt"))
    codes_ex = load_codes(os.path.join(stage_dir, "hosvd/codes_ex.txt"))
    data_id = np.stack([c.values for c in codes_id])
    data_ex = np.stack([c.values for c in codes_ex])
    seed = stage_seed(cfg.getint("pipeline", "seed"), "train-flows")
    flow_id, hist_id = _train_one_flow(cfg, data_id, seed)
    flow_ex, hist_ex = _train_one_flow(cfg, data_ex, seed + 1000)
    root = _stage_root(stage_dir, "train-flows")
    os.makedirs(root, exist_ok=True)
    save_flow(os.path.join(root, "flow_id.bundle"), flow_id,
              extra_meta={"space": "identity"})
    save_flow(os.path.join(root, "flow_ex.bundle"), flow_ex,
              extra_meta={"space": "expression"})
    save_history_csv(os.path.join(root, "history_id.csv"), hist_id)
    save_history_csv(os.path.join(root, "history_ex.csv"), hist_ex)
    report = {"final_nll_id": float(hist_id[-1, 1]),
              "final_nll_ex": float(hist_ex[-1, 1])}
    return _write_manifest(stage_dir, "train-flows", cfg, inputs, extra=report)


def _load_model_and_flows(stage_dir):
    model = load_model(os.path.join(stage_dir, "hosvd/model.bundle"))
    flow_id = load_flow(os.path.join(stage_dir, "train-flows/flow_id.bundle"))
    flow_ex = load_flow(os.path.join(stage_dir, "train-flows/flow_ex.bundle"))
    return model, flow_id, flow_ex


def _run_sample(cfg, stage_dir):
    inputs = _require(stage_dir, {
        "hosvd/model.bundle": "hosvd",
        "train-flows/flow_id.bundle": "train-flows",
        "train-flows/flow_ex.bundle": "train-flows",
        "synth/family/topology.obj": "synth",
    })
    model, flow_id, flow_ex = _load_model_and_flows(stage_dir)
    topo = load_mesh(os.path.join(stage_dir, "synth/family/topology.obj"))
    count = cfg.getint("latent", "n_samples")
    seed = stage_seed(cfg.getint("pipeline", "seed"), "sample")
    w_id = flow_sample(flow_id, count, seed=seed)
    w_ex = flow_sample(flow_ex, count, seed=seed + 1)
    root = _stage_root(stage_dir, "sample")
    os.makedirs(root, exist_ok=True)
    codes = []
    for k in range(count):
        vec = reconstruct(model, w_id[k], w_ex[k])
        save_mesh(os.path.join(root, f"sample{k:02d}.obj"),
                  Mesh(vec.reshape(-1, 3), topo.faces))
        codes.append(LatentCode(w_id[k], "identity", "w"))
        codes.append(LatentCode(w_ex[k], "expression", "w"))
    save_codes(os.path.join(root, "codes.txt"), codes)
    return _write_manifest(stage_dir, "sample", cfg, inputs,
                           extra={"count": count})


def _run_interpolate(cfg, stage_dir):
    inputs = _require(stage_dir, {
        "hosvd/model.bundle": "hosvd",
        "hosvd/codes_id.txt": "hosvd",
        "hosvd/codes_ex.txt": "hosvd",
        "train-flows/flow_id.bundle": "train-flows",
        "train-flows/flow_ex.bundle": "train-flows",
        "synth/family/topology.obj": "synth",
    })
    model, flow_id, flow_ex = _load_model_and_flows(stage_dir)
    topo = load_mesh(os.path.join(stage_dir, "synth/family/topology.obj"))
    codes_id = load_codes(os.path.join(stage_dir, "hosvd/codes_id.txt"))
    codes_ex = load_codes(os.path.join(stage_dir, "hosvd/codes_ex.txt"))
    n_ex = len(model.meta.get("expression_labels", [])) or 1

    # endpoints: first and last identity at the neutral expression
    w_a = codes_id[0].values
    w_b = codes_id[(len(codes_id) // n_ex - 1) * n_ex].values
    w_ex0 = codes_ex[0].values
    za, _ = forward(flow_id, w_a)
    zb, _ = forward(flow_id, w_b)
    step = cfg.getfloat("latent", "interpolation_step")
    nus = [round(k * step, 10) for k in range(int(round(1.0 / step)) + 1)]
    root = _stage_root(stage_dir, "interpolate")
    os.makedirs(root, exist_ok=True)
    a_code = LatentCode(za, "identity", "z")
    b_code = LatentCode(zb, "identity", "z")
    path_codes = []
    max_steps = []
    previous = None
    for k, nu in enumerate(nus):
        z = interpolate(a_code, b_code, nu)
        w = inverse(flow_id, z.values)
        vec = reconstruct(model, w, w_ex0)
        pts = vec.reshape(-1, 3)
        save_mesh(os.path.join(root, f"path{k:02d}.obj"), Mesh(pts, topo.faces))
        path_codes.append(z)
        if previous is not None:
            max_steps.append(float(np.linalg.norm(pts - previous, axis=1).max()))
        previous = pts
    save_codes(os.path.join(root, "codes.txt"), path_codes)
    report = {"nus": nus, "max_vertex_step": max_steps}
    atomic_write_text(os.path.join(root, "steps.json"),
                      json.dumps(report, sort_keys=True, indent=2) + "\n")
    return _write_manifest(stage_dir, "interpolate", cfg, inputs, extra=report)


def _run_project(cfg, stage_dir):
    inputs = _require(stage_dir, {
        "hosvd/codes_id.txt": "hosvd",
        "train-flows/flow_id.bundle": "train-flows",
    })
    flow_id = load_flow(os.path.join(stage_dir, "train-flows/flow_id.bundle"))
    codes_id = load_codes(os.path.join(stage_dir, "hosvd/codes_id.txt"))
    z_train = np.stack([forward(flow_id, c.values)[0] for c in codes_id])
    prior = fit_prior(z_train)
    rho = cfg.getfloat("latent", "rho")
    beta = chi2_critical(z_train.shape[1], rho)
    count = cfg.getint("latent", "n_samples")
    seed = stage_seed(cfg.getint("pipeline", "seed"), "project")
    rng = np.random.default_rng(seed)
    draws = prior.mean + rng.normal(size=(count, z_train.shape[1])) * (
        2.0 * beta * np.sqrt(np.maximum(np.diag(prior.cov), 1e-12)))
    root = _stage_root(stage_dir, "project")
    os.makedirs(root, exist_ok=True)
    rows = []
    out_codes = []
    for k in range(count):
        before = mahalanobis(prior, draws[k])
        projected = project_to_hyperellipsoid(draws[k], prior, beta)
        after = mahalanobis(prior, projected)
        rows.append({"sample": k, "before": float(before), "after": float(after)})
        out_codes.append(LatentCode(projected, "identity", "z"))
    save_codes(os.path.join(root, "codes.txt"), out_codes)
    report = {"beta": float(beta), "rho": rho, "distances": rows}
    atomic_write_text(os.path.join(root, "projection.json"),
                      json.dumps(report, sort_keys=True, indent=2) + "\n")
    return _write_manifest(stage_dir, "project", cfg, inputs, extra=report)


def _run_fit(cfg, stage_dir):
    inputs = _require(stage_dir, {
        "hosvd/model.bundle": "hosvd",
        "train-flows/flow_id.bundle": "train-flows",
        "train-flows/flow_ex.bundle": "train-flows",
        "synth/family/meshes": "synth",
    })
    model, flow_id, flow_ex = _load_model_and_flows(stage_dir)
    n_id = cfg.getint("synth", "n_id")
    n_ex = cfg.getint("synth", "n_ex")
    n_targets = min(cfg.getint("fit", "n_targets"), n_id * n_ex)
    fit_cfg = FitConfig(
        gamma1=cfg.getfloat("fit", "gamma1"),
        gamma2=cfg.getfloat("fit", "gamma2"),
        max_iterations=cfg.getint("fit", "max_iterations"),
        inner_iterations=cfg.getint("fit", "inner_iterations"),
        tol=cfg.getfloat("fit", "tol"),
        init=cfg.get("fit", "init"),
    )
    root = _stage_root(stage_dir, "fit")
    os.makedirs(root, exist_ok=True)
    summary = {}
    k = 0
    for i in range(n_id):
        for e in range(n_ex):
            if k >= n_targets:
                break
            label = f"id{i:02d}_ex{e:02d}"
            mesh = load_mesh(os.path.join(
                stage_dir, "synth/family/meshes", family_mesh_name(i, e)))
            result = fit(model, (flow_id, flow_ex), mesh, fit_cfg)
            tdir = os.path.join(root, f"target_{label}")
            os.makedirs(tdir, exist_ok=True)
            save_mesh(os.path.join(tdir, "reconstruction.obj"),
                      result.reconstruction)
            save_codes(os.path.join(tdir, "codes.txt"),
                       [result.z_id, result.z_ex])
            atomic_write_text(
                os.path.join(tdir, "errors.csv"),
                "error\n" + "\n".join(f"{v:.10g}" for v in result.per_vertex_errors) + "\n")
            atomic_write_text(
                os.path.join(tdir, "energy.csv"),
                "step,total\n" + "\n".join(
                    f"{s},{v:.10g}" for s, v in enumerate(result.energy_trace)) + "\n")
            stats = error_summary(result.per_vertex_errors)
            stats["converged"] = bool(result.converged)
            stats["e_verts"] = float(result.e_verts)
            stats["e_prior"] = float(result.e_prior)
            summary[label] = stats
            k += 1
        if k >= n_targets:
            break
    atomic_write_text(os.path.join(root, "summary.json"),
                      json.dumps(summary, sort_keys=True, indent=2) + "\n")
    report = {"n_targets": n_targets,
              "mean_rms": float(np.mean([s["rms"] for s in summary.values()]))}
    return _write_manifest(stage_dir, "fit", cfg, inputs, extra=report)


def _run_report(cfg, stage_dir):
    inputs = _require(stage_dir, {"fit/summary.json": "fit"})
    with open(os.path.join(stage_dir, "fit/summary.json")) as f:
        summary = json.load(f)
    if not summary:
        raise PipelineError("fit summary is empty: nothing to report")
    root = _stage_root(stage_dir, "report")
    err_dir = os.path.join(root, "errors")
    mesh_dir = os.path.join(root, "meshes")
    os.makedirs(err_dir, exist_ok=True)
    os.makedirs(mesh_dir, exist_ok=True)

    lines = ["target,mean,std,max,rms,converged"]
    for label in sorted(summary):
        s = summary[label]
        lines.append(f"{label},{s['mean']:.10g},{s['std']:.10g},"
                     f"{s['max']:.10g},{s['rms']:.10g},{int(s['converged'])}")
        shutil.copyfile(
            os.path.join(stage_dir, "fit", f"target_{label}", "errors.csv"),
            os.path.join(err_dir, f"{label}.csv"))
    means = [summary[label]["mean"] for label in sorted(summary)]
    lines.append(f"ALL,{np.mean(means):.10g},{np.std(means):.10g},"
                 f"{np.max([summary[l]['max'] for l in summary]):.10g},"
                 f"{np.sqrt(np.mean([summary[l]['rms']**2 for l in summary])):.10g},"
                 f"{int(all(summary[l]['converged'] for l in summary))}")
    atomic_write_text(os.path.join(root, "summary.csv"), "\n".join(lines) + "\n")

    # re-export generated meshes for external viewing, when those stages ran
    exported = []
    for stage in ("sample", "interpolate", "transfer"):
        src = _stage_root(stage_dir, stage)
        if not os.path.isdir(src):
            continue
        for f in sorted(os.listdir(src)):
            if f.endswith(".obj"):
                shutil.copyfile(os.path.join(src, f),
                                os.path.join(mesh_dir, f"{stage}_{f}"))
                exported.append(f"{stage}_{f}")
    report = {"targets": len(summary), "exported_meshes": exported}
    return _write_manifest(stage_dir, "report", cfg, inputs, extra=report)


_RUNNERS = {
    "synth": _run_synth,
    "build-map": _run_build_map,
    "detect-aus": _run_detect_aus,
    "transfer": _run_transfer,
    "assemble": _run_assemble,
    "hosvd": _run_hosvd,
    "train-flows": _run_train_flows,
    "sample": _run_sample,
    "interpolate": _run_interpolate,
    "project": _run_project,
    "fit": _run_fit,
    "report": _run_report,
}


def run_stage(stage: str, cfg: configparser.ConfigParser, stage_dir: str) -> dict:
    if stage not in STAGES:
        raise ConfigError([f"unknown stage {stage!r}"])
    problems = config_errors(cfg)
    if problems:
        raise ConfigError(problems)
    os.makedirs(stage_dir, exist_ok=True)
    return _RUNNERS[stage](cfg, stage_dir)


def run_all(cfg: configparser.ConfigParser, stage_dir: str) -> list:
    return [run_stage(stage, cfg, stage_dir) for stage in STAGES]


def verify_run(stage_dir: str) -> list:
    """Check every stage manifest's recorded hashes against the files on
    disk. Returns a list of problems (empty = verified)."""
    problems = []
    for stage in STAGES:
        path = os.path.join(stage_dir, stage, "manifest.json")
        if not os.path.exists(path):
            continue
        with open(path) as f:
            manifest = json.load(f)
        for group in ("inputs", "outputs"):
            for rel, digest in manifest.get(group, {}).items():
                p = os.path.join(stage_dir, rel)
                if not os.path.exists(p):
                    problems.append(f"{stage}: {group} file missing: {rel}")
                elif sha256_file(p) != digest:
                    problems.append(f"{stage}: {group} hash mismatch: {rel}")
    return problems
