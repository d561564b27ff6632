"""Pipeline stage and CLI contract tests.

The mini end-to-end run uses a deliberately small family so the whole stage
chain executes in seconds; artifact quality at this scale is not asserted
beyond structural invariants (manifest hashes, DAG edges, determinism).
"""

import configparser
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from morphflow import cli, pipeline
from morphflow.bundle import sha256_file
from morphflow.pipeline import (
    STAGES,
    ConfigError,
    config_errors,
    default_config,
    load_config,
    stage_seed,
    verify_run,
    write_default_config,
)

TINY = {
    "synth": {
        "n_id": "3",
        "n_ex": "4",
        "n_vertices": "120",
        "n_aus": "4",
        "n_bank_subjects": "3",
        "au_train": "8",
        "au_test": "6",
    },
    "spectral": {"tau": "8"},
    "flow": {"epochs": "8", "width": "8"},
    "latent": {"n_samples": "3"},
    "fit": {"n_targets": "2", "max_iterations": "4", "inner_iterations": "6"},
}


def write_config(path, stage_dir, seed=5, extra=None):
    cfg = configparser.ConfigParser()
    cfg.read_dict(TINY)
    if extra:
        cfg.read_dict(extra)
    if not cfg.has_section("pipeline"):
        cfg.add_section("pipeline")
    cfg.set("pipeline", "seed", str(seed))
    cfg.set("pipeline", "stage_dir", str(stage_dir))
    with open(path, "w") as f:
        cfg.write(f)
    return path


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    """One full stage chain, shared by the structural tests."""
    root = tmp_path_factory.mktemp("mini")
    stage_dir = root / "run"
    config = write_config(root / "mini.ini", stage_dir)
    for stage in STAGES:
        code = cli.main([stage, "--config", str(config)])
        assert code == 0, f"stage {stage} failed"
    return str(stage_dir)


# ---------------------------------------------------------------------------
# configuration


class TestConfig:
    def test_defaults_validate(self):
        assert config_errors(default_config()) == []

    def test_default_round_trip(self, tmp_path):
        path = tmp_path / "default.ini"
        write_default_config(str(path))
        loaded = load_config(str(path))
        base = default_config()
        for section in base.sections():
            assert dict(loaded.items(section)) == dict(base.items(section))

    def test_all_errors_reported_at_once(self):
        cfg = default_config()
        cfg.set("synth", "n_vertices", "10")
        cfg.set("spectral", "tau", "0")
        cfg.set("flow", "learning_rate", "banana")
        cfg.set("fit", "gamma1", "0.5")
        problems = config_errors(cfg)
        assert len(problems) >= 4
        text = "\n".join(problems)
        assert "n_vertices" in text
        assert "tau" in text
        assert "learning_rate" in text
        assert "gamma" in text

    def test_gamma_sum_checked(self):
        cfg = default_config()
        cfg.set("fit", "gamma1", "0.9")
        cfg.set("fit", "gamma2", "0.2")
        assert any("gamma" in p for p in config_errors(cfg))

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/morphflow.ini")

    def test_stage_seeds_distinct_and_stable(self):
        seeds = [stage_seed(7, s) for s in STAGES]
        assert len(set(seeds)) == len(seeds)
        assert seeds == [stage_seed(7, s) for s in STAGES]
        assert stage_seed(8, "synth") != stage_seed(7, "synth")


# ---------------------------------------------------------------------------
# CLI exit codes


class TestExitCodes:
    def test_no_stage_is_usage_error(self, capsys):
        assert cli.main([]) == 1

    def test_unknown_stage_is_usage_error(self):
        assert cli.main(["frobnicate"]) == 1

    def test_bad_config_value_lists_problems(self, tmp_path, capsys):
        config = tmp_path / "bad.ini"
        config.write_text("[synth]\nn_vertices = 3\n[spectral]\ntau = -1\n")
        assert cli.main(["synth", "--config", str(config)]) == 1
        err = capsys.readouterr().err
        assert "n_vertices" in err and "tau" in err

    def test_missing_config_file(self, capsys):
        assert cli.main(["synth", "--config", "/no/such/file.ini"]) == 1

    def test_negative_seed_rejected(self, tmp_path):
        config = write_config(tmp_path / "c.ini", tmp_path / "run")
        assert cli.main(["synth", "--config", str(config), "--seed", "-4"]) == 1

    def test_missing_upstream_names_stage(self, tmp_path, capsys):
        config = write_config(tmp_path / "c.ini", tmp_path / "empty")
        assert cli.main(["fit", "--config", str(config)]) == 2
        err = capsys.readouterr().err
        assert "missing" in err and "hosvd" in err

    def test_report_before_fit(self, tmp_path, capsys):
        config = write_config(tmp_path / "c.ini", tmp_path / "empty")
        assert cli.main(["report", "--config", str(config)]) == 2
        assert "fit" in capsys.readouterr().err

    def test_build_map_before_synth(self, tmp_path, capsys):
        config = write_config(tmp_path / "c.ini", tmp_path / "empty")
        assert cli.main(["build-map", "--config", str(config)]) == 2
        assert "synth" in capsys.readouterr().err

    def test_console_script_module_entry(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "morphflow.cli", "synth",
             "--config", "/no/such/file.ini"],
            capture_output=True, text=True)
        assert proc.returncode == 1


# ---------------------------------------------------------------------------
# stage chain


class TestMiniRun:
    def test_every_stage_has_manifest(self, mini_run):
        for stage in STAGES:
            path = os.path.join(mini_run, stage, "manifest.json")
            assert os.path.exists(path), stage
            with open(path) as f:
                m = json.load(f)
            assert m["format"] == "morphflow-stage 1"
            assert m["stage"] == stage
            assert m["outputs"], stage

    def test_recorded_hashes_verify(self, mini_run):
        assert verify_run(mini_run) == []

    def test_dag_edge_hashes_match(self, mini_run):
        # build-map's recorded input hash must equal synth's recorded output
        with open(os.path.join(mini_run, "synth/manifest.json")) as f:
            synth = json.load(f)
        with open(os.path.join(mini_run, "build-map/manifest.json")) as f:
            bmap = json.load(f)
        key = "synth/bank/base.obj"
        assert bmap["inputs"][key] == synth["outputs"][key]

    def test_manifest_has_no_timestamps(self, mini_run):
        for stage in STAGES:
            with open(os.path.join(mini_run, stage, "manifest.json")) as f:
                text = f.read()
            assert "time" not in text.lower().replace("runtime", "")

    def test_config_echo_covers_sections(self, mini_run):
        with open(os.path.join(mini_run, "hosvd/manifest.json")) as f:
            m = json.load(f)
        for section in ("synth", "spectral", "flow", "latent", "fit"):
            assert section in m["config"]
        assert "stage_dir" not in m["config"].get("pipeline", {})

    def test_report_csv_shape(self, mini_run):
        with open(os.path.join(mini_run, "report/summary.csv")) as f:
            lines = [ln for ln in f.read().splitlines() if ln]
        # header + one row per target + one aggregate row
        assert lines[0].startswith("target,")
        assert len(lines) == 1 + 2 + 1
        assert lines[-1].startswith("ALL,")

    def test_report_copies_error_files(self, mini_run):
        err_dir = os.path.join(mini_run, "report/errors")
        files = sorted(os.listdir(err_dir))
        assert len(files) == 2
        with open(os.path.join(err_dir, files[0])) as f:
            rows = f.read().splitlines()
        assert rows[0] == "error"
        # one error value per family vertex
        assert all(float(v) >= 0 for v in rows[1:])

    def test_fit_energy_trace_monotone(self, mini_run):
        fit_dir = os.path.join(mini_run, "fit")
        targets = [d for d in sorted(os.listdir(fit_dir)) if d.startswith("target_")]
        assert targets
        with open(os.path.join(fit_dir, targets[0], "energy.csv")) as f:
            rows = f.read().splitlines()[1:]
        vals = [float(r.split(",")[1]) for r in rows]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))

    def test_interpolation_endpoints_and_steps(self, mini_run):
        with open(os.path.join(mini_run, "interpolate/steps.json")) as f:
            steps = json.load(f)
        assert steps["nus"][0] == 0.0
        assert steps["nus"][-1] == 1.0
        assert len(steps["max_vertex_step"]) == len(steps["nus"]) - 1

    def test_projection_lands_on_shell(self, mini_run):
        with open(os.path.join(mini_run, "project/projection.json")) as f:
            proj = json.load(f)
        for row in proj["distances"]:
            assert abs(row["after"] - proj["beta"]) < 1e-8

    def test_sample_meshes_written(self, mini_run):
        files = sorted(os.listdir(os.path.join(mini_run, "sample")))
        assert "sample00.obj" in files and "codes.txt" in files


# ---------------------------------------------------------------------------
# determinism


class TestDeterminism:
    def test_synth_rerun_identical(self, tmp_path):
        hashes = []
        for sub in ("a", "b"):
            stage_dir = tmp_path / sub
            config = write_config(tmp_path / f"{sub}.ini", stage_dir, seed=11)
            assert cli.main(["synth", "--config", str(config)]) == 0
            tree = {}
            for base, dirs, files in os.walk(stage_dir):
                dirs.sort()
                for f in sorted(files):
                    p = os.path.join(base, f)
                    tree[os.path.relpath(p, stage_dir)] = sha256_file(p)
            hashes.append(tree)
        assert hashes[0] == hashes[1]

    def test_seed_override_changes_family(self, tmp_path):
        digests = []
        for seed in (1, 2):
            stage_dir = tmp_path / f"s{seed}"
            config = write_config(tmp_path / f"s{seed}.ini", stage_dir, seed=seed)
            assert cli.main(["synth", "--config", str(config)]) == 0
            digests.append(sha256_file(
                str(stage_dir / "synth/family/meshes/id00_ex00.obj")))
        assert digests[0] != digests[1]

    def test_cli_seed_flag_overrides_config(self, tmp_path):
        stage_dir = tmp_path / "run"
        config = write_config(tmp_path / "c.ini", stage_dir, seed=1)
        assert cli.main(["synth", "--config", str(config), "--seed", "2"]) == 0
        with open(stage_dir / "synth/manifest.json") as f:
            m = json.load(f)
        assert m["config"]["pipeline"]["seed"] == "2"
        assert m["seed"] == stage_seed(2, "synth")


class TestRunAllHelper:
    def test_run_all_covers_every_stage(self, tmp_path):
        cfg = default_config()
        cfg.read_dict(TINY)
        cfg.set("pipeline", "seed", "3")
        manifests = pipeline.run_all(cfg, str(tmp_path / "run"))
        assert [m["stage"] for m in manifests] == list(STAGES)
