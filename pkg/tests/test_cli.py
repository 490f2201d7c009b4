import json
import os

import numpy as np
import pytest

from distillab.cli import main

TINY_CONFIG = {
    "master_seed": 5,
    "data": {
        "num_classes": 3,
        "train_per_class": 40,
        "test_per_class": 10,
        "image_height": 8,
        "image_width": 8,
    },
    "detector": {"epochs": 6, "batch_size": 32, "hidden_sizes": [32, 16]},
    "autoencoder": {"mode": "mlp", "latent_dim": 8, "hidden_size": 32, "epochs": 6},
    "denoiser": {
        "timesteps": 30,
        "beta_end": 0.08,
        "epochs": 5,
        "hidden_sizes": [32, 32],
        "time_embed_dim": 8,
        "label_embed_dim": 8,
    },
    "distill": {
        "ipc": 2,
        "beta": 0.6,
        "top_k": 2,
        "num_candidates": 4,
        "kmeans_restarts": 2,
    },
    "eval": {
        "epochs": 25,
        "batch_size": 8,
        "hidden_sizes": [32, 16],
        "modes": ["base", "tplus_s"],
        "seeds": [1],
        "sensitivity_top_k": [1, 2],
        "sensitivity_betas": [0.5, 0.9],
    },
}


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv("DISTILLAB_OUTPUT_ROOT", str(tmp_path / "runs"))
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    return tmp_path, cfg_path


def _run(*argv):
    return main(list(argv))


def _run_dir(tmp_path):
    runs = tmp_path / "runs"
    dirs = [d for d in runs.iterdir() if d.is_dir()]
    assert len(dirs) == 1
    return dirs[0]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny full pipeline, built once for the read-only CLI tests."""
    tmp_path = tmp_path_factory.mktemp("cli_pipeline")
    os.environ["DISTILLAB_OUTPUT_ROOT"] = str(tmp_path / "runs")
    try:
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(TINY_CONFIG))
        for cmd in ("synth-data", "train-detector", "train-autoencoder", "train-diffusion"):
            assert _run(cmd, "--config", str(cfg_path)) == 0
        assert _run("distill", "--config", str(cfg_path)) == 0
    finally:
        del os.environ["DISTILLAB_OUTPUT_ROOT"]
    return tmp_path, cfg_path


class TestFullPipeline:
    def test_artifacts_exist(self, pipeline):
        tmp_path, _ = pipeline
        rd = _run_dir(tmp_path)
        for rel in (
            "data/train.dstl",
            "data/test.dstl",
            "models/detector.mdlc",
            "models/autoencoder.mdlc",
            "models/denoiser.mdlc",
            "prototypes/prototypes.prto",
            "distilled/distilled.dstl",
            "reports/distill_report.json",
        ):
            assert (rd / rel).exists(), rel
            assert (rd / (rel + ".manifest.json")).exists(), rel

    def test_distilled_counts(self, pipeline):
        from distillab.data import read_dataset

        tmp_path, _ = pipeline
        rd = _run_dir(tmp_path)
        ds = read_dataset(rd / "distilled" / "distilled.dstl")
        assert len(ds) == 3 * 2
        report = json.loads((rd / "reports" / "distill_report.json").read_text())
        assert report["counts"]["total"] == 6

    def test_eval_ablate_report(self, pipeline, monkeypatch, capsys):
        tmp_path, cfg_path = pipeline
        monkeypatch.setenv("DISTILLAB_OUTPUT_ROOT", str(tmp_path / "runs"))
        assert _run("eval", "--config", str(cfg_path)) == 0
        assert _run("ablate", "--config", str(cfg_path), "--sweep") == 0
        assert _run("report", "--config", str(cfg_path)) == 0
        rd = _run_dir(tmp_path)
        assert (rd / "reports" / "eval.json").exists()
        assert (rd / "reports" / "ablation.json").exists()
        csv_lines = (rd / "reports" / "ablation.csv").read_text().splitlines()
        assert csv_lines[0] == "mode,seed,accuracy,fallback_count"
        # base, tplus_s, random for the single seed
        assert len(csv_lines) == 4
        sweep = (rd / "reports" / "sensitivity.csv").read_text().splitlines()
        assert len(sweep) == 1 + 4  # header + 2 ks x 2 betas
        summary = (rd / "reports" / "summary.txt").read_text()
        assert "tplus_s" in summary

    def test_rerun_distill_byte_identical(self, pipeline, monkeypatch):
        tmp_path, cfg_path = pipeline
        monkeypatch.setenv("DISTILLAB_OUTPUT_ROOT", str(tmp_path / "runs"))
        rd = _run_dir(tmp_path)
        ds = rd / "distilled" / "distilled.dstl"
        rp = rd / "reports" / "distill_report.json"
        before = (ds.read_bytes(), rp.read_bytes())
        assert _run("distill", "--config", str(cfg_path)) == 0
        after = (ds.read_bytes(), rp.read_bytes())
        assert before == after

    def test_distill_overrides_recorded(self, pipeline, monkeypatch):
        tmp_path, cfg_path = pipeline
        monkeypatch.setenv("DISTILLAB_OUTPUT_ROOT", str(tmp_path / "runs"))
        assert (
            _run(
                "distill", "--config", str(cfg_path),
                "--beta", "0.9", "--top-k", "2", "--candidates", "20", "--seed", "7",
            )
            == 0
        )
        rd = _run_dir(tmp_path)
        report = json.loads((rd / "reports" / "distill_report.json").read_text())
        assert report["config"]["beta"] == 0.9
        assert report["config"]["top_k"] == 2
        assert report["config"]["num_candidates"] == 20
        assert report["config"]["seed"] == 7
        # restore the canonical artifacts for other tests
        assert _run("distill", "--config", str(cfg_path)) == 0

    def test_preview_pgm(self, pipeline, monkeypatch):
        tmp_path, cfg_path = pipeline
        monkeypatch.setenv("DISTILLAB_OUTPUT_ROOT", str(tmp_path / "runs"))
        assert _run("synth-data", "--config", str(cfg_path), "--preview", "2") == 0
        rd = _run_dir(tmp_path)
        pgm = (rd / "data" / "preview_000.pgm").read_bytes()
        assert pgm.startswith(b"P5\n8 8\n255\n")
        assert len(pgm) == len(b"P5\n8 8\n255\n") + 64


class TestConfigHandling:
    def test_unknown_key_rejected(self, workdir, capsys):
        tmp_path, cfg_path = workdir
        bad = dict(TINY_CONFIG)
        bad["distill"] = dict(TINY_CONFIG["distill"], bita=0.5)
        cfg_path.write_text(json.dumps(bad))
        assert _run("synth-data", "--config", str(cfg_path)) == 2
        assert "distill.bita" in capsys.readouterr().err

    def test_unknown_top_level_key(self, workdir, capsys):
        tmp_path, cfg_path = workdir
        bad = dict(TINY_CONFIG, master_sead=1)
        cfg_path.write_text(json.dumps(bad))
        assert _run("synth-data", "--config", str(cfg_path)) == 2
        assert "master_sead" in capsys.readouterr().err

    def test_syntax_error_cites_line(self, workdir, capsys):
        tmp_path, cfg_path = workdir
        cfg_path.write_text('{\n  "master_seed": 1,\n  oops\n}')
        assert _run("synth-data", "--config", str(cfg_path)) == 2
        assert "line 3" in capsys.readouterr().err

    def test_wrong_type_rejected(self, workdir, capsys):
        tmp_path, cfg_path = workdir
        bad = dict(TINY_CONFIG)
        bad["distill"] = dict(TINY_CONFIG["distill"], ipc="ten")
        cfg_path.write_text(json.dumps(bad))
        assert _run("synth-data", "--config", str(cfg_path)) == 2
        assert "distill.ipc" in capsys.readouterr().err

    def test_missing_config_file(self, workdir, capsys):
        tmp_path, _ = workdir
        assert _run("synth-data", "--config", str(tmp_path / "nope.json")) == 2

    def test_dump_config(self, workdir, capsys):
        tmp_path, cfg_path = workdir
        assert _run("distill", "--config", str(cfg_path), "--dump-config") == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["distill"]["ipc"] == 2
        assert payload["output_root"].endswith("runs")


class TestMissingArtifacts:
    def test_distill_without_models(self, workdir, capsys):
        tmp_path, cfg_path = workdir
        assert _run("synth-data", "--config", str(cfg_path)) == 0
        code = _run("distill", "--config", str(cfg_path))
        assert code == 3
        assert "train-detector" in capsys.readouterr().err

    def test_detector_without_data(self, workdir, capsys):
        tmp_path, cfg_path = workdir
        assert _run("train-detector", "--config", str(cfg_path)) == 3
        assert "synth-data" in capsys.readouterr().err

    def test_report_without_ablation(self, workdir, capsys):
        tmp_path, cfg_path = workdir
        assert _run("report", "--config", str(cfg_path)) == 3
        assert "ablate" in capsys.readouterr().err


class TestManifests:
    def test_manifest_lists_input_hashes(self, pipeline):
        tmp_path, _ = pipeline
        rd = _run_dir(tmp_path)
        manifest = json.loads(
            (rd / "models" / "detector.mdlc.manifest.json").read_text()
        )
        assert "train.dstl" in manifest["inputs"]
        assert len(manifest["inputs"]["train.dstl"]) == 64
        assert manifest["tool_version"]
        assert manifest["config_sha256"]

    def test_changing_input_changes_manifest(self, workdir, monkeypatch):
        tmp_path, cfg_path = workdir
        assert _run("synth-data", "--config", str(cfg_path)) == 0
        assert _run("train-detector", "--config", str(cfg_path)) == 0
        rd = _run_dir(tmp_path)
        m1 = (rd / "models" / "detector.mdlc.manifest.json").read_text()
        # different data seed -> different train.dstl -> different manifest
        cfg2 = dict(TINY_CONFIG, master_seed=6)
        cfg_path.write_text(json.dumps(cfg2))
        assert _run("synth-data", "--config", str(cfg_path)) == 0
        assert _run("train-detector", "--config", str(cfg_path)) == 0
        runs = [d for d in (tmp_path / "runs").iterdir() if d.is_dir()]
        assert len(runs) == 2  # new config hash -> new run dir
        other = [d for d in runs if d != rd][0]
        m2 = (other / "models" / "detector.mdlc.manifest.json").read_text()
        assert json.loads(m1)["inputs"] != json.loads(m2)["inputs"]


class TestLocking:
    def test_lock_conflict(self, workdir, capsys):
        tmp_path, cfg_path = workdir
        assert _run("synth-data", "--config", str(cfg_path)) == 0
        rd = _run_dir(tmp_path)
        (rd / ".lock").write_text("12345")
        with pytest.raises(RuntimeError, match="locked"):
            _run("synth-data", "--config", str(cfg_path))
        (rd / ".lock").unlink()
        assert _run("synth-data", "--config", str(cfg_path)) == 0
