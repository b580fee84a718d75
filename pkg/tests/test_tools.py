"""Tests for the pafa tool handlers."""
import os
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import soundfile as sf

from src.pafa.checkpoint import load_checkpoint, save_checkpoint
from src.pafa.model import strip_projection
from src.pafa.rundir import PATIENTS_FILE, checkpoint_path, load_metrics
from src.pafa.tools import (
    pafa_ablate,
    pafa_eval,
    pafa_export_embeddings,
    pafa_features,
    pafa_gradcheck,
    pafa_patient_analysis,
    pafa_prepare,
    pafa_synth,
    pafa_train,
)
from src.pafa.trainer import TrainConfig, train

from tests.conftest import write_prediction_file

QUICK = {"epochs": 2, "hidden": (32,), "embed_dim": 16, "proj_dim": 16}


@pytest.fixture(scope="module")
def trained_runs(tiny_cohort):
    """Two finished runs (seeds 0 and 1) on the tiny cohort."""
    with tempfile.TemporaryDirectory() as tmpdir:
        cfg = TrainConfig.desk_scale(**QUICK)
        dirs = []
        for seed in (0, 1):
            run_dir = Path(tmpdir) / f"full_seed{seed}"
            train(replace(cfg, seed=seed), tiny_cohort.manifest, tiny_cohort.cache, run_dir)
            dirs.append(run_dir)
        yield dirs


# =============================================================================
# DATA
# =============================================================================

@pytest.mark.asyncio
async def test_synth_writes_manifest_and_audio():
    """Test that synth writes a subject-disjoint synthetic cohort."""
    with tempfile.TemporaryDirectory() as tmpdir:
        result = await pafa_synth(out_dir=tmpdir, n_patients=5, samples_per_patient=3, seed=2)

        assert result["success"] is True
        assert result["summary"]["samples"] == 15
        assert result["summary"]["train_patients"] + result["summary"]["test_patients"] == 5
        assert Path(result["manifest"]).exists()
        assert len(list((Path(tmpdir) / "wav").glob("*.wav"))) == 15


@pytest.mark.asyncio
async def test_synth_rejects_single_patient():
    """Test that synth reports a usage error for one patient."""
    with tempfile.TemporaryDirectory() as tmpdir:
        result = await pafa_synth(out_dir=tmpdir, n_patients=1)
        assert result["success"] is False
        assert result["exit_code"] == 1


@pytest.mark.asyncio
async def test_features_are_identical_across_job_counts():
    """Test that parallel extraction writes the same bytes as a single worker."""
    with tempfile.TemporaryDirectory() as tmpdir:
        synth = await pafa_synth(out_dir=str(Path(tmpdir) / "data"), n_patients=3, samples_per_patient=2)
        one = await pafa_features(manifest=synth["manifest"], cache_dir=str(Path(tmpdir) / "c1"), jobs=1)
        two = await pafa_features(manifest=synth["manifest"], cache_dir=str(Path(tmpdir) / "c2"), jobs=2)

        assert one["summary"]["extracted"] == two["summary"]["extracted"] == 6
        assert two["summary"]["missing"] == 0
        for path in sorted((Path(tmpdir) / "c1" / "utterance").glob("*.pafb")):
            twin = Path(tmpdir) / "c2" / "utterance" / path.name
            assert path.read_bytes() == twin.read_bytes()

        again = await pafa_features(manifest=synth["manifest"], cache_dir=str(Path(tmpdir) / "c1"))
        assert again["summary"]["extracted"] == 0
        assert again["summary"]["cached"] == 6


@pytest.mark.asyncio
async def test_features_report_unreadable_audio():
    """Test that a broken recording is listed as failed and the rest still extract."""
    with tempfile.TemporaryDirectory() as tmpdir:
        synth = await pafa_synth(out_dir=str(Path(tmpdir) / "data"), n_patients=2, samples_per_patient=2)
        victim = next((Path(tmpdir) / "data" / "wav").glob("*.wav"))
        victim.write_bytes(b"not audio")
        result = await pafa_features(manifest=synth["manifest"], cache_dir=str(Path(tmpdir) / "cache"))

        assert result["success"] is True
        assert result["summary"]["failed"] >= 1
        assert result["summary"]["extracted"] + result["summary"]["failed"] == 4


@pytest.mark.asyncio
async def test_prepare_small_directory_skips_reference_check():
    """Test that a partial ICBHI-style directory validates and skips the corpus check."""
    with tempfile.TemporaryDirectory() as tmpdir:
        root = Path(tmpdir) / "icbhi"
        root.mkdir()
        t = np.arange(8000) / 4000
        for patient in (101, 102, 103):
            stem = f"{patient}_1b1_Al_sc_Meditron"
            sf.write(str(root / f"{stem}.wav"), 0.1 * np.sin(2 * np.pi * 300 * t), 4000)
            (root / f"{stem}.txt").write_text("0.0 0.9 0 0\n0.9 1.8 1 0\n")

        result = await pafa_prepare(root_dir=str(root), out=str(Path(tmpdir) / "manifest.csv"))

        assert result["success"] is True
        assert result["summary"]["samples"] == 6
        assert result["summary"]["icbhi_check"] == "SKIPPED"
        assert result["statistics"]["train"]["patients"] + result["statistics"]["test"]["patients"] == 3


@pytest.mark.skipif(not os.environ.get("PAFA_ICBHI_DIR"), reason="set PAFA_ICBHI_DIR to the ICBHI 2017 audio directory")
@pytest.mark.asyncio
async def test_prepare_full_icbhi_corpus():
    """Test that the full corpus yields 126 patients and 6898 cycles."""
    with tempfile.TemporaryDirectory() as tmpdir:
        result = await pafa_prepare(
            root_dir=os.environ["PAFA_ICBHI_DIR"],
            out=str(Path(tmpdir) / "manifest.csv"),
            split_file=os.environ.get("PAFA_ICBHI_SPLIT"),
        )
        assert result["success"] is True
        assert result["summary"]["samples"] == 6898
        if os.environ.get("PAFA_ICBHI_SPLIT"):
            assert result["reference_check"]["status"] == "PASS"


# =============================================================================
# GRADCHECK / TRAIN / EVAL
# =============================================================================

@pytest.mark.asyncio
async def test_gradcheck_passes():
    """Test the gradient check on another seed and width."""
    result = await pafa_gradcheck(trials=20, dim=16, seed=7)
    assert result["success"] is True
    assert result["summary"]["status"] == "PASS"
    assert result["max_rel_err"] <= 1e-4


@pytest.mark.asyncio
async def test_gradcheck_failure_is_numeric_error():
    """Test that an impossible tolerance fails with exit code 3."""
    result = await pafa_gradcheck(trials=2, tol=0.0)
    assert result["success"] is False
    assert result["exit_code"] == 3
    assert result["error_type"] == "NumericError"


@pytest.mark.asyncio
async def test_train_and_reevaluate(tiny_cohort):
    """Test that train reports metrics and eval re-scores the saved checkpoint."""
    with tempfile.TemporaryDirectory() as tmpdir:
        trained = await pafa_train(
            manifest=str(tiny_cohort.manifest_path), run_dir=tmpdir,
            cache_dir=str(tiny_cohort.cache_root), **QUICK,
        )
        assert trained["success"] is True
        assert trained["summary"]["epochs"] == 2
        assert {"sp", "se", "score", "two_class_score"} <= set(trained["summary"])

        evaluated = await pafa_eval(
            run_dir=tmpdir, manifest=str(tiny_cohort.manifest_path), cache_dir=str(tiny_cohort.cache_root),
        )
        assert evaluated["success"] is True
        assert evaluated["task"] == "4class"
        assert evaluated["summary"]["n"] == len(tiny_cohort.manifest.split("test"))
        assert 0.0 <= evaluated["summary"]["score"] <= 100.0
        records = load_metrics(tmpdir)
        assert len(records) == 4
        # re-scoring the checkpoint reproduces the metrics train reported
        assert records[2:] == records[:2]


@pytest.mark.asyncio
async def test_train_unknown_option_is_usage_error(tiny_cohort):
    """Test that an unknown training option is rejected."""
    with tempfile.TemporaryDirectory() as tmpdir:
        result = await pafa_train(manifest=str(tiny_cohort.manifest_path), run_dir=tmpdir, momentum=0.9)
        assert result["exit_code"] == 1


@pytest.mark.asyncio
async def test_train_missing_manifest_is_data_error():
    """Test that a missing manifest fails with exit code 2."""
    with tempfile.TemporaryDirectory() as tmpdir:
        result = await pafa_train(manifest=str(Path(tmpdir) / "absent.csv"), run_dir=tmpdir)
        assert result["success"] is False
        assert result["exit_code"] == 2


@pytest.mark.asyncio
async def test_eval_predictions_file():
    """Test Sp 82.05, Se 47.63, Score 64.84 from a predictions file."""
    with tempfile.TemporaryDirectory() as tmpdir:
        path = write_prediction_file(Path(tmpdir) / "predictions.csv")
        result = await pafa_eval(predictions=str(path))

        assert result["success"] is True
        assert result["summary"]["sp"] == 82.05
        assert result["summary"]["se"] == 47.63
        assert result["summary"]["score"] == 64.84
        assert result["summary"]["n"] == 12000


@pytest.mark.asyncio
async def test_eval_without_inputs_is_usage_error():
    """Test that eval needs a predictions file or a run with its manifest."""
    result = await pafa_eval(run_dir="somewhere")
    assert result["exit_code"] == 1


# =============================================================================
# EMBEDDINGS / PATIENT ANALYSIS / ABLATION
# =============================================================================

@pytest.mark.asyncio
async def test_export_embeddings_is_deterministic(tiny_cohort, trained_runs):
    """Test that exporting twice gives identical projection embeddings."""
    with tempfile.TemporaryDirectory() as tmpdir:
        args = {"run_dir": str(trained_runs[0]), "manifest": str(tiny_cohort.manifest_path),
                "cache_dir": str(tiny_cohort.cache_root)}
        first = await pafa_export_embeddings(out=str(Path(tmpdir) / "a.csv"), **args)
        second = await pafa_export_embeddings(out=str(Path(tmpdir) / "b.csv"), **args)

        assert first["success"] is True
        assert first["summary"]["rows"] == len(tiny_cohort.manifest)
        assert first["summary"]["dim"] == 16
        assert first["summary"]["fallback"] is False
        assert (Path(tmpdir) / "a.csv").read_bytes() == (Path(tmpdir) / "b.csv").read_bytes()


@pytest.mark.asyncio
async def test_export_embeddings_falls_back_without_projection(tiny_cohort, trained_runs):
    """Test that a stripped checkpoint exports encoder outputs with a fallback flag."""
    with tempfile.TemporaryDirectory() as tmpdir:
        run_dir = Path(tmpdir) / "lean"
        params = load_checkpoint(checkpoint_path(trained_runs[0]))
        save_checkpoint(checkpoint_path(run_dir), strip_projection(params))
        result = await pafa_export_embeddings(
            run_dir=str(run_dir), manifest=str(tiny_cohort.manifest_path), out=str(Path(tmpdir) / "e.csv"),
            split="test", cache_dir=str(tiny_cohort.cache_root),
        )
        assert result["summary"]["fallback"] is True
        assert "fallback" in pd.read_csv(Path(tmpdir) / "e.csv").columns


@pytest.mark.asyncio
async def test_patient_analysis_with_comparison(tiny_cohort, trained_runs):
    """Test references from training patients, ranking and per-patient deltas."""
    with tempfile.TemporaryDirectory() as tmpdir:
        emb = Path(tmpdir) / "emb.csv"
        await pafa_export_embeddings(run_dir=str(trained_runs[0]), manifest=str(tiny_cohort.manifest_path),
                                     out=str(emb), cache_dir=str(tiny_cohort.cache_root))
        result = await pafa_patient_analysis(
            embeddings=str(emb), make_references=str(Path(tmpdir) / "refs.csv"), top_n=2,
            k=3, compare=[str(d) for d in trained_runs], out=str(Path(tmpdir) / "ranking.csv"),
        )

        assert result["success"] is True
        assert result["summary"]["k"] == 3
        test_patients = set(tiny_cohort.manifest.split("test").patients())
        ranking = result["ranking"]
        assert {r["patient"] for r in ranking} <= test_patients
        assert [r["distance"] for r in ranking] == sorted(r["distance"] for r in ranking)
        assert all(r["delta"] == r["acc_b"] - r["acc_a"] for r in ranking)
        assert list(pd.read_csv(Path(tmpdir) / "ranking.csv").columns) == [
            "rank", "patient", "distance", "reference", "acc_a", "acc_b", "delta"]


@pytest.mark.asyncio
async def test_patient_analysis_needs_references(tiny_cohort, trained_runs):
    """Test the usage error when no references are given."""
    with tempfile.TemporaryDirectory() as tmpdir:
        emb = Path(tmpdir) / "emb.csv"
        await pafa_export_embeddings(run_dir=str(trained_runs[0]), manifest=str(tiny_cohort.manifest_path),
                                     out=str(emb), cache_dir=str(tiny_cohort.cache_root))
        result = await pafa_patient_analysis(embeddings=str(emb))
        assert result["exit_code"] == 1


@pytest.mark.asyncio
async def test_ablate_aggregates_existing_runs(trained_runs):
    """Test that --runs mode tabulates finished runs without training."""
    with tempfile.TemporaryDirectory() as tmpdir:
        result = await pafa_ablate(out_dir=tmpdir, runs=[str(d) for d in trained_runs])

        assert result["success"] is True
        assert result["summary"]["runs"] == 2
        assert [r["seed"] for r in result["table"]] == [0, 1]
        assert result["variants"][0]["n_seeds"] == 2
        assert (Path(tmpdir) / "ablation.csv").exists()
        assert (Path(tmpdir) / "ablation_summary.csv").exists()
        assert (Path(trained_runs[0]) / PATIENTS_FILE).exists()


@pytest.mark.asyncio
async def test_ablate_needs_an_input():
    """Test that ablate without manifest, runs or benchmark is a usage error."""
    with tempfile.TemporaryDirectory() as tmpdir:
        result = await pafa_ablate(out_dir=tmpdir)
        assert result["exit_code"] == 1
        result = await pafa_ablate(out_dir=tmpdir, runs=["x"], variants=["everything"])
        assert result["exit_code"] == 1


@pytest.mark.asyncio
async def test_ablate_lambda_grid(tiny_cohort):
    """Test a pcsl sweep with the configured gpal weight and a single best pair."""
    with tempfile.TemporaryDirectory() as tmpdir:
        result = await pafa_ablate(
            out_dir=tmpdir, manifest=str(tiny_cohort.manifest_path), seeds=[0],
            grid_pcsl=[0.0, 50.0], cache_dir=str(tiny_cohort.cache_root), **QUICK,
        )
        assert result["success"] is True
        assert result["summary"]["runs"] == 2
        assert result["summary"]["pairs"] == 2
        assert [r["lambda_gpal"] for r in result["table"]] == [0.0005, 0.0005]
        assert result["summary"]["best_lambda_pcsl"] in (0.0, 50.0)
        assert sum(bool(r["best"]) for r in result["grid"]) == 1
        assert (Path(tmpdir) / "lambda_grid.csv").exists()
        assert (Path(tmpdir) / "lambda_grid_summary.csv").exists()
        assert not (Path(tmpdir) / "ablation.csv").exists()


@pytest.mark.asyncio
async def test_ablate_lambda_grid_usage_errors(tiny_cohort):
    """Test that a grid needs a manifest and excludes --runs and --benchmark."""
    with tempfile.TemporaryDirectory() as tmpdir:
        result = await pafa_ablate(out_dir=tmpdir, grid_pcsl=[1.0])
        assert result["exit_code"] == 1
        result = await pafa_ablate(out_dir=tmpdir, runs=["x"], grid_gpal=[0.1])
        assert result["exit_code"] == 1
        result = await pafa_ablate(out_dir=tmpdir, manifest=str(tiny_cohort.manifest_path),
                                   benchmark=True, grid_pcsl=[1.0])
        assert result["exit_code"] == 1
        result = await pafa_ablate(out_dir=tmpdir, manifest=str(tiny_cohort.manifest_path),
                                   seeds=[0], grid_pcsl=[-1.0], cache_dir=str(tiny_cohort.cache_root), **QUICK)
        assert result["exit_code"] == 1


@pytest.mark.slow
@pytest.mark.asyncio
async def test_benchmark_reports_directional_status():
    """Test the full vs ce_only benchmark over five seeds on the generated cohort."""
    with tempfile.TemporaryDirectory() as tmpdir:
        result = await pafa_ablate(out_dir=tmpdir, benchmark=True, cache_dir=str(Path(tmpdir) / "cache"), jobs=4)

        assert result["success"] is True
        assert result["summary"]["runs"] == 10
        assert result["summary"]["status"] in ("PASS", "SOFT_FAIL")
        per_seed = pd.read_csv(Path(tmpdir) / "benchmark.csv")
        assert list(per_seed.columns) == ["seed", "full", "ce_only", "win"]
        assert len(per_seed) == 5
