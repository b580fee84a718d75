"""
pafa gradcheck / train / ablate.
"""

import asyncio
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence

import pandas as pd

from ..errors import DataError, NumericError, UsageError
from ..evaluation import round_percent
from ..ingest import SynthConfig, generate_synthetic, write_synthetic
from ..losses import LossWeights, gradcheck
from ..trainer import (
    VARIANTS,
    TrainConfig,
    ablation_suite,
    collect_runs,
    directional_benefit,
    lambda_grid,
    summarize_ablation,
    summarize_lambda_grid,
    train,
    write_ablation,
)
from .common import load_manifest, open_cache, reports_errors
from .data import pafa_features

logger = logging.getLogger("pafa.tools.training")

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
BENCHMARK_FILE = "benchmark.csv"
BENCHMARK_COHORT = {"n_patients": 20, "samples_per_patient": 20, "nuisance_strength": 1.0}


def resolve_train_config(provenance: str, options: Mapping[str, Any], full_scale: bool = False) -> TrainConfig:
    """
    Defaults for the manifest (desk scale for synthetic cohorts), then
    every option that was actually given.
    """
    base = TrainConfig() if full_scale or provenance != "synthetic" else TrainConfig.desk_scale()
    values = base.to_flat()
    given = {k: v for k, v in options.items() if v is not None}
    unknown = sorted(set(given) - set(values))
    if unknown:
        raise UsageError(f"Unknown training options: {unknown}")
    if "batch_size" not in given and ("sampler_p" in given or "sampler_k" in given):
        given["batch_size"] = int(given.get("sampler_p", values["sampler_p"])) * int(
            given.get("sampler_k", values["sampler_k"]))
    values.update(given)
    flat = {k: ",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else v for k, v in values.items()}
    try:
        return TrainConfig.from_flat(flat)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _metric_summary(metrics: Mapping[str, Any]) -> Dict[str, Any]:
    summary: Dict[str, Any] = {}
    for task, record in metrics.items():
        prefix = "" if task == "4class" or len(metrics) == 1 else "two_class_"
        for key in ("sp", "se", "score"):
            summary[f"{prefix}{key}"] = round_percent(record[key])
    return summary


@reports_errors
async def pafa_gradcheck(
    trials: int = 100,
    batch: int = 16,
    dim: int = 8,
    seed: int = 0,
    h: float = 1e-5,
    tol: float = 1e-4,
    min_patients: int = 2,
    max_patients: int = 6,
    lambda_pcsl: Optional[float] = None,
    lambda_gpal: Optional[float] = None,
) -> Dict[str, Any]:
    """
    Verify the PCSL/GPAL gradients against central differences.

    Args:
        trials: Random batches to check
        batch: Rows per batch
        dim: Embedding dimension
        seed: Seed of the batch generator
        h: Finite-difference step
        tol: Maximum accepted relative error
        min_patients / max_patients: Patient count range per batch
        lambda_pcsl / lambda_gpal: Loss weights (defaults 50 / 0.0005)

    Returns:
        Dict with max_rel_err and the per-trial table; failure (exit 3)
        when the tolerance is exceeded
    """
    if trials < 1 or batch < 2 or dim < 1:
        raise UsageError("need trials >= 1, batch >= 2, dim >= 1")
    if not 1 <= min_patients <= max_patients:
        raise UsageError("need 1 <= min_patients <= max_patients")
    defaults = LossWeights()
    weights = LossWeights(
        defaults.lambda_pcsl if lambda_pcsl is None else lambda_pcsl,
        defaults.lambda_gpal if lambda_gpal is None else lambda_gpal,
    )
    report = await asyncio.to_thread(
        gradcheck, trials, batch, dim, seed, h, weights, min_patients, max_patients, tol)
    table = report.format_table()
    logger.info(f"gradient check\n{table.rstrip()}")
    if not report.passed:
        raise NumericError(f"Gradient check failed: max_rel_err={report.max_rel_err:.3e} > tol={tol:g}")
    return {
        "success": True,
        "max_rel_err": report.max_rel_err,
        "table": table,
        "summary": {"max_rel_err": f"{report.max_rel_err:.3e}", "trials": trials, "status": "PASS"},
    }


@reports_errors
async def pafa_train(
    manifest: str,
    run_dir: str,
    cache_dir: Optional[str] = None,
    normalization: str = "utterance",
    full_scale: bool = False,
    **train_options,
) -> Dict[str, Any]:
    """
    Train one model and evaluate it on the test split.

    Args:
        manifest: Manifest CSV whose features are cached
        run_dir: Output run directory
        cache_dir: Feature cache root
        normalization: Which cached feature variant to train on
        full_scale: Use full-scale defaults even for synthetic manifests
        **train_options: TrainConfig flat keys (variant, lr, epochs, seed, ...)

    Returns:
        Dict with per-epoch losses, metrics and the run directory
    """
    m = load_manifest(manifest)
    cfg = resolve_train_config(m.provenance, train_options, full_scale)
    cache = open_cache(cache_dir, normalization)
    record = await asyncio.to_thread(train, cfg, m, cache, run_dir)
    final = record.epochs[-1]
    return {
        "success": True,
        "run_dir": str(run_dir),
        "config": record.config,
        "epochs": [asdict(e) for e in record.epochs],
        "metrics": record.metrics,
        "wall_clock_s": record.wall_clock_s,
        "summary": {
            "run_dir": str(run_dir),
            "variant": cfg.variant,
            "seed": cfg.seed,
            "epochs": len(record.epochs),
            "final_total": f"{final.total:.6g}",
            **_metric_summary(record.metrics),
        },
    }


async def _benchmark_manifest(out_dir: Path, cache_dir: Optional[str], normalization: str, jobs: int) -> str:
    data_dir = out_dir / "benchmark_data"
    cohort = SynthConfig(seed=0, **BENCHMARK_COHORT)
    m, samples = await asyncio.to_thread(generate_synthetic, cohort)
    path = await asyncio.to_thread(write_synthetic, data_dir, m, samples)
    extracted = await pafa_features(manifest=str(path), cache_dir=cache_dir,
                                    normalization=normalization, jobs=jobs)
    if not extracted["success"]:
        raise DataError(extracted["error"])
    return str(path)


async def _run_lambda_grid(out: Path, manifest: str, grid_pcsl: Optional[Sequence[float]],
                           grid_gpal: Optional[Sequence[float]], seeds: Sequence[int],
                           cache_dir: Optional[str], normalization: str, full_scale: bool,
                           train_options: Mapping[str, Any]) -> Dict[str, Any]:
    m = load_manifest(manifest)
    base = resolve_train_config(m.provenance, train_options, full_scale)
    pcsl_values = tuple(grid_pcsl) if grid_pcsl else (base.weights.lambda_pcsl,)
    gpal_values = tuple(grid_gpal) if grid_gpal else (base.weights.lambda_gpal,)
    cache = open_cache(cache_dir, normalization)
    table = await asyncio.to_thread(lambda_grid, m, base, pcsl_values, gpal_values, seeds, cache, out)

    summary_table = summarize_lambda_grid(table)
    best = summary_table[summary_table["best"]].iloc[0]
    logger.info(f"Best lambdas: pcsl={best['lambda_pcsl']:g} gpal={best['lambda_gpal']:g} "
                f"score={best['score_formatted']}")
    return {
        "success": True,
        "table": table.to_dict(orient="records"),
        "grid": summary_table.to_dict(orient="records"),
        "summary": {
            "out_dir": str(out),
            "runs": len(table),
            "pairs": len(summary_table),
            "best_lambda_pcsl": float(best["lambda_pcsl"]),
            "best_lambda_gpal": float(best["lambda_gpal"]),
            "best_score": round_percent(float(best["score_mean"])),
        },
    }


@reports_errors
async def pafa_ablate(
    out_dir: str,
    manifest: Optional[str] = None,
    runs: Optional[Sequence[str]] = None,
    seeds: Optional[Sequence[int]] = None,
    variants: Sequence[str] = VARIANTS,
    benchmark: bool = False,
    grid_pcsl: Optional[Sequence[float]] = None,
    grid_gpal: Optional[Sequence[float]] = None,
    cache_dir: Optional[str] = None,
    normalization: str = "utterance",
    jobs: int = 1,
    full_scale: bool = False,
    **train_options,
) -> Dict[str, Any]:
    """
    Ablation table over variants x seeds, or aggregation of existing runs.

    Args:
        out_dir: Where ablation.csv, ablation_summary.csv and run dirs go
        manifest: Manifest to train on (not needed with runs)
        runs: Existing run directories to aggregate instead of training
        seeds: Seeds per variant (default 0..4)
        variants: Subset of full, ce_only, no_pcsl, no_gpal
        benchmark: Run the full vs ce_only directional check; without a
            manifest a 20 x 20 synthetic cohort is generated first
        grid_pcsl / grid_gpal: Lambda values to sweep with the full
            objective; an axis left out keeps its configured weight
        cache_dir / normalization: Feature cache to read
        jobs: Feature-extraction threads for the generated benchmark cohort
        full_scale: Full-scale defaults even for synthetic manifests
        **train_options: TrainConfig flat keys shared by every run

    Returns:
        Dict with the per-run table, the per-variant (or per lambda pair)
        summary and, for the benchmark, a PASS / SOFT_FAIL status
    """
    out = Path(out_dir)
    unknown = sorted(set(variants) - set(VARIANTS))
    if unknown:
        raise UsageError(f"Unknown variants: {unknown}")
    seeds = tuple(int(s) for s in (seeds if seeds else DEFAULT_SEEDS))

    if grid_pcsl or grid_gpal:
        if runs or benchmark:
            raise UsageError("A lambda grid cannot be combined with --runs or --benchmark")
        if manifest is None:
            raise UsageError("A lambda grid needs --manifest")
        return await _run_lambda_grid(out, manifest, grid_pcsl, grid_gpal, seeds, cache_dir,
                                      normalization, full_scale, train_options)

    if runs:
        table = collect_runs(list(runs))
        write_ablation(out, table)
    else:
        if manifest is None:
            if not benchmark:
                raise UsageError("ablate needs --manifest, --runs or --benchmark")
            manifest = await _benchmark_manifest(out, cache_dir, normalization, jobs)
        if benchmark:
            variants = ("full", "ce_only")
        m = load_manifest(manifest)
        base = resolve_train_config(m.provenance, train_options, full_scale)
        cache = open_cache(cache_dir, normalization)
        table = await asyncio.to_thread(ablation_suite, m, base, seeds, cache, out, tuple(variants))

    summary_table = summarize_ablation(table)
    result: Dict[str, Any] = {
        "success": True,
        "table": table.to_dict(orient="records"),
        "variants": summary_table.to_dict(orient="records"),
        "summary": {"out_dir": str(out), "runs": len(table), "variants": len(summary_table)},
    }

    means = dict(zip(summary_table["variant"], summary_table["score_mean"]))
    if "full" in means and len(means) > 1:
        result["full_is_best"] = all(means["full"] >= v for k, v in means.items() if k != "full")
        result["summary"]["full_is_best"] = result["full_is_best"]

    if benchmark:
        outcome = directional_benefit(table)
        per_seed = pd.DataFrame(list(outcome.per_seed))
        per_seed.to_csv(out / BENCHMARK_FILE, index=False, float_format="%.6f", lineterminator="\n")
        if outcome.status != "PASS":
            logger.warning(f"Directional benefit not observed: full won {outcome.wins}/{len(outcome.per_seed)} seeds")
        result["benchmark"] = outcome.to_dict()
        result["summary"].update({
            "status": outcome.status,
            "wins": outcome.wins,
            "mean_full": round_percent(outcome.mean_full),
            "mean_ce_only": round_percent(outcome.mean_ce_only),
        })
    return result
