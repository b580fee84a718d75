"""
pafa synth / prepare / features - getting audio into the feature cache.

synth     writes a synthetic cohort (WAVs + manifest.csv)
prepare   builds a manifest from an ICBHI-style directory
features  extracts fbank matrices for every manifest row into the cache
"""

import asyncio
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from ..datamodel import Manifest, validate_manifest, write_manifest
from ..errors import DataError, UsageError
from ..features import FbankMatrix, cache_stats, extract_sample
from ..ingest import OfficialSplit, RandomSplit, SynthConfig, build_manifest, generate_synthetic, write_synthetic
from .common import load_manifest, manifest_base_dir, open_cache, reports_errors

logger = logging.getLogger("pafa.tools.data")

# Reference per-split counts of the full corpus: Normal, Crackle, Wheeze, Both
ICBHI_REFERENCE_COUNTS = {
    "train": (2063, 1215, 501, 363),
    "test": (1579, 649, 385, 143),
}
ICBHI_PATIENTS = 126


def dataset_statistics(manifest: Manifest) -> Dict[str, Any]:
    stats: Dict[str, Any] = {}
    for split in ("train", "test"):
        part = manifest.split(split)
        stats[split] = {
            "samples": len(part),
            "patients": len(part.patients()),
            "class_counts": list(part.class_counts()),
        }
    return stats


def icbhi_reference_check(manifest: Manifest) -> Dict[str, Any]:
    """Compare class counts with the reference corpus; SKIPPED unless the full corpus is present."""
    if manifest.provenance != "icbhi" or len(manifest.patients()) != ICBHI_PATIENTS:
        return {"status": "SKIPPED", "reason": "full ICBHI corpus not present"}
    observed = {s: tuple(manifest.split(s).class_counts()) for s in ICBHI_REFERENCE_COUNTS}
    mismatches = {
        s: {"expected": list(ICBHI_REFERENCE_COUNTS[s]), "observed": list(observed[s])}
        for s in ICBHI_REFERENCE_COUNTS if observed[s] != ICBHI_REFERENCE_COUNTS[s]
    }
    return {"status": "MISMATCH" if mismatches else "PASS", "mismatches": mismatches}


@reports_errors
async def pafa_synth(
    out_dir: str,
    n_patients: int = 20,
    samples_per_patient: int = 20,
    seed: int = 0,
    nuisance_strength: float = 1.0,
    class_mix: Optional[Sequence[float]] = None,
) -> Dict[str, Any]:
    """
    Generate a synthetic cohort with per-patient recording nuisances.

    Args:
        out_dir: Destination; receives wav/ and manifest.csv
        n_patients: Number of synthetic patients (>= 2)
        samples_per_patient: Cycles per patient
        seed: Root seed for every random stream
        nuisance_strength: Scale of the patient-specific channel effects
        class_mix: Normal/Crackle/Wheeze/Both proportions

    Returns:
        Dict with the manifest path and cohort statistics
    """
    kwargs = {} if class_mix is None else {"class_mix": tuple(class_mix)}
    cfg = SynthConfig(
        n_patients=n_patients,
        samples_per_patient=samples_per_patient,
        seed=seed,
        nuisance_strength=nuisance_strength,
        **kwargs,
    )
    manifest, samples = await asyncio.to_thread(generate_synthetic, cfg)
    path = await asyncio.to_thread(write_synthetic, out_dir, manifest, samples)
    stats = dataset_statistics(manifest)
    logger.info(f"Wrote {len(manifest)} synthetic samples for {n_patients} patients to {out_dir}")
    return {
        "success": True,
        "manifest": str(path),
        "statistics": stats,
        "summary": {
            "manifest": str(path),
            "samples": len(manifest),
            "patients": n_patients,
            "train_patients": stats["train"]["patients"],
            "test_patients": stats["test"]["patients"],
        },
    }


@reports_errors
async def pafa_prepare(
    root_dir: str,
    out: str,
    split_file: Optional[str] = None,
    train_fraction: float = 0.6,
    seed: int = 0,
) -> Dict[str, Any]:
    """
    Build and validate a manifest from an ICBHI-style recording directory.

    Args:
        root_dir: Directory of <patient>_<...>.wav / .txt pairs
        out: Manifest CSV to write (audio paths are stored relative to it)
        split_file: Official "<recording> <train|test>" list; random
            subject-disjoint split by patient when omitted
        train_fraction: Patient fraction for the random split
        seed: Seed of the random split

    Returns:
        Dict with statistics, skipped files, validation and reference check
    """
    source = OfficialSplit(split_file) if split_file else RandomSplit(train_fraction, seed)
    out_path = Path(out)
    result = await asyncio.to_thread(build_manifest, root_dir, source, out_path.parent)
    report = validate_manifest(result.manifest)
    for violation in report.warnings:
        logger.warning(f"{violation.rule}: {violation.message}")
    if not report.valid:
        first = report.errors[0]
        raise DataError(f"Manifest is invalid ({len(report.errors)} errors), first: {first.rule}: {first.message}")

    path = write_manifest(result.manifest, out_path)
    stats = dataset_statistics(result.manifest)
    check = icbhi_reference_check(result.manifest)
    logger.info(f"ICBHI reference counts: {check['status']}")
    return {
        "success": True,
        "manifest": str(path),
        "statistics": stats,
        "skipped": [{"name": s.name, "reason": s.reason} for s in result.skipped],
        "validation": report.to_dict(),
        "reference_check": check,
        "summary": {
            "manifest": str(path),
            "samples": len(result.manifest),
            "train": stats["train"]["samples"],
            "test": stats["test"]["samples"],
            "skipped": len(result.skipped),
            "warnings": len(report.warnings),
            "icbhi_check": check["status"],
        },
    }


@reports_errors
async def pafa_features(
    manifest: str,
    cache_dir: Optional[str] = None,
    base_dir: Optional[str] = None,
    normalization: str = "utterance",
    jobs: int = 1,
    force: bool = False,
) -> Dict[str, Any]:
    """
    Extract 498 x 128 log-mel fbank matrices into the feature cache.

    Args:
        manifest: Manifest CSV
        cache_dir: Cache root (default $PAFA_CACHE_DIR or ./.pafa_cache)
        base_dir: Directory audio paths are relative to (default: manifest's)
        normalization: per_coefficient | utterance | none
        jobs: Worker threads; each sample is written independently
        force: Re-extract samples that are already cached

    Returns:
        Dict with extracted/cached/failed counts
    """
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    m = load_manifest(manifest)
    cache = open_cache(cache_dir, normalization)
    base = manifest_base_dir(manifest, base_dir)

    todo = [r for r in m.rows if force or not cache.has(r.sample_id)]
    limiter = asyncio.Semaphore(jobs)
    failed: List[Dict[str, str]] = []

    async def extract_one(row) -> Tuple[str, Optional[FbankMatrix]]:
        async with limiter:
            try:
                fbank = await asyncio.to_thread(extract_sample, row, base, normalization)
                await asyncio.to_thread(cache.write, row.sample_id, fbank)
                return row.sample_id, fbank
            except DataError as e:
                logger.warning(f"Skipped {row.sample_id}: {e}")
                failed.append({"sample_id": row.sample_id, "reason": str(e)})
                return row.sample_id, None

    await asyncio.gather(*(extract_one(r) for r in todo))
    failed.sort(key=lambda f: f["sample_id"])
    stats = cache_stats(cache, [r.sample_id for r in m.rows])
    extracted = len(todo) - len(failed)
    logger.info(f"Extracted {extracted} samples into {cache.directory} ({stats['cached']} cached in total)")
    return {
        "success": True,
        "cache_dir": str(cache.directory),
        "failed": failed,
        "summary": {
            "extracted": extracted,
            "cached": stats["cached"],
            "missing": stats["missing"],
            "failed": len(failed),
            "normalization": normalization,
        },
    }
