"""
pafa eval / export-embeddings / patient-analysis.
"""

import asyncio
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from ..checkpoint import load_checkpoint
from ..datamodel import ClassLabel4
from ..errors import DataError, UsageError
from ..evaluation import (
    TASKS,
    compare_runs,
    embedding_table,
    evaluate_task,
    metrics_record,
    nearest_test_patients,
    per_patient_accuracy,
    read_embeddings,
    read_patient_report,
    read_references,
    reference_centroids,
    round_percent,
    write_embeddings,
    write_patient_report,
    write_references,
)
from ..model import forward_pooled
from ..rundir import PATIENTS_FILE, PREDICTIONS_FILE, append_metrics, checkpoint_path, read_config
from ..trainer import TrainConfig, evaluate_rows, load_pooled, write_predictions
from .common import load_manifest, open_cache, reports_errors

logger = logging.getLogger("pafa.tools.analysis")


def _class_index(value: Any) -> int:
    text = str(value).strip()
    if text.isdigit():
        return int(text)
    return int(ClassLabel4.from_token(text))


def read_predictions(path: str) -> pd.DataFrame:
    """predictions.csv with at least `label,pred` (indices or label tokens)."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot read predictions {path}: {e}") from e
    missing = [c for c in ("label", "pred") if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    frame["label"] = [_class_index(v) for v in frame["label"]]
    frame["pred"] = [_class_index(v) for v in frame["pred"]]
    if "patient" in frame.columns:
        frame["patient"] = frame["patient"].astype(int)
    return frame


@reports_errors
async def pafa_eval(
    run_dir: Optional[str] = None,
    manifest: Optional[str] = None,
    predictions: Optional[str] = None,
    task: Optional[str] = None,
    split: str = "test",
    cache_dir: Optional[str] = None,
    normalization: str = "utterance",
) -> Dict[str, Any]:
    """
    ICBHI Sp / Se / Score for a trained run or a predictions file.

    Args:
        run_dir: Trained run to re-evaluate (needs manifest)
        manifest: Manifest the run was trained on
        predictions: CSV with label,pred[,patient] instead of a run
        task: 4class | 2class (default: the run's task, or 4class)
        split: Manifest split to evaluate
        cache_dir / normalization: Feature cache to read

    Returns:
        Dict with the metric triple (raw and rounded to 2 decimals)
    """
    if task is not None and task not in TASKS:
        raise UsageError(f"Unknown task {task!r}; expected one of {TASKS}")

    if predictions is not None:
        frame = read_predictions(predictions)
        task = task or "4class"
        triple = evaluate_task(frame["pred"].to_numpy(), frame["label"].to_numpy(), task, n_classes=4)
        result: Dict[str, Any] = {
            "success": True,
            "task": task,
            "metrics": metrics_record(task, triple, len(frame), None),
            "summary": {"task": task, **triple.rounded(), "n": len(frame)},
        }
        if "patient" in frame.columns:
            report = per_patient_accuracy(frame["pred"], frame["label"], frame["patient"].tolist())
            result["patients"] = [{"patient": r.patient, "accuracy": r.accuracy} for r in report]
        return result

    if run_dir is None or manifest is None:
        raise UsageError("eval needs --predictions, or --run together with --manifest")
    cfg = TrainConfig.from_flat(read_config(run_dir))
    params = load_checkpoint(checkpoint_path(run_dir))
    m = load_manifest(manifest)
    if cfg.task == "2class":
        m = m.relabel_two_class()
    rows = m.split(split).rows
    if not rows:
        raise DataError(f"Manifest has no {split!r} samples")
    cache = open_cache(cache_dir, normalization)
    pooled, _ = await asyncio.to_thread(load_pooled, cache, rows)
    preds, triples = evaluate_rows(params, rows, pooled, cfg.task)
    if task is not None and task not in triples:
        raise UsageError(f"A {cfg.task} run cannot be scored as {task}")
    task = task or next(iter(triples))

    run = Path(run_dir)
    for name, triple in triples.items():
        append_metrics(run, metrics_record(name, triple, len(rows), cfg.seed))
    write_predictions(run / PREDICTIONS_FILE, rows, preds)
    write_patient_report(run / PATIENTS_FILE, per_patient_accuracy(
        preds, [int(r.label) for r in rows], [r.patient for r in rows]))

    triple = triples[task]
    return {
        "success": True,
        "task": task,
        "metrics": {name: metrics_record(name, t, len(rows), cfg.seed) for name, t in triples.items()},
        "summary": {"task": task, **triple.rounded(), "n": len(rows)},
    }


@reports_errors
async def pafa_export_embeddings(
    run_dir: str,
    manifest: str,
    out: str,
    split: str = "all",
    cache_dir: Optional[str] = None,
    normalization: str = "utterance",
) -> Dict[str, Any]:
    """
    Write one embedding row per sample for external visualization.

    Projection-head outputs are exported when the checkpoint keeps the
    head; a stripped checkpoint falls back to encoder outputs and the file
    gets a `fallback` column.

    Args:
        run_dir: Trained run directory
        manifest: Manifest listing the samples
        out: Embedding CSV to write
        split: train | test | all
        cache_dir / normalization: Feature cache to read

    Returns:
        Dict with row count, dimension and skipped sample ids
    """
    params = load_checkpoint(checkpoint_path(run_dir))
    m = load_manifest(manifest)
    cache = open_cache(cache_dir, normalization)
    rows = m.split(split).rows
    present = [r for r in rows if cache.has(r.sample_id)]
    skipped = [r.sample_id for r in rows if not cache.has(r.sample_id)]
    for sample_id in skipped:
        logger.warning(f"No cached features for {sample_id}; not exported")
    if not present:
        raise DataError("None of the selected samples have cached features")

    pooled, _ = await asyncio.to_thread(load_pooled, cache, present)
    output = forward_pooled(params, np.stack([pooled[r.sample_id] for r in present]))
    fallback = output.proj is None
    if fallback:
        logger.warning("Checkpoint has no projection head; exporting encoder outputs")
    matrix = output.encoder_out if fallback else output.proj
    path = write_embeddings(out, embedding_table(present, matrix, fallback))
    return {
        "success": True,
        "out": str(path),
        "skipped": skipped,
        "summary": {"out": str(path), "rows": len(present), "dim": matrix.shape[1],
                    "skipped": len(skipped), "fallback": fallback},
    }


@reports_errors
async def pafa_patient_analysis(
    embeddings: str,
    references: Optional[str] = None,
    make_references: Optional[str] = None,
    reference_patients: Optional[Sequence[int]] = None,
    top_n: Optional[int] = None,
    reference_split: str = "train",
    split: str = "test",
    k: int = 6,
    compare: Optional[Sequence[str]] = None,
    out: Optional[str] = None,
) -> Dict[str, Any]:
    """
    Rank test patients by closeness to reference centroids.

    Args:
        embeddings: Embedding CSV from export-embeddings
        references: Reference centroid CSV (name,c0..)
        make_references: Build references from `reference_split`
            embeddings first and write them here
        reference_patients: Patient ids for make_references
        top_n: Or take the N patients with the most samples
        reference_split / split: Where references and ranked patients come from
        k: Number of nearest patients to return
        compare: Two run directories; adds their per-patient accuracies
        out: Optional CSV with the ranking (and accuracy deltas)

    Returns:
        Dict with the ranked patients
    """
    table = read_embeddings(embeddings)
    if make_references:
        refs = reference_centroids(table.select(reference_split), patient_ids=reference_patients, top_n=top_n)
        write_references(make_references, refs)
        logger.info(f"Wrote {len(refs)} reference centroids to {make_references}")
        references = references or make_references
    if not references:
        raise UsageError("patient-analysis needs --references or --make-references")

    refs = read_references(references)
    ranked_on = table.select(split)
    if len(ranked_on) == 0:
        raise DataError(f"No {split!r} embeddings in {embeddings}")
    ranked = nearest_test_patients(refs, ranked_on.matrix, ranked_on.patients, k)
    records: List[Dict[str, Any]] = [
        {"rank": i, "patient": r.patient, "distance": r.distance, "reference": r.reference}
        for i, r in enumerate(ranked, start=1)
    ]

    if compare:
        if len(compare) != 2:
            raise UsageError("--compare takes exactly two run directories")
        run_a, run_b = compare
        deltas = compare_runs(
            read_patient_report(Path(run_a) / PATIENTS_FILE),
            read_patient_report(Path(run_b) / PATIENTS_FILE),
            [r.patient for r in ranked],
        )
        for record, delta in zip(records, deltas):
            record.update({"acc_a": delta.acc_a, "acc_b": delta.acc_b, "delta": delta.delta})

    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(records).to_csv(out, index=False, float_format="%.6f", lineterminator="\n")

    summary: Dict[str, Any] = {"patients": ",".join(str(r.patient) for r in ranked), "k": len(ranked)}
    if compare:
        summary["mean_delta"] = round_percent(float(np.mean([r["delta"] for r in records])))
    return {"success": True, "ranking": records, "summary": summary}
