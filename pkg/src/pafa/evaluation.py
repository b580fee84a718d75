"""
ICBHI metrics, per-patient accuracy, embedding export and the
nearest-patient analysis.

Sp = correct Normal / all Normal
Se = exact-class hits among abnormal samples / all abnormal samples
Score = (Sp + Se) / 2

For the 2-class task predictions and labels are merged through map_4to2
first; Sp is unchanged by the merge and Se can only go up.
"""

import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from .datamodel import ClassLabel4, SampleMeta
from .errors import DataError, UsageError
from .losses import PatientGroups, patient_centroids

logger = logging.getLogger("pafa.evaluation")

TASKS = ("4class", "2class")
EMBEDDING_FLOAT_FORMAT = "%.7g"


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true, cols = predicted

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricTriple:
    sp: float
    se: float
    score: float

    @classmethod
    def from_rates(cls, sp: float, se: float) -> "MetricTriple":
        return cls(sp, se, (sp + se) / 2)

    def rounded(self) -> Dict[str, float]:
        return {
            "sp": round_percent(self.sp),
            "se": round_percent(self.se),
            "score": round_percent(self.score),
        }


def round_percent(value: float) -> float:
    """Two decimals, round-half-even on the shortest decimal repr."""
    return float(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def _as_indices(values, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.int64)
    if array.ndim != 1:
        raise DataError(f"{name} must be one-dimensional")
    return array


def confusion(preds, labels, n_classes: int = 4) -> ConfusionMatrix:
    preds = _as_indices(preds, "preds")
    labels = _as_indices(labels, "labels")
    if len(preds) != len(labels):
        raise DataError(f"{len(preds)} predictions for {len(labels)} labels")
    for name, array in (("labels", labels), ("preds", preds)):
        if array.size and (array.min() < 0 or array.max() >= n_classes):
            raise DataError(f"{name} must lie in [0, {n_classes})")
    counts = confusion_matrix(labels, preds, labels=list(range(n_classes)))
    return ConfusionMatrix(counts.astype(np.int64))


def se_sp_score(cm: ConfusionMatrix) -> MetricTriple:
    """Class 0 is Normal; every other class counts as abnormal."""
    counts = cm.counts
    normal_total = int(counts[0].sum())
    abnormal_total = int(counts[1:].sum())
    if normal_total == 0:
        raise DataError("No Normal samples: specificity is undefined")
    if abnormal_total == 0:
        raise DataError("No abnormal samples: sensitivity is undefined")
    sp = 100.0 * int(counts[0, 0]) / normal_total
    se = 100.0 * int(np.trace(counts[1:, 1:])) / abnormal_total
    return MetricTriple.from_rates(sp, se)


def merge_to_two_class(values) -> np.ndarray:
    return (_as_indices(values, "values") != int(ClassLabel4.NORMAL)).astype(np.int64)


def eval_two_class_from_four(preds4, labels4) -> MetricTriple:
    return se_sp_score(confusion(merge_to_two_class(preds4), merge_to_two_class(labels4), n_classes=2))


def evaluate_task(preds, labels, task: str, n_classes: int = 4) -> MetricTriple:
    """
    Metrics for one task. `n_classes` is the label space of preds/labels:
    4-class predictions scored as 2class are merged first.
    """
    if task not in TASKS:
        raise UsageError(f"Unknown task {task!r}; expected one of {TASKS}")
    if task == "4class":
        if n_classes != 4:
            raise UsageError("4class metrics need 4-class predictions")
        return se_sp_score(confusion(preds, labels, 4))
    if n_classes == 2:
        return se_sp_score(confusion(preds, labels, 2))
    return eval_two_class_from_four(preds, labels)


def metrics_record(task: str, triple: MetricTriple, n: int, seed: Optional[int]) -> Dict[str, Any]:
    return {"task": task, "sp": triple.sp, "se": triple.se, "score": triple.score, "n": int(n), "seed": seed}


# =============================================================================
# PER-PATIENT ACCURACY
# =============================================================================

@dataclass(frozen=True)
class PatientAccuracy:
    patient: int
    n_samples: int
    n_correct: int

    @property
    def accuracy(self) -> float:
        return 100.0 * self.n_correct / self.n_samples


def per_patient_accuracy(preds, labels, patients: Sequence[int]) -> List[PatientAccuracy]:
    preds = _as_indices(preds, "preds")
    labels = _as_indices(labels, "labels")
    if not (len(preds) == len(labels) == len(patients)):
        raise DataError("preds, labels and patients must have equal lengths")
    totals: Dict[int, List[int]] = {}
    for pred, label, patient in zip(preds, labels, patients):
        entry = totals.setdefault(int(patient), [0, 0])
        entry[0] += 1
        entry[1] += int(pred == label)
    return [PatientAccuracy(p, n, c) for p, (n, c) in sorted(totals.items())]


def write_patient_report(path: Union[str, Path], report: Sequence[PatientAccuracy]) -> Path:
    path = Path(path)
    frame = pd.DataFrame(
        [{"patient": r.patient, "n_samples": r.n_samples, "n_correct": r.n_correct,
          "accuracy": r.accuracy} for r in report],
        columns=["patient", "n_samples", "n_correct", "accuracy"],
    )
    frame.to_csv(path, index=False, float_format="%.4f", lineterminator="\n")
    return path


def read_patient_report(path: Union[str, Path]) -> List[PatientAccuracy]:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot read patient report {path}: {e}") from e
    return [PatientAccuracy(int(r["patient"]), int(r["n_samples"]), int(r["n_correct"]))
            for r in frame.to_dict(orient="records")]


@dataclass(frozen=True)
class PatientDelta:
    patient: int
    acc_a: float
    acc_b: float

    @property
    def delta(self) -> float:
        return self.acc_b - self.acc_a


def compare_runs(report_a: Sequence[PatientAccuracy], report_b: Sequence[PatientAccuracy],
                 patients: Optional[Sequence[int]] = None) -> List[PatientDelta]:
    """Accuracy of run B minus run A for each listed patient (default: A's patients)."""
    by_a = {r.patient: r for r in report_a}
    by_b = {r.patient: r for r in report_b}
    wanted = list(patients) if patients is not None else sorted(by_a)
    if not wanted:
        raise DataError("No patients to compare")
    rows = []
    for patient in wanted:
        if patient not in by_a:
            raise DataError(f"Patient {patient} is absent from run A")
        if patient not in by_b:
            raise DataError(f"Patient {patient} is absent from run B")
        rows.append(PatientDelta(patient, by_a[patient].accuracy, by_b[patient].accuracy))
    return rows


# =============================================================================
# EMBEDDINGS AND NEAREST PATIENTS
# =============================================================================

@dataclass(frozen=True)
class EmbeddingTable:
    sample_ids: Tuple[str, ...]
    patients: Tuple[int, ...]
    labels: Tuple[str, ...]
    splits: Tuple[str, ...]
    matrix: np.ndarray
    fallback: bool = False

    def __len__(self) -> int:
        return len(self.sample_ids)

    def select(self, split: str) -> "EmbeddingTable":
        keep = [i for i, s in enumerate(self.splits) if split == "all" or s == split]
        return EmbeddingTable(
            tuple(self.sample_ids[i] for i in keep),
            tuple(self.patients[i] for i in keep),
            tuple(self.labels[i] for i in keep),
            tuple(self.splits[i] for i in keep),
            self.matrix[keep],
            self.fallback,
        )


def embedding_table(rows: Sequence[SampleMeta], matrix: np.ndarray, fallback: bool = False) -> EmbeddingTable:
    return EmbeddingTable(
        tuple(r.sample_id for r in rows),
        tuple(r.patient for r in rows),
        tuple(r.label.token for r in rows),
        tuple(r.split for r in rows),
        np.asarray(matrix, dtype=np.float64),
        fallback,
    )


def write_embeddings(path: Union[str, Path], table: EmbeddingTable) -> Path:
    """CSV: sample_id,patient,label,split,e0..e{d-1}[,fallback]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = table.matrix.shape[1] if table.matrix.ndim == 2 else 0
    frame = pd.DataFrame({
        "sample_id": list(table.sample_ids),
        "patient": list(table.patients),
        "label": list(table.labels),
        "split": list(table.splits),
    })
    values = pd.DataFrame(table.matrix.reshape(len(table), dim), columns=[f"e{j}" for j in range(dim)])
    frame = pd.concat([frame, values], axis=1)
    if table.fallback:
        frame["fallback"] = 1
    frame.to_csv(path, index=False, float_format=EMBEDDING_FLOAT_FORMAT, lineterminator="\n")
    return path


def read_embeddings(path: Union[str, Path]) -> EmbeddingTable:
    try:
        frame = pd.read_csv(path, dtype={"sample_id": str, "label": str, "split": str}, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot read embeddings {path}: {e}") from e
    value_columns = [c for c in frame.columns if c.startswith("e") and c[1:].isdigit()]
    value_columns.sort(key=lambda c: int(c[1:]))
    if not value_columns:
        raise DataError(f"{path}: no embedding columns e0..")
    return EmbeddingTable(
        tuple(frame["sample_id"].astype(str)),
        tuple(int(p) for p in frame["patient"]),
        tuple(frame["label"].astype(str)),
        tuple(frame["split"].astype(str)),
        frame[value_columns].to_numpy(dtype=np.float64),
        "fallback" in frame.columns,
    )


@dataclass(frozen=True)
class ReferenceSet:
    names: Tuple[str, ...]
    centroids: np.ndarray  # R x d

    def __len__(self) -> int:
        return len(self.names)


def write_references(path: Union[str, Path], refs: ReferenceSet) -> Path:
    """CSV: name,c0..c{d-1}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(refs.centroids, columns=[f"c{j}" for j in range(refs.centroids.shape[1])])
    frame.insert(0, "name", list(refs.names))
    frame.to_csv(path, index=False, float_format=EMBEDDING_FLOAT_FORMAT, lineterminator="\n")
    return path


def read_references(path: Union[str, Path]) -> ReferenceSet:
    try:
        frame = pd.read_csv(path, dtype={"name": str}, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"Cannot read reference centroids {path}: {e}") from e
    except pd.errors.EmptyDataError:
        raise DataError(f"Reference centroid file {path} is empty") from None
    columns = sorted((c for c in frame.columns if c.startswith("c") and c[1:].isdigit()),
                     key=lambda c: int(c[1:]))
    if "name" not in frame.columns or not columns:
        raise DataError(f"{path}: expected header name,c0..c{{d-1}}")
    return ReferenceSet(tuple(frame["name"].astype(str)), frame[columns].to_numpy(dtype=np.float64))


def reference_centroids(table: EmbeddingTable, patient_ids: Optional[Sequence[int]] = None,
                        top_n: Optional[int] = None) -> ReferenceSet:
    """
    Reference centroids from chosen patients' embeddings.

    Either pass the patient ids explicitly (e.g. patients seen forming their
    own sub-cluster) or `top_n` to take the patients with the most samples
    (ties by ascending id).
    """
    if (patient_ids is None) == (top_n is None):
        raise UsageError("Pass exactly one of patient_ids or top_n")
    if len(table) == 0:
        raise DataError("No embeddings to build references from")
    groups = PatientGroups.from_ids(table.patients)
    centroids, counts = patient_centroids(table.matrix, groups)
    position = {p: j for j, p in enumerate(groups.patients)}
    if top_n is not None:
        ranked = sorted(groups.patients, key=lambda p: (-int(counts[position[p]]), p))
        chosen = ranked[:top_n]
    else:
        chosen = list(patient_ids)
        absent = [p for p in chosen if p not in position]
        if absent:
            raise DataError(f"Patients {absent} have no embeddings")
    if not chosen:
        raise DataError("No reference patients selected")
    return ReferenceSet(
        tuple(f"patient_{p}" for p in chosen),
        np.stack([centroids[position[p]] for p in chosen]),
    )


@dataclass(frozen=True)
class NearestPatient:
    patient: int
    distance: float
    reference: str


def nearest_test_patients(references: ReferenceSet, embeddings: np.ndarray,
                          patients: Sequence[int], k: int = 6) -> List[NearestPatient]:
    """
    Rank patients by the distance from their centroid to the closest
    reference centroid; ties go to the lower patient id.
    """
    if len(references) == 0:
        raise DataError("No reference centroids given")
    groups = PatientGroups.from_ids(patients)
    if not 1 <= k <= groups.n_patients:
        raise UsageError(f"k={k} but there are {groups.n_patients} patients")
    centroids, _ = patient_centroids(embeddings, groups)
    refs = np.asarray(references.centroids, dtype=np.float64)
    if refs.shape[1] != centroids.shape[1]:
        raise DataError(f"Reference dimension {refs.shape[1]} != embedding dimension {centroids.shape[1]}")
    distances = np.sqrt(((centroids[:, None, :] - refs[None, :, :]) ** 2).sum(axis=2))
    nearest = distances.argmin(axis=1)
    ranked = sorted(
        (NearestPatient(p, float(distances[j, nearest[j]]), references.names[nearest[j]])
         for j, p in enumerate(groups.patients)),
        key=lambda r: (r.distance, r.patient),
    )
    return ranked[:k]
