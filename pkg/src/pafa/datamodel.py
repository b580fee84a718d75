"""
Core domain types: labels, sample metadata, manifests.

Class index order is fixed to (Normal, Crackle, Wheeze, Both) everywhere.

Manifest CSV header:
    sample_id,patient,label,split,source_path,cycle_start_s,cycle_end_s

Provenance (icbhi | synthetic) lives in a sidecar `<manifest>.meta`
key=value file so the CSV header stays fixed.
"""

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Tuple, Union

import pandas as pd

from .config import load_flat_config, save_flat_config
from .errors import DataError, ManifestIOError, UsageError

logger = logging.getLogger("pafa.datamodel")

MANIFEST_COLUMNS = [
    "sample_id", "patient", "label", "split",
    "source_path", "cycle_start_s", "cycle_end_s",
]
SPLITS = ("train", "test")
PROVENANCES = ("icbhi", "synthetic")


class ClassLabel4(IntEnum):
    NORMAL = 0
    CRACKLE = 1
    WHEEZE = 2
    BOTH = 3

    @property
    def token(self) -> str:
        return self.name.lower()

    @classmethod
    def from_token(cls, token: str) -> "ClassLabel4":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise DataError(
                f"Unknown label {token!r}; expected one of normal|crackle|wheeze|both"
            ) from None


class ClassLabel2(IntEnum):
    NORMAL = 0
    ABNORMAL = 1

    @property
    def token(self) -> str:
        return self.name.lower()


def label_from_bits(crackle: int, wheeze: int) -> ClassLabel4:
    """ICBHI annotation bits to the 4-class label."""
    return ClassLabel4(int(bool(crackle)) + 2 * int(bool(wheeze)))


def map_4to2(label: ClassLabel4) -> ClassLabel2:
    return ClassLabel2.NORMAL if label == ClassLabel4.NORMAL else ClassLabel2.ABNORMAL


@dataclass(frozen=True)
class SampleMeta:
    sample_id: str
    patient: int
    label: Union[ClassLabel4, ClassLabel2]
    split: str
    source_path: str
    cycle_start_s: float
    cycle_end_s: float


@dataclass(frozen=True)
class Manifest:
    """Dataset catalog: one row per respiratory-cycle sample."""

    rows: Tuple[SampleMeta, ...]
    provenance: str = "icbhi"

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))

    def __len__(self) -> int:
        return len(self.rows)

    def split(self, name: str) -> "Manifest":
        if name == "all":
            return self
        return Manifest(tuple(r for r in self.rows if r.split == name), self.provenance)

    def patients(self) -> List[int]:
        return sorted({r.patient for r in self.rows})

    def is_two_class(self) -> bool:
        return any(isinstance(r.label, ClassLabel2) for r in self.rows)

    def class_counts(self) -> Tuple[int, int, int, int]:
        if self.is_two_class():
            raise UsageError("class_counts is defined on 4-class manifests only")
        counts = Counter(r.label for r in self.rows)
        return tuple(counts.get(label, 0) for label in ClassLabel4)

    def relabel_two_class(self) -> "Manifest":
        """
        Collapse abnormal classes for native 2-class training.

        Rows carry ClassLabel2 afterwards; such a manifest is for training
        and scoring only and cannot be written back to CSV.
        """
        rows = tuple(
            SampleMeta(
                r.sample_id, r.patient,
                r.label if isinstance(r.label, ClassLabel2) else map_4to2(r.label),
                r.split, r.source_path, r.cycle_start_s, r.cycle_end_s,
            )
            for r in self.rows
        )
        return Manifest(rows, self.provenance)


# =============================================================================
# VALIDATION
# =============================================================================

@dataclass(frozen=True)
class Violation:
    rule: str
    subject: str
    message: str
    severity: str = "error"


@dataclass(frozen=True)
class ValidationReport:
    violations: Tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def errors(self) -> List[Violation]:
        return [v for v in self.violations if v.severity == "error"]

    @property
    def warnings(self) -> List[Violation]:
        return [v for v in self.violations if v.severity == "warning"]

    @property
    def valid(self) -> bool:
        return not self.errors

    def __len__(self) -> int:
        return len(self.violations)

    def to_dict(self) -> Dict:
        return {
            "valid": self.valid,
            "violations": [v.__dict__ for v in self.violations],
        }


def validate_manifest(m: Manifest) -> ValidationReport:
    """
    List every violation of the manifest invariants.

    Subject-disjointness is an error for synthetic manifests and only a
    warning for ICBHI, whose official split is recording-based.
    """
    violations: List[Violation] = []

    if m.provenance not in PROVENANCES:
        violations.append(Violation(
            "provenance", m.provenance, f"unknown provenance {m.provenance!r}"))

    seen: Counter = Counter(r.sample_id for r in m.rows)
    for sample_id, count in seen.items():
        if count > 1:
            violations.append(Violation(
                "unique-sample-id", sample_id,
                f"sample_id {sample_id!r} appears {count} times"))

    for r in m.rows:
        if r.split not in SPLITS:
            violations.append(Violation(
                "split-value", r.sample_id, f"split {r.split!r} is not train|test"))
        if r.patient < 0:
            violations.append(Violation(
                "patient-id", r.sample_id, f"negative patient id {r.patient}"))
        if not (r.cycle_end_s > r.cycle_start_s >= 0):
            violations.append(Violation(
                "cycle-bounds", r.sample_id,
                f"need end > start >= 0, got [{r.cycle_start_s}, {r.cycle_end_s}]"))

    splits_by_patient: Dict[int, set] = defaultdict(set)
    for r in m.rows:
        splits_by_patient[r.patient].add(r.split)
    severity = "warning" if m.provenance == "icbhi" else "error"
    for patient in sorted(splits_by_patient):
        if len(splits_by_patient[patient]) > 1:
            violations.append(Violation(
                "subject-disjoint", str(patient),
                f"patient {patient} appears in splits "
                f"{sorted(splits_by_patient[patient])}",
                severity=severity))

    return ValidationReport(tuple(violations))


# =============================================================================
# SERIALIZATION
# =============================================================================

def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def manifest_to_frame(m: Manifest) -> pd.DataFrame:
    if m.is_two_class():
        raise UsageError("A relabeled 2-class manifest cannot be serialized")
    return pd.DataFrame(
        [
            {
                "sample_id": r.sample_id,
                "patient": r.patient,
                "label": r.label.token,
                "split": r.split,
                "source_path": r.source_path,
                "cycle_start_s": float(r.cycle_start_s),
                "cycle_end_s": float(r.cycle_end_s),
            }
            for r in m.rows
        ],
        columns=MANIFEST_COLUMNS,
    )


def manifest_from_frame(df: pd.DataFrame, provenance: str) -> Manifest:
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"Manifest is missing columns: {missing}")
    rows = []
    for rec in df.to_dict(orient="records"):
        try:
            rows.append(SampleMeta(
                sample_id=str(rec["sample_id"]),
                patient=int(rec["patient"]),
                label=ClassLabel4.from_token(str(rec["label"])),
                split=str(rec["split"]),
                source_path=str(rec["source_path"]),
                cycle_start_s=float(rec["cycle_start_s"]),
                cycle_end_s=float(rec["cycle_end_s"]),
            ))
        except (TypeError, ValueError) as e:
            raise DataError(f"Bad manifest row {rec.get('sample_id')!r}: {e}") from e
    return Manifest(tuple(rows), provenance)


def write_manifest(m: Manifest, path: Union[str, Path]) -> Path:
    """Write the manifest CSV plus its provenance sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        manifest_to_frame(m).to_csv(path, index=False, lineterminator="\n")
        save_flat_config(_meta_path(path), {"provenance": m.provenance})
    except OSError as e:
        raise ManifestIOError(f"Cannot write manifest {path}: {e}") from e
    return path


def read_manifest(path: Union[str, Path]) -> Manifest:
    """Read a manifest CSV; provenance defaults to icbhi without a sidecar."""
    path = Path(path)
    try:
        df = pd.read_csv(
            path,
            dtype={"sample_id": str, "label": str, "split": str, "source_path": str},
            keep_default_na=False,
            float_precision="round_trip",
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError:
        raise DataError(f"Manifest {path} is empty (no header)") from None
    except pd.errors.ParserError as e:
        raise DataError(f"Manifest {path} is not valid CSV: {e}") from e
    except OSError as e:
        raise ManifestIOError(f"Cannot read manifest {path}: {e}") from e

    provenance = "icbhi"
    meta = _meta_path(path)
    if meta.exists():
        provenance = load_flat_config(meta).get("provenance", provenance)
    return manifest_from_frame(df, provenance)
