"""
Run directories: everything one training run leaves on disk.

Layout:
    config.txt           flat key=value training config
    epochs.csv           epoch, ce, pcsl, gpal, total
    checkpoint.pafc      trained parameters (projection head retained)
    checkpoint.config.txt
    metrics.json-lines   one JSON object per evaluation
    patients.csv         per-patient accuracy of the latest evaluation
    predictions.csv      sample_id, patient, label, pred
    run.json             summary (wall clock, final metrics)

No fancy experiment tracking. Plain files you can diff.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import pandas as pd

from .config import load_flat_config, save_flat_config
from .errors import DataError

CONFIG_FILE = "config.txt"
EPOCHS_FILE = "epochs.csv"
CHECKPOINT_FILE = "checkpoint.pafc"
METRICS_FILE = "metrics.json-lines"
PATIENTS_FILE = "patients.csv"
PREDICTIONS_FILE = "predictions.csv"
SUMMARY_FILE = "run.json"

EPOCH_COLUMNS = ["epoch", "ce", "pcsl", "gpal", "total"]


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    ce: float
    pcsl: float
    gpal: float
    total: float


@dataclass
class RunRecord:
    config: Dict[str, Any]
    epochs: List[EpochStats] = field(default_factory=list)
    metrics: Dict[str, Any] = field(default_factory=dict)
    checkpoint_path: str = ""
    wall_clock_s: float = 0.0
    step_totals: List[float] = field(default_factory=list)

    def summary(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "epochs": len(self.epochs),
            "final_epoch": asdict(self.epochs[-1]) if self.epochs else None,
            "metrics": self.metrics,
            "checkpoint_path": self.checkpoint_path,
            "wall_clock_s": self.wall_clock_s,
        }


def _get_path(run_dir: Union[str, Path], name: str) -> Path:
    return Path(run_dir) / name


def write_config(run_dir: Union[str, Path], config: Mapping[str, Any]) -> Path:
    path = _get_path(run_dir, CONFIG_FILE)
    save_flat_config(path, config)
    return path


def read_config(run_dir: Union[str, Path]) -> Dict[str, str]:
    return load_flat_config(_get_path(run_dir, CONFIG_FILE))


def write_epochs(run_dir: Union[str, Path], epochs: Sequence[EpochStats]) -> Path:
    path = _get_path(run_dir, EPOCHS_FILE)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([asdict(e) for e in epochs], columns=EPOCH_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    return path


def read_epochs(run_dir: Union[str, Path]) -> List[EpochStats]:
    path = _get_path(run_dir, EPOCHS_FILE)
    if not path.exists():
        return []
    frame = pd.read_csv(path)
    return [
        EpochStats(int(r["epoch"]), float(r["ce"]), float(r["pcsl"]), float(r["gpal"]), float(r["total"]))
        for r in frame.to_dict(orient="records")
    ]


def append_metrics(run_dir: Union[str, Path], record: Mapping[str, Any]) -> Path:
    """Append one evaluation as a JSON line."""
    path = _get_path(run_dir, METRICS_FILE)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as handle:
        handle.write(json.dumps(dict(record), sort_keys=True) + "\n")
    return path


def load_metrics(run_dir: Union[str, Path]) -> List[Dict[str, Any]]:
    path = _get_path(run_dir, METRICS_FILE)
    if not path.exists():
        return []
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: bad JSON on line {lineno}: {e}") from e
    return records


def latest_metrics(run_dir: Union[str, Path], task: str) -> Optional[Dict[str, Any]]:
    """Most recent evaluation for `task` (4class | 2class)."""
    matches = [m for m in load_metrics(run_dir) if m.get("task") == task]
    return matches[-1] if matches else None


def write_summary(run_dir: Union[str, Path], record: RunRecord) -> Path:
    path = _get_path(run_dir, SUMMARY_FILE)
    path.write_text(json.dumps(record.summary(), indent=2, default=str), encoding="utf-8")
    return path


def load_summary(run_dir: Union[str, Path]) -> Dict[str, Any]:
    path = _get_path(run_dir, SUMMARY_FILE)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Cannot read run summary {path}: {e}") from e


def checkpoint_path(run_dir: Union[str, Path]) -> Path:
    return _get_path(run_dir, CHECKPOINT_FILE)
