"""Pytest configuration and fixtures for pafa tests."""
import tempfile
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from src.pafa.datamodel import ClassLabel4, Manifest, SampleMeta
from src.pafa.features import FeatureCache, extract_sample
from src.pafa.ingest import SynthConfig, generate_synthetic, write_synthetic
from src.pafa.losses import PatientGroups
from src.pafa.trainer import TrainConfig


@pytest.fixture
def hand_batch():
    """Two patients: A at (0,0),(2,0); B at (0,4),(0,6)."""
    Z = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 4.0], [0.0, 6.0]])
    return Z, PatientGroups.from_ids([0, 0, 1, 1])


def make_rows(n_patients: int, per_patient: int, split: str = "train", start: int = 0):
    """Audio-free manifest rows with labels cycling through the four classes."""
    rows = []
    for p in range(start, start + n_patients):
        for k in range(per_patient):
            rows.append(SampleMeta(
                sample_id=f"p{p:03d}_{k:03d}",
                patient=p,
                label=ClassLabel4((p + k) % 4),
                split=split,
                source_path=f"wav/p{p:03d}_{k:03d}.wav",
                cycle_start_s=0.0,
                cycle_end_s=1.0,
            ))
    return rows


def write_prediction_file(path: Path) -> Path:
    """2000 Normal (1641 right) and 10000 abnormal (4763 right): Sp 82.05, Se 47.63."""
    labels = np.concatenate([np.zeros(2000, dtype=int), np.tile([1, 2, 3], 4000)[:10000]])
    preds = labels.copy()
    preds[1641:2000] = 2
    wrong = np.arange(2000 + 4763, 12000)
    preds[wrong] = labels[wrong] % 3 + 1
    pd.DataFrame({"label": labels, "pred": preds}).to_csv(path, index=False)
    return path


@pytest.fixture
def small_manifest():
    """Valid 4-row synthetic manifest, two patients per split."""
    return Manifest(tuple(make_rows(1, 1, "train", 0) + make_rows(1, 1, "train", 1)
                          + make_rows(1, 1, "test", 2) + make_rows(1, 1, "test", 3)), "synthetic")


@pytest.fixture(scope="session")
def tiny_cohort():
    """64-sample synthetic cohort (16 patients x 4) with cached utterance features."""
    with tempfile.TemporaryDirectory() as tmpdir:
        root = Path(tmpdir)
        manifest, samples = generate_synthetic(SynthConfig(n_patients=16, samples_per_patient=4, seed=0))
        manifest_path = write_synthetic(root / "data", manifest, samples)
        cache = FeatureCache(root / "cache", "utterance")
        for row in manifest.rows:
            cache.write(row.sample_id, extract_sample(row, manifest_path.parent, "utterance"))
        yield SimpleNamespace(
            root=root,
            manifest=manifest,
            manifest_path=manifest_path,
            cache=cache,
            cache_root=root / "cache",
        )


@pytest.fixture
def quick_config():
    """Tiny network and two epochs, for tests that only need a finished run."""
    return TrainConfig.desk_scale(epochs=2, hidden=(32,), embed_dim=16, proj_dim=16)
