"""Tests for labels, manifests and manifest validation."""
import tempfile
from dataclasses import replace
from pathlib import Path

import pytest

from src.pafa.datamodel import (
    ClassLabel2,
    ClassLabel4,
    Manifest,
    label_from_bits,
    map_4to2,
    read_manifest,
    validate_manifest,
    write_manifest,
)
from src.pafa.errors import DataError, ManifestIOError, UsageError

from tests.conftest import make_rows


def test_label_from_bits_covers_all_four_classes():
    """Test that the crackle/wheeze bits map to the fixed class order."""
    assert label_from_bits(0, 0) is ClassLabel4.NORMAL
    assert label_from_bits(1, 0) is ClassLabel4.CRACKLE
    assert label_from_bits(0, 1) is ClassLabel4.WHEEZE
    assert label_from_bits(1, 1) is ClassLabel4.BOTH
    assert [int(c) for c in ClassLabel4] == [0, 1, 2, 3]


def test_map_4to2_sends_only_normal_to_normal():
    """Test that map_4to2 is surjective with exactly one preimage of Normal."""
    images = {label: map_4to2(label) for label in ClassLabel4}
    assert images[ClassLabel4.NORMAL] is ClassLabel2.NORMAL
    assert images[ClassLabel4.WHEEZE] is ClassLabel2.ABNORMAL
    assert images[ClassLabel4.BOTH] is ClassLabel2.ABNORMAL
    assert set(images.values()) == set(ClassLabel2)
    assert sum(1 for v in images.values() if v is ClassLabel2.NORMAL) == 1


def test_label_tokens_round_trip():
    """Test that label tokens parse back to the same class."""
    for label in ClassLabel4:
        assert ClassLabel4.from_token(label.token) is label
    with pytest.raises(DataError):
        ClassLabel4.from_token("stridor")


def test_valid_manifest_has_empty_report(small_manifest):
    """Test that a valid 4-row fixture validates cleanly."""
    report = validate_manifest(small_manifest)
    assert report.valid
    assert len(report) == 0


def test_patient_in_both_splits_is_reported():
    """Test that a subject spanning splits is named under the subject-disjoint rule."""
    rows = make_rows(1, 2, "train", start=7)
    rows[1] = replace(rows[1], split="test")
    report = validate_manifest(Manifest(tuple(rows) + tuple(make_rows(1, 1, "test", 8)), "synthetic"))
    assert not report.valid
    violation = report.errors[0]
    assert violation.rule == "subject-disjoint"
    assert violation.subject == "7"


def test_icbhi_split_overlap_only_warns():
    """Test that ICBHI manifests keep the recording-based split with a warning."""
    rows = make_rows(1, 2, "train", start=7)
    rows[1] = replace(rows[1], split="test")
    report = validate_manifest(Manifest(tuple(rows), "icbhi"))
    assert report.valid
    assert [v.rule for v in report.warnings] == ["subject-disjoint"]


def test_duplicate_sample_id_is_reported():
    """Test that a duplicated sample_id is named in the report."""
    rows = make_rows(2, 1)
    rows = [replace(rows[0], sample_id="a_0"), replace(rows[1], sample_id="a_0")]
    report = validate_manifest(Manifest(tuple(rows), "synthetic"))
    assert any(v.rule == "unique-sample-id" and v.subject == "a_0" for v in report.errors)


def test_bad_cycle_bounds_and_split_are_reported():
    """Test that cycle bounds and split values are checked per row."""
    row = make_rows(1, 1)[0]
    report = validate_manifest(Manifest((
        replace(row, cycle_start_s=2.0, cycle_end_s=1.0),
        replace(row, sample_id="other", split="dev"),
    ), "synthetic"))
    rules = {v.rule for v in report.errors}
    assert {"cycle-bounds", "split-value"} <= rules


def test_manifest_round_trip_is_identical(small_manifest):
    """Test that writing and re-reading a valid manifest gives the same manifest."""
    with tempfile.TemporaryDirectory() as tmpdir:
        rows = tuple(replace(r, cycle_start_s=0.1, cycle_end_s=2.0 / 3.0) for r in small_manifest.rows)
        manifest = Manifest(rows, "synthetic")
        path = write_manifest(manifest, Path(tmpdir) / "manifest.csv")

        assert read_manifest(path) == manifest
        header = path.read_text(encoding="utf-8").splitlines()[0]
        assert header == "sample_id,patient,label,split,source_path,cycle_start_s,cycle_end_s"


def test_missing_manifest_is_an_io_error():
    """Test that an unreadable manifest raises the I/O error, not a validation failure."""
    with tempfile.TemporaryDirectory() as tmpdir:
        with pytest.raises(ManifestIOError):
            read_manifest(Path(tmpdir) / "absent.csv")


def test_empty_manifest_file_is_a_data_error():
    """Test that an empty file is malformed data."""
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "empty.csv"
        path.write_text("")
        with pytest.raises(DataError) as excinfo:
            read_manifest(path)
        assert not isinstance(excinfo.value, ManifestIOError)


def test_manifest_without_sidecar_defaults_to_icbhi(small_manifest):
    """Test that provenance falls back to icbhi when the sidecar is missing."""
    with tempfile.TemporaryDirectory() as tmpdir:
        path = write_manifest(small_manifest, Path(tmpdir) / "m.csv")
        Path(str(path) + ".meta").unlink()
        assert read_manifest(path).provenance == "icbhi"


def test_relabel_two_class_collapses_abnormal():
    """Test that native 2-class relabeling yields Normal and Abnormal, never a 4-class member."""
    manifest = Manifest(tuple(make_rows(1, 4)), "synthetic")
    relabeled = manifest.relabel_two_class()
    assert [r.label for r in relabeled.rows] == [
        ClassLabel2.NORMAL, ClassLabel2.ABNORMAL, ClassLabel2.ABNORMAL, ClassLabel2.ABNORMAL]
    assert all(isinstance(r.label, ClassLabel2) for r in relabeled.rows)
    assert relabeled.relabel_two_class().rows == relabeled.rows
    assert manifest.class_counts() == (1, 1, 1, 1)


def test_relabeled_manifest_refuses_four_class_views():
    """Test that a 2-class manifest cannot be counted or written as 4-class labels."""
    relabeled = Manifest(tuple(make_rows(2, 4)), "synthetic").relabel_two_class()
    assert relabeled.is_two_class()
    with pytest.raises(UsageError):
        relabeled.class_counts()
    with tempfile.TemporaryDirectory() as tmpdir:
        with pytest.raises(UsageError):
            write_manifest(relabeled, Path(tmpdir) / "m.csv")
