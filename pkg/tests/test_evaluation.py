"""Tests for metrics, per-patient reports and the nearest-patient analysis."""
import tempfile
from pathlib import Path

import numpy as np
import pytest

from src.pafa.errors import DataError, UsageError
from src.pafa.evaluation import (
    PatientAccuracy,
    ReferenceSet,
    compare_runs,
    confusion,
    embedding_table,
    eval_two_class_from_four,
    evaluate_task,
    merge_to_two_class,
    nearest_test_patients,
    per_patient_accuracy,
    read_embeddings,
    read_patient_report,
    read_references,
    reference_centroids,
    round_percent,
    se_sp_score,
    write_embeddings,
    write_patient_report,
    write_references,
)

from tests.conftest import make_rows

# (Sp, Se) -> Score as reported to two decimals for ICBHI 4-class runs
REPORTED_ROWS = [
    (72.30, 40.10, 56.20),
    (75.95, 39.15, 57.55),
    (79.87, 43.55, 61.71),
    (78.77, 48.21, 63.49),
    (82.05, 47.63, 64.84),
    (79.34, 50.14, 64.74),
    (82.47, 33.27, 57.87),
    (79.18, 42.68, 60.93),
]


def predictions_for(sp: float, se: float, n: int = 10000):
    """Labels and 4-class predictions with exactly the given Sp and Se (in %)."""
    normal_hits = int(round(sp * n / 100))
    abnormal_hits = int(round(se * n / 100))
    labels = np.concatenate([np.zeros(n, dtype=int), np.tile([1, 2, 3], n)[:n]])
    preds = labels.copy()
    preds[normal_hits:n] = 1
    # wrong abnormal guesses stay abnormal: rotate to another abnormal class
    wrong = np.arange(n + abnormal_hits, 2 * n)
    preds[wrong] = labels[wrong] % 3 + 1
    return preds, labels


def test_confusion_counts_rows_true_cols_pred():
    """Test confusion layout on a small example."""
    cm = confusion([0, 1, 1, 3], [0, 0, 1, 2])
    assert cm.counts.tolist() == [[1, 1, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 0, 0]]
    assert cm.total == 4
    assert cm.n_classes == 4


def test_confusion_validation():
    """Test length and range checks."""
    with pytest.raises(DataError):
        confusion([0, 1], [0])
    with pytest.raises(DataError):
        confusion([0, 4], [0, 1])
    with pytest.raises(DataError):
        confusion([0, 1], [-1, 1])


def test_hand_metrics():
    """Test Sp 80, Se 60, Score 70 on ten samples."""
    labels = [0, 0, 0, 0, 0, 1, 2, 3, 1, 2]
    preds = [0, 0, 0, 0, 1, 1, 2, 3, 2, 0]
    triple = se_sp_score(confusion(preds, labels))
    assert triple.sp == 80.0
    assert triple.se == 60.0
    assert triple.score == 70.0


@pytest.mark.parametrize("sp,se,score", REPORTED_ROWS)
def test_reported_scores_reproduce(sp, se, score):
    """Test that Score = (Sp + Se) / 2 reproduces reported two-decimal values."""
    preds, labels = predictions_for(sp, se)
    rounded = evaluate_task(preds, labels, "4class").rounded()
    assert rounded == {"sp": sp, "se": se, "score": score}


def test_score_is_exact_mean():
    """Test that Score is the arithmetic mean of Sp and Se."""
    rng = np.random.default_rng(0)
    for _ in range(200):
        labels = np.concatenate([[0, 1], rng.integers(0, 4, size=40)])
        preds = rng.integers(0, 4, size=42)
        t = evaluate_task(preds, labels, "4class")
        assert t.score == (t.sp + t.se) / 2
        assert 0.0 <= t.sp <= 100.0 and 0.0 <= t.se <= 100.0


def test_missing_classes_raise():
    """Test that Sp and Se are undefined without Normal or abnormal samples."""
    with pytest.raises(DataError, match="No Normal"):
        se_sp_score(confusion([1, 2], [1, 2]))
    with pytest.raises(DataError, match="No abnormal"):
        se_sp_score(confusion([0, 0], [0, 0]))


def test_two_class_keeps_sp_and_never_lowers_se():
    """Test the 4 -> 2 merge: Sp unchanged, Se at least the 4-class Se."""
    rng = np.random.default_rng(1)
    for _ in range(200):
        labels = np.concatenate([[0, 2], rng.integers(0, 4, size=30)])
        preds = rng.integers(0, 4, size=32)
        four = evaluate_task(preds, labels, "4class")
        two = eval_two_class_from_four(preds, labels)
        assert two.sp == four.sp
        assert two.se >= four.se
        assert evaluate_task(preds, labels, "2class") == two


def test_two_class_counts_wrong_abnormal_class_as_hit():
    """Test that crackle predicted as wheeze is a 2-class hit but a 4-class miss."""
    labels, preds = [0, 1], [0, 2]
    assert evaluate_task(preds, labels, "4class").se == 0.0
    assert evaluate_task(preds, labels, "2class").se == 100.0
    assert merge_to_two_class([0, 1, 2, 3]).tolist() == [0, 1, 1, 1]


def test_native_two_class_labels():
    """Test 2-class predictions scored directly."""
    triple = evaluate_task([0, 1, 1, 0], [0, 0, 1, 1], "2class", n_classes=2)
    assert (triple.sp, triple.se) == (50.0, 50.0)
    with pytest.raises(UsageError):
        evaluate_task([0], [0], "4class", n_classes=2)
    with pytest.raises(UsageError):
        evaluate_task([0], [0], "3class")


def test_round_percent_half_even():
    """Test two-decimal rounding on the shortest decimal form."""
    assert round_percent(64.845) == 64.84
    assert round_percent(64.835) == 64.84
    assert round_percent(56.199999999999996) == 56.2
    assert round_percent(70.0) == 70.0


def test_per_patient_accuracy_sums_to_total():
    """Test that per-patient counts add up to the whole test set."""
    rng = np.random.default_rng(2)
    patients = rng.integers(0, 7, size=50)
    labels = rng.integers(0, 4, size=50)
    preds = rng.integers(0, 4, size=50)
    report = per_patient_accuracy(preds, labels, patients.tolist())
    assert [r.patient for r in report] == sorted(set(patients.tolist()))
    assert sum(r.n_samples for r in report) == 50
    assert sum(r.n_correct for r in report) == int(np.sum(preds == labels))


def test_patient_report_round_trip():
    """Test patients.csv read/write."""
    with tempfile.TemporaryDirectory() as tmpdir:
        report = [PatientAccuracy(3, 4, 1), PatientAccuracy(9, 2, 2)]
        path = write_patient_report(Path(tmpdir) / "patients.csv", report)
        assert path.read_text().splitlines()[0] == "patient,n_samples,n_correct,accuracy"
        assert read_patient_report(path) == report
        with pytest.raises(DataError):
            read_patient_report(Path(tmpdir) / "absent.csv")


def test_compare_runs():
    """Test per-patient accuracy deltas and missing-patient errors."""
    a = [PatientAccuracy(1, 4, 1), PatientAccuracy(2, 4, 4)]
    b = [PatientAccuracy(1, 4, 3), PatientAccuracy(2, 4, 2)]
    deltas = compare_runs(a, b)
    assert [(d.patient, d.delta) for d in deltas] == [(1, 50.0), (2, -50.0)]
    assert [d.patient for d in compare_runs(a, b, [2])] == [2]
    with pytest.raises(DataError, match="absent from run B"):
        compare_runs(a, b[:1])
    with pytest.raises(DataError):
        compare_runs([], b)


def test_nearest_patients_hand_example():
    """Test ranking on 2-D centroids against two references."""
    refs = ReferenceSet(("patient_a", "patient_b"), np.array([[0.0, 0.0], [10.0, 0.0]]))
    embeddings = np.array([[1.0, 0.0], [3.0, 0.0], [9.0, 0.0], [0.0, 5.0], [0.0, 7.0]])
    patients = [4, 4, 5, 6, 6]
    ranked = nearest_test_patients(refs, embeddings, patients, k=3)
    assert [(r.patient, r.distance, r.reference) for r in ranked] == [
        (5, 1.0, "patient_b"), (4, 2.0, "patient_a"), (6, 6.0, "patient_a")]


def test_nearest_patients_ties_go_to_lower_id():
    """Test that equal distances rank by ascending patient id."""
    refs = ReferenceSet(("r",), np.zeros((1, 2)))
    embeddings = np.array([[0.0, 3.0], [3.0, 0.0], [0.0, 1.0]])
    ranked = nearest_test_patients(refs, embeddings, [8, 2, 5], k=3)
    assert [r.patient for r in ranked] == [5, 2, 8]


def test_nearest_patients_ignore_row_order():
    """Test that shuffling sample rows gives the same ranking."""
    rng = np.random.default_rng(3)
    embeddings = rng.normal(size=(30, 4))
    patients = np.repeat(np.arange(10), 3)
    refs = ReferenceSet(("x", "y"), rng.normal(size=(2, 4)))
    base = nearest_test_patients(refs, embeddings, patients.tolist(), k=6)
    order = rng.permutation(30)
    shuffled = nearest_test_patients(refs, embeddings[order], patients[order].tolist(), k=6)
    assert [r.patient for r in base] == [r.patient for r in shuffled]
    assert [r.distance for r in base] == pytest.approx([r.distance for r in shuffled], rel=1e-12)


def test_nearest_patients_validation():
    """Test empty references, bad k and mismatched dimensions."""
    refs = ReferenceSet(("r",), np.zeros((1, 2)))
    emb = np.zeros((2, 2))
    with pytest.raises(DataError):
        nearest_test_patients(ReferenceSet((), np.zeros((0, 2))), emb, [0, 1])
    with pytest.raises(UsageError):
        nearest_test_patients(refs, emb, [0, 1], k=3)
    with pytest.raises(UsageError):
        nearest_test_patients(refs, emb, [0, 1], k=0)
    with pytest.raises(DataError):
        nearest_test_patients(ReferenceSet(("r",), np.zeros((1, 3))), emb, [0, 1], k=1)


def test_reference_centroids_by_id_and_count():
    """Test explicit patient selection and top-n by sample count."""
    rows = make_rows(1, 3, start=1) + make_rows(1, 1, start=2) + make_rows(1, 3, start=0)
    matrix = np.arange(14, dtype=np.float64).reshape(7, 2)
    table = embedding_table(rows, matrix)

    refs = reference_centroids(table, patient_ids=[2])
    assert refs.names == ("patient_2",)
    np.testing.assert_allclose(refs.centroids, [[6.0, 7.0]])

    top = reference_centroids(table, top_n=2)
    assert top.names == ("patient_0", "patient_1")
    np.testing.assert_allclose(top.centroids[1], [2.0, 3.0])

    with pytest.raises(UsageError):
        reference_centroids(table)
    with pytest.raises(DataError):
        reference_centroids(table, patient_ids=[42])


def test_embeddings_and_references_files():
    """Test the embedding CSV header, fallback flag and reference CSV."""
    with tempfile.TemporaryDirectory() as tmpdir:
        rows = make_rows(2, 2, split="test")
        table = embedding_table(rows, np.array([[0.5, 1.0], [1.5, 2.0], [2.5, 3.0], [3.5, 4.0]]), fallback=True)
        path = write_embeddings(Path(tmpdir) / "emb.csv", table)
        assert path.read_text().splitlines()[0] == "sample_id,patient,label,split,e0,e1,fallback"

        loaded = read_embeddings(path)
        assert loaded.fallback
        assert loaded.sample_ids == table.sample_ids
        assert loaded.patients == (0, 0, 1, 1)
        np.testing.assert_array_equal(loaded.matrix, table.matrix)
        assert len(loaded.select("train")) == 0

        refs = reference_centroids(loaded, top_n=1)
        ref_path = write_references(Path(tmpdir) / "refs.csv", refs)
        assert read_references(ref_path).names == ("patient_0",)
        with pytest.raises(DataError):
            read_references(Path(tmpdir) / "absent.csv")
