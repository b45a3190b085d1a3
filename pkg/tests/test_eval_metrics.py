"""Confusion matrices and derived metrics against hand and brute-force oracles."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtgen.eval_metrics import (
    ConfusionMatrix,
    MetricsError,
    confusion,
    load_predictions,
    metrics,
    round_half_up,
    table_report,
    write_predictions,
)
from dtgen.seeding import hash_uint


def brute_force_metrics(y_true, y_pred, n_classes, positive=None):
    """Independent recompute from first principles, no shared code paths."""
    per_class = []
    for c in range(n_classes):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class.append((prec, rec, f1))
    acc = sum(1 for t, p in zip(y_true, y_pred) if t == p) / len(y_true)
    if positive is not None:
        return per_class[positive] + (acc,)
    macro = tuple(sum(vals[i] for vals in per_class) / n_classes for i in range(3))
    return macro + (acc,)


# --- confusion ----------------------------------------------------------------


def test_confusion_perfect_diagonal():
    cm = confusion([0, 1, 2, 0], [0, 1, 2, 0], num_classes=3)
    assert cm.counts == ((2, 0, 0), (0, 1, 0), (0, 0, 1))
    assert cm.total == 4


def test_confusion_orientation_rows_true_cols_pred():
    cm = confusion([0, 0, 0], [1, 1, 2], num_classes=3)
    assert cm.counts[0][1] == 2
    assert cm.counts[0][2] == 1
    assert sum(cm.counts[1]) == 0


def test_confusion_rejects_length_mismatch():
    with pytest.raises(MetricsError):
        confusion([0, 1], [0], num_classes=2)


def test_confusion_rejects_out_of_range_labels():
    with pytest.raises(MetricsError):
        confusion([0, 3], [0, 1], num_classes=2)
    with pytest.raises(MetricsError):
        confusion([0, 1], [0, -1], num_classes=2)


def test_empty_input_yields_degenerate_flag():
    cm = confusion([], [], num_classes=2)
    assert cm.total == 0
    report = metrics(cm)
    assert report.accuracy == 0.0
    assert "empty matrix" in report.degenerate_flags
    with pytest.raises(MetricsError):
        confusion([], [], num_classes=0)


def test_confusion_row_col_sums():
    true = [hash_uint(3, "cm-t", i) for i in range(200)]
    pred = [hash_uint(3, "cm-p", i) for i in range(200)]
    cm = confusion(true, pred, num_classes=3)
    assert sum(cm.row_sums()) == 200
    assert cm.row_sums() == tuple(true.count(c) for c in range(3))
    assert cm.col_sums() == tuple(pred.count(c) for c in range(3))


def test_confusion_matrix_validation():
    with pytest.raises(MetricsError):
        ConfusionMatrix(counts=((1, 2), (3,)), class_names=("a", "b"))
    with pytest.raises(MetricsError):
        ConfusionMatrix(counts=((1, -2), (3, 4)), class_names=("a", "b"))


# --- metrics -------------------------------------------------------------------


def test_degenerate_all_positive_classifier():
    # 744 samples, 484 positive, classifier says positive always.
    true = [1] * 484 + [0] * 260
    pred = [1] * 744
    report = metrics(confusion(true, pred, num_classes=2))
    assert report.positive is report.per_class[1]
    pos = report.per_class[1]
    assert pos.precision == pytest.approx(484 / 744, abs=1e-12)
    assert pos.recall == 1.0
    assert pos.f1 == pytest.approx(2 * (484 / 744) / (1 + 484 / 744), abs=1e-12)
    assert report.accuracy == pytest.approx(484 / 744, abs=1e-12)


def test_perfect_classifier_metrics():
    true = [0, 1, 2] * 10
    report = metrics(confusion(true, true, num_classes=3))
    assert report.accuracy == 1.0
    assert report.macro_f1 == 1.0
    assert all(c.precision == 1.0 and c.recall == 1.0 for c in report.per_class)


def test_metrics_match_brute_force_binary():
    true = [hash_uint(2, "m-t", i) for i in range(300)]
    pred = [hash_uint(2, "m-p", i) for i in range(300)]
    report = metrics(confusion(true, pred, num_classes=2))
    want_p, want_r, want_f1, want_acc = brute_force_metrics(true, pred, 2, positive=1)
    pos = report.per_class[1]
    assert pos.precision == pytest.approx(want_p, abs=1e-12)
    assert pos.recall == pytest.approx(want_r, abs=1e-12)
    assert pos.f1 == pytest.approx(want_f1, abs=1e-12)
    assert report.accuracy == pytest.approx(want_acc, abs=1e-12)


def test_metrics_match_brute_force_macro():
    true = [hash_uint(3, "m3-t", i) for i in range(240)]
    pred = [hash_uint(3, "m3-p", i) for i in range(240)]
    report = metrics(confusion(true, pred, num_classes=3))
    want_p, want_r, want_f1, want_acc = brute_force_metrics(true, pred, 3)
    assert report.macro_precision == pytest.approx(want_p, abs=1e-12)
    assert report.macro_recall == pytest.approx(want_r, abs=1e-12)
    assert report.macro_f1 == pytest.approx(want_f1, abs=1e-12)
    assert report.accuracy == pytest.approx(want_acc, abs=1e-12)
    assert report.averaging == "macro"


def test_absent_class_flagged_not_crashed():
    # Class 2 never appears in truth or prediction.
    true = [0, 1, 0, 1]
    pred = [0, 1, 1, 0]
    report = metrics(confusion(true, pred, num_classes=3))
    third = report.per_class[2]
    assert third.precision == 0.0 and third.recall == 0.0 and third.f1 == 0.0
    assert report.degenerate_flags


def test_positive_class_override():
    true = [0, 0, 1, 1]
    pred = [0, 1, 1, 1]
    report = metrics(confusion(true, pred, num_classes=2), positive_class=0)
    assert report.positive is report.per_class[0]
    with pytest.raises(MetricsError):
        metrics(confusion(true, pred, num_classes=2), positive_class=5)


def test_random_binary_accuracy_near_half():
    n = 4000
    true = [hash_uint(2, "rand-t", i) for i in range(n)]
    pred = [hash_uint(2, "rand-p", i) for i in range(n)]
    report = metrics(confusion(true, pred, num_classes=2))
    assert abs(report.accuracy - 0.5) < 0.03


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=150))
@settings(max_examples=60, deadline=None)
def test_metrics_equal_brute_force_property(pairs):
    true = [t for t, _ in pairs]
    pred = [p for _, p in pairs]
    report = metrics(confusion(true, pred, num_classes=3))
    want = brute_force_metrics(true, pred, 3)
    got = (report.macro_precision, report.macro_recall, report.macro_f1, report.accuracy)
    for g, w in zip(got, want):
        assert g == pytest.approx(w, abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=100))
@settings(max_examples=40, deadline=None)
def test_accuracy_invariant_under_pair_permutation(pairs):
    true = [t for t, _ in pairs]
    pred = [p for _, p in pairs]
    shuffled = list(reversed(pairs))
    a = metrics(confusion(true, pred, num_classes=2)).accuracy
    b = metrics(
        confusion([t for t, _ in shuffled], [p for _, p in shuffled], num_classes=2)
    ).accuracy
    assert a == b


def test_all_positive_accuracy_equals_prevalence():
    for n_pos in (1, 10, 99):
        true = [1] * n_pos + [0] * (100 - n_pos)
        pred = [1] * 100
        report = metrics(confusion(true, pred, num_classes=2))
        assert report.accuracy == pytest.approx(n_pos / 100, abs=1e-12)
        assert report.per_class[1].recall == 1.0


# --- rounding and table ---------------------------------------------------------


def test_round_half_up_behavior():
    assert round_half_up(0.925, 2) == 0.93
    assert round_half_up(0.125, 2) == 0.13
    assert round_half_up(0.124, 2) == 0.12
    assert round_half_up(0.5, 0) == 1.0
    assert round_half_up(-0.125, 2) == -0.13


def test_table_report_shape_and_values():
    true = [1] * 484 + [0] * 260
    rows = [("Few-Shot", metrics(confusion(true, [1] * 744, num_classes=2)))]
    out = table_report(rows)
    lines = out["text"].splitlines()
    assert lines[0].split() == ["Scheme", "Precision", "Recall", "F1", "Accuracy"]
    assert len(lines) == 2  # header plus one data row
    cells = lines[1].split()
    assert cells[0] == "Few-Shot"
    assert cells[1:] == ["0.65", "1.00", "0.79", "0.65"]
    assert out["rows"][0]["precision"] == 0.65
    assert out["rows"][0]["f1"] == 0.79


def test_table_report_multiple_rows_aligned():
    true = [0, 1] * 20
    m1 = metrics(confusion(true, true, num_classes=2))
    m2 = metrics(confusion(true, [1] * 40, num_classes=2))
    out = table_report([("Perfect", m1), ("AlwaysDirty", m2)])
    lines = out["text"].splitlines()
    assert len(lines) == 3
    assert lines[1].split()[1:] == ["1.00", "1.00", "1.00", "1.00"]
    assert lines[2].split()[1:] == ["0.50", "1.00", "0.67", "0.50"]


def test_table_report_empty():
    out = table_report([])
    assert out["rows"] == []


# --- prediction files -------------------------------------------------------------


def test_prediction_file_round_trip(tmp_path):
    path = tmp_path / "preds.csv"
    write_predictions(path, [("s1", 0, 0), ("s2", 1, 0), ("s3", 1, 1)])
    y_true, y_pred, ids = load_predictions(path)
    assert y_true == [0, 1, 1]
    assert y_pred == [0, 0, 1]
    assert ids == ["s1", "s2", "s3"]


def test_load_predictions_rejects_wrong_header(tmp_path):
    path = tmp_path / "preds.csv"
    path.write_text("id,gold,guess\ns1,0,0\n")
    with pytest.raises(MetricsError, match="columns"):
        load_predictions(path)


def test_load_predictions_rejects_non_integer_labels(tmp_path):
    path = tmp_path / "preds.csv"
    path.write_text("sample_id,true_label,predicted_label\ns1,zero,0\n")
    with pytest.raises(MetricsError, match="integers"):
        load_predictions(path)


def test_load_predictions_rejects_empty(tmp_path):
    path = tmp_path / "preds.csv"
    path.write_text("sample_id,true_label,predicted_label\n")
    with pytest.raises(MetricsError, match="no data rows"):
        load_predictions(path)


def test_load_predictions_missing_file(tmp_path):
    with pytest.raises(MetricsError, match="cannot read"):
        load_predictions(tmp_path / "nope.csv")
