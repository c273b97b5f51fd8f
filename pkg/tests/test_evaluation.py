import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from src.errors import InvalidArgumentError, LeakageError
from src.models.schemas import (
    AugmentationType,
    ClassLabel,
    ClassLabels,
    ConfusionMatrix,
    ManifestEntry,
    OriginKind,
    Provenance,
)
from src.services.evaluation import (
    CVRun,
    audit_leakage,
    confusion,
    f1_score,
    format_table,
    metrics,
    repeated_split_cv,
    split_memberships,
    stratified_split,
    summarize_cv,
    write_cv_summary,
    write_report,
)


def original(clip_id, label=ClassLabel.CRASH):
    return ManifestEntry(clip_id=clip_id, path=f"{clip_id}.wav", label=label)


def variant(clip_id, parent_id, label=ClassLabel.CRASH, noise_id=None):
    return ManifestEntry(clip_id=clip_id, label=label, origin=OriginKind.AUGMENTED,
                         provenance=Provenance(parent_id=parent_id, aug_type=AugmentationType.NOISE_MIX,
                                               params={"amp": 0.01}, noise_id=noise_id))


def balanced_originals(per_class=20):
    return [original(f"{label.value}_{i:03d}", label) for label in ClassLabel for i in range(per_class)]


def test_confusion_perfect_predictions():
    labels = [0, 1, 2, 3, 4, 4]
    cm = confusion(labels, labels, 5)
    assert_array_equal(cm.counts, np.diag([1, 1, 1, 1, 2]))
    assert cm.class_names == ClassLabels.names()


def test_confusion_single_sample_and_row_sums():
    assert_array_equal(confusion([2], [0], 3).counts, [[0, 0, 0], [0, 0, 0], [1, 0, 0]])
    true = np.array([0, 0, 1, 2, 2, 2])
    cm = confusion(true, [1, 0, 1, 0, 2, 1], 3)
    assert_array_equal(cm.counts.sum(axis=1), np.bincount(true))


@pytest.mark.parametrize("true, pred", [([0, 5], [0, 1]), ([0, 1], [0, -1]), ([0, 1], [0])])
def test_confusion_invalid(true, pred):
    with pytest.raises(InvalidArgumentError):
        confusion(true, pred, 5)


def test_metrics_precision_recall_f1():
    report = metrics(ConfusionMatrix(counts=np.array([[1, 0], [1, 1]]), class_names=["a", "b"]))
    first = report.classes[0]
    assert (first.tp, first.fp, first.fn, first.tn) == (1, 1, 0, 1)
    assert first.precision == 0.5
    assert first.recall == 1.0
    assert first.f1 == pytest.approx(2 / 3)
    assert first.false_positive_rate == 0.5
    assert report.accuracy == pytest.approx(2 / 3)


def test_f1_reference_value():
    assert round(f1_score(0.94, 0.98), 2) == 0.96
    assert f1_score(0.0, 0.0) == 0.0


def test_binary_textbook_case():
    # 40 positifs dont 30 détectés, 60 négatifs dont 10 fausses alarmes
    cm = ConfusionMatrix(counts=np.array([[50, 10], [10, 30]]), class_names=["neg", "pos"])
    positive = metrics(cm).classes[1]
    assert positive.precision == 0.75
    assert positive.recall == 0.75
    assert positive.false_positive_rate == pytest.approx(10 / 60)
    assert positive.accuracy == 0.8


def test_diagonal_matrix():
    report = metrics(confusion([0, 1, 2, 3, 4], [0, 1, 2, 3, 4], 5))
    assert report.accuracy == 1.0
    assert all(c.false_positive_rate == 0.0 for c in report.classes)
    assert report.macro_f1 == 1.0


def test_zero_denominators_are_flagged():
    report = metrics(ConfusionMatrix(counts=np.array([[2, 0], [0, 0]]), class_names=["a", "b"]))
    empty = report.classes[1]
    assert (empty.precision, empty.recall, empty.f1) == (0.0, 0.0, 0.0)
    assert set(empty.degenerate) == {"precision", "recall", "f1"}
    assert report.classes[0].degenerate == ["false_positive_rate"]
    assert "Dénominateurs nuls" in format_table(report)


def test_empty_and_non_square():
    with pytest.raises(InvalidArgumentError):
        metrics(ConfusionMatrix(counts=np.zeros((3, 3), dtype=int), class_names=["a", "b", "c"]))
    with pytest.raises(InvalidArgumentError):
        metrics(ConfusionMatrix(counts=np.ones((2, 3), dtype=int), class_names=["a", "b"]))


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
def test_metric_invariants(pairs):
    true, pred = zip(*pairs)
    report = metrics(confusion(true, pred, 5))
    assert sum(c.tp for c in report.classes) == sum(t == p for t, p in pairs)
    assert sum(c.support for c in report.classes) == report.total == len(pairs)
    for c in report.classes:
        assert c.tp + c.fp + c.fn + c.tn == len(pairs)
        if c.precision > 0 and c.recall > 0:
            assert min(c.precision, c.recall) - 1e-12 <= c.f1 <= max(c.precision, c.recall) + 1e-12
    assert metrics(confusion(true, true, 5)).accuracy == 1.0


@given(st.floats(0, 1), st.floats(0, 1))
def test_f1_symmetric(p, r):
    assert f1_score(p, r) == pytest.approx(f1_score(r, p))


def test_stratified_split_proportions():
    labels = np.repeat([0, 1, 2], [40, 10, 3])
    train, held_out = stratified_split(labels, 0.3, seed=0)
    assert len(np.intersect1d(train, held_out)) == 0
    assert len(train) + len(held_out) == len(labels)
    assert list(np.bincount(labels[held_out])) == [12, 3, 1]


def test_stratified_split_is_seeded():
    labels = np.repeat(np.arange(5), 20)
    first = stratified_split(labels, 0.3, seed=4)
    assert_array_equal(first[1], stratified_split(labels, 0.3, seed=4)[1])
    assert not np.array_equal(first[1], stratified_split(labels, 0.3, seed=5)[1])
    assert list(np.bincount(labels[first[1]])) == [6] * 5


def test_stratified_split_needs_two_per_class():
    with pytest.raises(InvalidArgumentError):
        stratified_split([0, 0, 1], 0.3, seed=0)


def test_split_memberships_deterministic_and_balanced():
    labels = np.repeat(np.arange(5), 40)
    first = split_memberships(labels, 10, 0.3, seed=5)
    second = split_memberships(labels, 10, 0.3, seed=5)
    assert [s for s, _, _ in first] == [s for s, _, _ in second]
    for (_, a_train, a_eval), (_, b_train, b_eval) in zip(first, second):
        assert_array_equal(a_train, b_train)
        assert_array_equal(a_eval, b_eval)
    eval_counts = np.zeros(len(labels))
    for _, _, held_out in first:
        eval_counts[held_out] += 1
    assert eval_counts.mean() == pytest.approx(3.0)


def test_audit_leakage_cases():
    held_out = [original("crash_001")]
    audit_leakage([original("crash_002"), variant("crash_002__noise", "crash_002")], held_out)
    with pytest.raises(LeakageError):
        audit_leakage([original("crash_001")], held_out)
    with pytest.raises(LeakageError):
        audit_leakage([variant("crash_001__noise", "crash_001")], held_out)
    with pytest.raises(LeakageError):
        audit_leakage([variant("crash_002__noise", "crash_002", noise_id="crash_001")], held_out)


def test_repeated_split_cv_with_oracle():
    entries = balanced_originals(10)

    def perfect(train, held_out, seed):
        return CVRun(train, np.array([ClassLabels.index_of(e.label) for e in held_out]))

    reports, seeds = repeated_split_cv(entries, perfect, n_repeats=3, seed=1)
    assert len(reports) == len(seeds) == 3
    assert all(report.accuracy == 1.0 for report in reports)
    assert all(report.total == 15 for report in reports)


def test_repeated_split_cv_detects_leakage():
    entries = balanced_originals(10)

    def leaky(train, held_out, seed):
        return CVRun(train + held_out[:1], np.zeros(len(held_out), dtype=int))

    with pytest.raises(LeakageError):
        repeated_split_cv(entries, leaky, n_repeats=1)


def test_repeated_split_cv_rejects_variants():
    entries = balanced_originals(10) + [variant("crash_000__noise", "crash_000")]
    with pytest.raises(InvalidArgumentError):
        repeated_split_cv(entries, lambda *_: None, n_repeats=1)


def test_summarize_cv_quartiles():
    reports = [metrics(confusion([0, 1, 1, 1], [0, 1, 1, 1][:k] + [0] * (4 - k), 2)) for k in (1, 2, 3, 4)]
    summary = summarize_cv(reports, [1, 2, 3, 4])
    accuracy = summary.metrics["accuracy"]
    assert (accuracy.min, accuracy.median, accuracy.max) == (0.25, 0.625, 1.0)
    assert summary.repeats == 4
    with pytest.raises(InvalidArgumentError):
        summarize_cv([])


def test_reports_are_deterministic(tmp_path):
    report = metrics(confusion([0, 1, 2, 3, 4, 0], [0, 1, 2, 3, 3, 1], 5))
    json_a, table_a = write_report(report, tmp_path / "a")
    json_b, table_b = write_report(report, tmp_path / "b")
    assert json_a.read_bytes() == json_b.read_bytes()
    assert table_a.read_bytes() == table_b.read_bytes()
    table = table_a.read_text(encoding="utf-8")
    for column in ("Precision", "Recall", "F1", "FPR", "Count", "Car Horn", "Accuracy"):
        assert column in table

    write_cv_summary(summarize_cv([report, report], [7, 8]), [report, report], tmp_path / "cv")
    assert sorted(p.name for p in (tmp_path / "cv").iterdir()) == [
        "cv_01.json", "cv_01.txt", "cv_02.json", "cv_02.txt", "cv_summary.json", "cv_summary.txt"]
