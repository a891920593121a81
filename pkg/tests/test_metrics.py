import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sonochain.domain import BBox, ClinicalScore
from sonochain.errors import DomainError, EvalError
from sonochain.inference import TaskId
from sonochain.metrics import (
    ConfusionMatrix,
    EvalRecord,
    classification_metrics,
    clinical_mean,
    confusion,
    iou,
    load_clinical_scores,
    load_detection_pairs,
    load_eval_records,
    mean_best_iou,
)


def brute_force_metrics(k, samples):
    """Per-sample recomputation from (truth, pred) pairs."""
    correct = sum(1 for t, p in samples if t == p)
    precision, recall, f1 = [], [], []
    for c in range(k):
        tp = sum(1 for t, p in samples if t == c and p == c)
        fp = sum(1 for t, p in samples if t != c and p == c)
        fn = sum(1 for t, p in samples if t == c and p != c)
        pr = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        precision.append(pr)
        recall.append(rc)
        f1.append(2 * pr * rc / (pr + rc) if pr + rc else 0.0)
    return {
        "accuracy": correct / len(samples),
        "macro_precision": sum(precision) / k,
        "macro_recall": sum(recall) / k,
        "macro_f1": sum(f1) / k,
    }


def expand(cm):
    return [(t, p) for t in range(cm.k) for p in range(cm.k) for _ in range(cm.counts[t][p])]


def records(task, pairs):
    return [EvalRecord(f"i{n}", task, t, p) for n, (t, p) in enumerate(pairs)]


class TestConfusion:
    def test_all_correct(self):
        cm = confusion(records(TaskId.SHAPE, [(0, 0)] * 4 + [(1, 1)] * 6))
        assert cm.counts == ((4, 0), (0, 6))

    def test_hand_counted(self):
        assert confusion(records(TaskId.SHAPE, [(0, 0), (0, 1), (1, 1)])).counts == ((1, 1), (0, 1))

    def test_mixed_tasks(self):
        with pytest.raises(EvalError):
            confusion(records(TaskId.SHAPE, [(0, 0)]) + records(TaskId.ECHO, [(1, 2)]))

    def test_empty(self):
        with pytest.raises(EvalError):
            confusion([])

    def test_label_range(self):
        with pytest.raises(EvalError):
            EvalRecord("x", TaskId.SHAPE, 0, 2)

    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40), st.randoms())
    def test_counts_sum_and_permutation(self, pairs, rnd):
        cm = confusion(records(TaskId.ECHO, pairs))
        assert cm.total == len(pairs)
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        assert confusion(records(TaskId.ECHO, shuffled)) == cm


class TestClassificationMetrics:
    def test_perfect(self):
        m = classification_metrics(ConfusionMatrix(3, ((2, 0, 0), (0, 3, 0), (0, 0, 1))))
        assert (m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1) == (1.0, 1.0, 1.0, 1.0)

    def test_hand_computed(self):
        m = classification_metrics(ConfusionMatrix(2, ((1, 1), (0, 1))))
        assert m.accuracy == pytest.approx(2 / 3, abs=1e-12)
        # precision: class 0 = 1/1, class 1 = 1/2
        assert m.macro_precision == pytest.approx(0.75, abs=1e-12)
        # recall: class 0 = 1/2, class 1 = 1/1
        assert m.macro_recall == pytest.approx(0.75, abs=1e-12)
        # f1: class 0 = 2/3, class 1 = 2/3
        assert m.macro_f1 == pytest.approx(2 / 3, abs=1e-12)

    def test_zero_division_flagged(self):
        m = classification_metrics(ConfusionMatrix(3, ((2, 0, 0), (0, 1, 1), (0, 0, 0))))
        assert m.recall[2] == 0.0
        assert (2, "recall") in m.zero_division
        assert m.to_dict()["averaging"] == "macro"

    def test_empty_matrix(self):
        with pytest.raises(EvalError):
            classification_metrics(ConfusionMatrix(2, ((0, 0), (0, 0))))

    @given(st.integers(1, 6).flatmap(
        lambda k: st.lists(st.lists(st.integers(0, 6), min_size=k, max_size=k), min_size=k, max_size=k)
    ).filter(lambda rows: sum(map(sum, rows)) > 0))
    def test_matches_oracle(self, rows):
        cm = ConfusionMatrix(len(rows), tuple(map(tuple, rows)))
        m = classification_metrics(cm)
        for key, value in brute_force_metrics(cm.k, expand(cm)).items():
            assert getattr(m, key) == pytest.approx(value, abs=1e-12)


class TestIoU:
    def test_identical(self):
        box = BBox(0.1, 0.2, 0.6, 0.9)
        assert iou(box, box) == 1.0

    def test_disjoint_and_touching(self):
        assert iou(BBox(0, 0, 0.2, 0.2), BBox(0.5, 0.5, 0.7, 0.7)) == 0.0
        assert iou(BBox(0, 0, 0.5, 0.5), BBox(0.5, 0, 1, 0.5)) == 0.0

    def test_quarter_overlap(self):
        # intersection 0.25^2 = 0.0625; union 0.25 + 0.25 - 0.0625 = 0.4375
        assert iou(BBox(0, 0, 0.5, 0.5), BBox(0.25, 0.25, 0.75, 0.75)) == pytest.approx(1 / 7, abs=1e-9)

    def test_containment(self):
        # inner area 0.04 inside outer area 0.16
        assert iou(BBox(0.1, 0.1, 0.5, 0.5), BBox(0.2, 0.2, 0.4, 0.4)) == pytest.approx(0.25, abs=1e-12)

    @given(*(st.floats(0, 1) for _ in range(8)))
    def test_symmetric_bounded(self, a0, a1, a2, a3, b0, b1, b2, b3):
        try:
            a = BBox(min(a0, a2), min(a1, a3), max(a0, a2), max(a1, a3))
            b = BBox(min(b0, b2), min(b1, b3), max(b0, b2), max(b1, b3))
        except DomainError:
            return
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0
        if a.as_tuple() != b.as_tuple():
            assert iou(a, b) < 1.0

    def test_mean_best_iou(self):
        truth = BBox(0, 0, 0.5, 0.5)
        pairs = [([truth], [BBox(0.25, 0.25, 0.75, 0.75), truth]), ([BBox(0.1, 0.1, 0.2, 0.2)], [])]
        assert mean_best_iou(pairs) == pytest.approx(0.5)


class TestClinical:
    def test_mean(self):
        assert f"{clinical_mean([3, 4, 4]):.2f}" == "3.67"
        assert clinical_mean([ClinicalScore(5)] * 3) == 5.0

    def test_empty(self):
        with pytest.raises(EvalError):
            clinical_mean([])

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            clinical_mean([3, 6])

    def test_load(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("study_id,score\na,3\nb,4\nc,4\n")
        assert [s.value for s in load_clinical_scores(path)] == [3, 4, 4]
        path.write_text("study_id,score\na,3\nb,7\nc,x\n")
        with pytest.raises(EvalError, match="line 3.*line 4"):
            load_clinical_scores(path)


class TestRecordFiles:
    def test_csv(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("image_id,task,truth,pred\na,probe,0,0\nb,probe,3,4\n")
        recs = load_eval_records(path, TaskId.PROBE)
        assert [(r.truth, r.pred) for r in recs] == [(0, 0), (3, 4)]

    def test_csv_errors_name_lines(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("image_id,task,truth,pred\na,probe,0,0\nb,probe,x\nc,probe,0,12\n")
        with pytest.raises(EvalError) as info:
            load_eval_records(path)
        assert "line 3" in str(info.value) and "line 4" in str(info.value)

    def test_jsonl(self, tmp_path):
        path = tmp_path / "r.jsonl"
        path.write_text(json.dumps({"image_id": "a", "task": "echo", "truth": 2, "pred": 1}) + "\n")
        assert load_eval_records(path)[0] == EvalRecord("a", TaskId.ECHO, 2, 1)

    def test_task_mismatch(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("image_id,task,truth,pred\na,shape,0,0\n")
        with pytest.raises(EvalError):
            load_eval_records(path, TaskId.PROBE)

    def test_detection_pairs(self, tmp_path):
        path = tmp_path / "d.jsonl"
        box = {"x0": 0, "y0": 0, "x1": 0.5, "y1": 0.5}
        path.write_text(json.dumps({"image_id": "a", "truth": [box], "pred": [box]}) + "\n")
        assert mean_best_iou(load_detection_pairs(path)) == 1.0
