import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgequant import container
from edgequant.datakit import LabeledDataset
from edgequant.errors import InvalidArgumentError, NoFeasibleModelError
from edgequant.evalkit import (
    AccuracyPriority,
    EvalReport,
    SizePriority,
    compare,
    confusion_matrix,
    evaluate,
    metrics_from_cm,
    parse_policy,
    select_model,
)
from edgequant.quantizer import quantize_dynamic, quantize_fp16

import reported_results

# --- metrics -----------------------------------------------------------------


def test_two_class_example_by_hand():
    m = metrics_from_cm([[2, 1], [0, 3]])
    assert m.accuracy == pytest.approx(5 / 6)
    assert m.per_class_precision == pytest.approx([1.0, 0.75])
    assert m.per_class_recall == pytest.approx([2 / 3, 1.0])
    assert m.per_class_f1 == pytest.approx([0.8, 6 / 7])
    assert m.f1 == pytest.approx((0.8 + 6 / 7) / 2)
    assert m.f1 == pytest.approx(0.8286, abs=5e-5)


def test_perfect_predictor():
    m = metrics_from_cm(np.diag([4, 7, 1]))
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_absent_class_scores_zero_and_counts_in_mean():
    m = metrics_from_cm([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
    assert m.per_class_f1 == [1.0, 1.0, 0.0]
    assert m.f1 == pytest.approx(2 / 3)


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 0, 1, 2, 2], [0, 1, 1, 2, 0], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 1]]
    assert cm.sum() == 5


@pytest.mark.parametrize("bad", [np.zeros((2, 2)), [[1, -1], [0, 1]], np.ones((2, 3))])
def test_bad_confusion_matrices(bad):
    with pytest.raises(InvalidArgumentError):
        metrics_from_cm(bad)


confusion = st.integers(2, 6).flatmap(
    lambda k: st.lists(st.integers(0, 50), min_size=k * k, max_size=k * k).map(
        lambda v: np.array(v, dtype=np.int64).reshape(k, k)
    )
).filter(lambda cm: cm.sum() > 0)


@given(confusion, st.integers(1, 9))
def test_scaling_counts_leaves_metrics_unchanged(cm, k):
    a, b = metrics_from_cm(cm), metrics_from_cm(cm * k)
    for name in ("accuracy", "precision", "recall", "f1"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), rel=1e-12)


@given(confusion, st.randoms(use_true_random=False))
def test_relabeling_classes_leaves_macro_metrics_unchanged(cm, rnd):
    perm = list(range(len(cm)))
    rnd.shuffle(perm)
    a, b = metrics_from_cm(cm), metrics_from_cm(cm[np.ix_(perm, perm)])
    for name in ("accuracy", "precision", "recall", "f1"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), rel=1e-12)


@given(confusion)
def test_accuracy_is_support_weighted_recall(cm):
    m = metrics_from_cm(cm)
    support = cm.sum(axis=1)
    assert m.accuracy == pytest.approx(float(np.dot(m.per_class_recall, support) / support.sum()), rel=1e-12)
    assert all(0 <= v <= 1 for v in (m.accuracy, m.precision, m.recall, m.f1))


# --- evaluate ----------------------------------------------------------------


def test_evaluate_report_matches_container_and_predictions(trained_tiny, synth_splits):
    te = synth_splits[2]
    for g in (trained_tiny, quantize_dynamic(trained_tiny)):
        rep = evaluate(g, te, config={"seed": 1})
        blob = container.serialize(g)
        assert rep.size_bytes == len(blob)
        assert rep.mode == g.quantization and rep.model_id == f"tiny_cnn-{g.quantization}"
        assert np.sum(rep.confusion) == len(te) == rep.num_samples
        assert set(rep.per_class) == set(te.class_names)
        assert rep.config == {"seed": 1} and len(rep.model_sha256) == 64
        assert rep.latency_ms_per_sample > 0


def test_evaluate_ties_go_to_lowest_class(trained_tiny):
    g = trained_tiny.copy()
    head = g.node("head")
    head.weights = {k: type(t)(np.zeros_like(t.data)) for k, t in head.weights.items()}
    ds = LabeledDataset(np.zeros((3, 32, 32, 3), np.float32), np.array([0, 1, 2]), ["a", "b", "c", "d"])
    rep = evaluate(g, ds)
    assert [row[0] for row in rep.confusion] == [1, 1, 1, 0]


def test_evaluate_rejects_empty_dataset(trained_tiny):
    empty = LabeledDataset(np.zeros((0, 32, 32, 3), np.float32), np.zeros(0, np.int64), list("abcd"))
    with pytest.raises(InvalidArgumentError):
        evaluate(trained_tiny, empty)


def test_report_json_round_trip(tmp_path):
    r = reported_results.reports()[0]
    r.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json") == r
    (tmp_path / "bad.json").write_text(json.dumps({"model_id": "x"}))
    with pytest.raises(InvalidArgumentError, match="missing"):
        EvalReport.load(tmp_path / "bad.json")


# --- compare -----------------------------------------------------------------


def test_single_report_has_ratio_one():
    r = EvalReport("m-none", "m", "none", 1000, 0.9, 0.9, 0.9, 0.9)
    assert compare([r]).rows[0]["size_ratio"] == 1.0


def test_compare_groups_rows_and_computes_ratios(trained_tiny, synth_splits):
    te = synth_splits[2]
    reps = [evaluate(g, te) for g in (quantize_dynamic(trained_tiny), trained_tiny, quantize_fp16(trained_tiny))]
    table = compare(reps)
    assert [r["mode"] for r in table.rows] == ["none", "fp16", "dynamic"]
    base = reps[1].size_bytes
    for row, rep in zip(table.rows, (reps[1], reps[2], reps[0])):
        assert row["size_ratio"] == rep.size_bytes / base
    text = table.to_text().splitlines()
    assert len(text) == 5 and "Float16 quantization" in text[3]
    csv_lines = table.to_csv().splitlines()
    assert csv_lines[0] == "model,mode,size_mb,accuracy,precision,recall,f1,size_ratio" and len(csv_lines) == 4


def test_compare_without_baseline_leaves_ratio_blank():
    table = compare(reported_results.reports()[:2])
    assert all(r["size_ratio"] is None for r in table.rows)
    assert table.to_csv().splitlines()[1].endswith(",")
    with pytest.raises(InvalidArgumentError):
        compare([])


# --- selection ---------------------------------------------------------------


def _pair():
    return [
        reported_results.make_report("googlenet", "dynamic", 0.143, 0.97, 0.97, 0.97, 0.97),
        reported_results.make_report("efficientnet_b0", "dynamic", 4.5, 0.99, 0.99, 0.99, 0.99),
    ]


def test_selection_on_two_candidates():
    assert select_model(_pair(), SizePriority(0.95)) == "googlenet-dynamic"
    assert select_model(_pair(), AccuracyPriority()) == "efficientnet_b0-dynamic"


def test_selection_on_reported_quantized_results():
    reps = reported_results.reports()
    assert select_model(reps, SizePriority(0.95)) == "googlenet-dynamic"
    assert select_model(reps, AccuracyPriority()) == "efficientnet_b0-dynamic"
    assert select_model(reps, SizePriority(0.98)) == "efficientnet_b0-dynamic"


def test_single_candidate_is_chosen_by_both_policies():
    one = _pair()[:1]
    assert select_model(one, SizePriority(0.5)) == select_model(one, AccuracyPriority()) == "googlenet-dynamic"


def test_infeasible_floor_names_near_miss():
    with pytest.raises(NoFeasibleModelError, match="efficientnet_b0-dynamic") as exc:
        select_model(_pair(), SizePriority(0.995))
    assert exc.value.near_miss.model_id == "efficientnet_b0-dynamic"


def test_tie_breaks():
    a = EvalReport("a", "a", "dynamic", 100, 0.9, 0.9, 0.9, 0.90)
    b = EvalReport("b", "b", "dynamic", 100, 0.9, 0.9, 0.9, 0.95)
    c = EvalReport("c", "c", "dynamic", 50, 0.9, 0.9, 0.9, 0.95)
    assert select_model([a, b], SizePriority(0.8)) == "b"  # same size -> higher F1
    assert select_model([b, c], AccuracyPriority()) == "c"  # same F1 -> smaller


@given(st.lists(st.tuples(st.integers(1, 5), st.sampled_from([0.9, 0.95, 0.97, 0.99])), min_size=1, max_size=8))
@settings(max_examples=60)
def test_selection_is_order_independent(specs):
    reps = [EvalReport(f"m{i}", f"m{i}", "dynamic", s, f, f, f, f) for i, (s, f) in enumerate(specs)]
    for policy in (SizePriority(0.9), AccuracyPriority()):
        assert select_model(reps, policy) == select_model(list(reversed(reps)), policy)


def test_parse_policy():
    assert parse_policy("size:0.95") == SizePriority(0.95)
    assert parse_policy("accuracy") == AccuracyPriority()
    for bad in ("size", "size:x", "speed", "accuracy:1"):
        with pytest.raises(InvalidArgumentError):
            parse_policy(bad)
