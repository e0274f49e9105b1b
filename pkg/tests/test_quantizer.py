import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgequant import container
from edgequant.builders import GraphBuilder, build_architecture
from edgequant.engine import Executor
from edgequant.errors import CalibrationIncompleteError, CalibrationRequiredError, InvalidArgumentError, InvalidStateError
from edgequant.graph import MATMUL_OPS, fold_batchnorm, param_count
from edgequant.quantizer import (
    CalibrationStats,
    TensorRange,
    batches_of,
    calibrate,
    quantize_dynamic,
    quantize_fp16,
    quantize_full,
)
from edgequant.tensor import DType, dequantize, f16_to_f32, f32_to_f16, Tensor


@pytest.fixture(scope="module")
def big_tiny():
    """A >= 1e6-parameter tiny_cnn (weights materialized) for size ratios."""
    return build_architecture("tiny_cnn", 4, width=64, depth=4, init_seed=1)


@pytest.fixture(scope="module")
def small_graph():
    return build_architecture("tiny_cnn", 4, (16, 16), init_seed=2, width=8, depth=2)


def _ratio(q, g):
    return container.size_bytes(q) / container.size_bytes(g)


# --- fp16 --------------------------------------------------------------------


def test_fp16_size_ratio(big_tiny):
    assert param_count(big_tiny) >= 10**6
    assert abs(_ratio(quantize_fp16(big_tiny), big_tiny) - 0.50) <= 0.01


def test_fp16_converts_every_tensor_and_keeps_topology(small_graph):
    q = quantize_fp16(small_graph)
    assert q.quantization == "fp16"
    assert [n.id for n in q.nodes] == [n.id for n in small_graph.nodes]
    assert all(t.dtype is DType.F16 for _, t in q.tensors())


def test_fp16_weight_error_bound(small_graph):
    q = quantize_fp16(small_graph)
    for (name, t), (_, t16) in zip(small_graph.tensors(), q.tensors()):
        w = t.data.astype(np.float64)
        back = t16.to_float().astype(np.float64)
        normal = np.abs(w) >= 2.0**-14
        assert np.all(np.abs(w - back)[normal] <= 2.0**-11 * np.abs(w[normal])), name


def test_fp16_exact_weights_unchanged(small_graph):
    g = small_graph.copy()
    for n in g.nodes:
        n.weights = {k: Tensor(f16_to_f32(f32_to_f16(t.data))) for k, t in n.weights.items()}
    q = quantize_fp16(g)
    for (_, a), (_, b) in zip(g.tensors(), q.tensors()):
        assert np.array_equal(a.data, b.to_float())


# --- dynamic -----------------------------------------------------------------


def test_dynamic_size_ratio(big_tiny):
    assert 0.25 <= _ratio(quantize_dynamic(big_tiny), big_tiny) <= 0.28


def test_dynamic_layout(small_graph):
    q = quantize_dynamic(small_graph)
    assert q.quantization == "dynamic"
    assert not any(n.op == "batchnorm" for n in q.nodes)
    for n in q.nodes:
        if n.op not in MATMUL_OPS:
            continue
        k = n.weights["kernel"]
        assert n.weights["bias"].dtype is DType.F32
        if k.size < 1024:
            assert k.dtype is DType.F32
            continue
        assert k.dtype is DType.I8 and k.qparams.symmetric
        if n.op == "fc":
            assert not k.qparams.per_channel
        else:
            assert len(k.qparams.scales) == k.shape[-1] and k.qparams.axis == 3


def test_dynamic_per_tensor_flag(small_graph):
    q = quantize_dynamic(small_graph, per_channel=False, min_elements=1)
    assert all(not n.weights["kernel"].qparams.per_channel for n in q.nodes if n.op in MATMUL_OPS)


def test_dynamic_weight_error_within_half_scale():
    rng = np.random.default_rng(4)
    b = GraphBuilder((8, 8, 6), seed=4)
    c = b.conv("input", 12, 3, 1, 1)
    b.nodes[-1].weights["kernel"] = Tensor(rng.normal(0, 1, (3, 3, 6, 12)).astype(np.float32) * rng.uniform(0.01, 3, 12).astype(np.float32))
    g = b.finish(b.softmax(b.fc(b.gap(c), 2)), "t", 2)
    q = quantize_dynamic(g, min_elements=1)
    w = g.node(c).weights["kernel"].data.astype(np.float64)
    qk = q.node(c).weights["kernel"]
    err = np.abs(w - dequantize(qk).astype(np.float64))
    scales = np.asarray(qk.qparams.scales)
    assert np.all(err <= scales / 2 * (1 + 1e-6))


def test_matmul_param_count_unchanged(small_graph):
    folded = fold_batchnorm(small_graph)
    ref = {n.id: n.weights["kernel"].size for n in folded.nodes if n.op in MATMUL_OPS}
    x = np.random.default_rng(0).random((4, 16, 16, 3), dtype=np.float32)
    for q in (quantize_dynamic(small_graph), quantize_full(small_graph, calibrate(small_graph, [x]))):
        got = {n.id: n.weights["kernel"].size for n in q.nodes if n.op in MATMUL_OPS}
        assert got == ref


# --- guards ------------------------------------------------------------------


def test_passes_refuse_quantized_graphs(small_graph):
    x = np.random.default_rng(0).random((2, 16, 16, 3), dtype=np.float32)
    stats = calibrate(small_graph, [x])
    for q in (quantize_fp16(small_graph), quantize_dynamic(small_graph), quantize_full(small_graph, stats)):
        with pytest.raises(InvalidStateError):
            quantize_fp16(q)
        with pytest.raises(InvalidStateError):
            quantize_dynamic(q)
        with pytest.raises(InvalidStateError):
            quantize_full(q, stats)
        with pytest.raises(InvalidStateError):
            calibrate(q, [x])


def test_missing_stats_name_the_tensor(small_graph):
    x = np.random.default_rng(0).random((2, 16, 16, 3), dtype=np.float32)
    stats = calibrate(small_graph, [x])
    victim = "head"
    del stats.ranges[victim]
    with pytest.raises(CalibrationIncompleteError, match=victim):
        quantize_full(small_graph, stats)
    with pytest.raises(CalibrationRequiredError):
        quantize_full(small_graph, None)


# --- calibration -------------------------------------------------------------


def test_single_batch_stats_are_exact_extrema(small_graph):
    x = np.random.default_rng(1).random((6, 16, 16, 3), dtype=np.float32)
    stats = calibrate(small_graph, [x])
    trace = Executor(fold_batchnorm(small_graph)).trace(x)
    assert "softmax" not in stats
    for k, r in stats.ranges.items():
        assert (r.min, r.max) == (float(trace[k].min()), float(trace[k].max()))
        assert r.samples_seen == 6
    assert "input" in stats and "head" in stats


def test_two_batches_equal_merged_stats(small_graph):
    r = np.random.default_rng(2)
    b1, b2 = r.random((3, 16, 16, 3), dtype=np.float32), r.random((5, 16, 16, 3), dtype=np.float32) * 2
    both = calibrate(small_graph, [b1, b2])
    assert both == calibrate(small_graph, [b1]).merge(calibrate(small_graph, [b2]))


def test_calibration_budget_and_empty_input(small_graph):
    r = np.random.default_rng(3)
    batches = [r.random((2, 16, 16, 3), dtype=np.float32) for _ in range(5)]
    assert calibrate(small_graph, batches, max_batches=2) == calibrate(small_graph, batches[:2])
    with pytest.raises(InvalidArgumentError):
        calibrate(small_graph, [])
    assert sum(len(b) for b in batches_of(np.zeros((70, 1)), 32)) == 70


def test_all_zero_input_gives_degenerate_ranges():
    g = build_architecture("tiny_cnn", 3, (8, 8), width=4, depth=1, batchnorm=False)
    stats = calibrate(g, [np.zeros((2, 8, 8, 3), np.float32)])
    conv = next(n.id for n in g.nodes if n.op == "conv2d")
    assert stats[conv].min == stats[conv].max == 0.0
    q = quantize_full(g, stats)
    assert q.node(conv).out_qparams.scale == 1.0
    p = Executor(q).run(np.zeros((1, 8, 8, 3), np.float32))
    assert np.all(np.isfinite(p))


ranges = st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.integers(0, 1000)).map(
    lambda t: TensorRange(min(t[0], t[1]), max(t[0], t[1]), t[2])
)
stats_st = st.dictionaries(st.sampled_from(["a", "b", "c", "d"]), ranges, max_size=4).map(CalibrationStats)


@given(stats_st, stats_st, stats_st)
def test_merge_is_associative_and_commutative(a, b, c):
    assert a.merge(b) == b.merge(a)
    assert a.merge(b).merge(c) == a.merge(b.merge(c))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31))
def test_random_batch_partitions_give_same_stats(sizes, seed):
    g = build_architecture("tiny_cnn", 3, (8, 8), width=2, depth=1)
    x = np.random.default_rng(seed).random((sum(sizes), 8, 8, 3), dtype=np.float32)
    parts = np.split(x, np.cumsum(sizes)[:-1])
    assert calibrate(g, parts) == calibrate(g, [x])


def test_stats_text_round_trip(tmp_path, small_graph):
    x = np.random.default_rng(5).random((3, 16, 16, 3), dtype=np.float32)
    stats = calibrate(small_graph, [x])
    stats.save(tmp_path / "s.txt")
    assert CalibrationStats.load(tmp_path / "s.txt") == stats
    with pytest.raises(InvalidArgumentError):
        CalibrationStats.loads("a\t1\t0\t3\n")
    with pytest.raises(InvalidArgumentError):
        CalibrationStats.loads("a\t1\n")


# --- full integer ------------------------------------------------------------


def test_full_size_ratio(big_tiny):
    x = np.random.default_rng(0).random((2, 32, 32, 3), dtype=np.float32)
    q = quantize_full(big_tiny, calibrate(big_tiny, [x]))
    assert _ratio(q, big_tiny) <= 0.28


def test_full_int_structure(small_graph):
    x = np.random.default_rng(6).random((8, 16, 16, 3), dtype=np.float32)
    stats = calibrate(small_graph, [x])
    q = quantize_full(small_graph, stats)
    ops = [n.op for n in q.nodes]
    assert ops[1] == "quantize" and q.nodes[1].inputs == ["input"]
    assert ops[-2:] == ["dequantize", "softmax"]
    for n in q.nodes:
        if n.op in MATMUL_OPS:
            cout = n.weights["kernel"].shape[-1]
            assert n.weights["kernel"].dtype is DType.I8
            assert n.weights["bias"].dtype is DType.I32
            m0 = n.weights["requant_m0"].data
            assert m0.shape == (cout,) and np.all((m0 >= 2**30) & (m0 < 2**31))
            in_s = q.node(n.inputs[0]).out_qparams.scale
            w_s = np.broadcast_to(np.asarray(n.weights["kernel"].qparams.scales), (cout,))
            np.testing.assert_allclose(n.weights["bias"].qparams.scales, in_s * w_s, rtol=1e-6)


def test_relu_zero_point_and_clamp(small_graph):
    x = np.random.default_rng(7).random((8, 16, 16, 3), dtype=np.float32)
    q = quantize_full(small_graph, calibrate(small_graph, [x]))
    relus = [n for n in q.nodes if n.op == "relu"]
    assert relus
    for n in relus:
        qp = n.out_qparams
        assert dequantize(np.array([qp.zero_point], np.int8), qp)[0] == 0.0
        codes = np.arange(-128, 128, dtype=np.int8)
        clamped = np.maximum(codes, np.int8(qp.zero_point))
        real = dequantize(clamped, qp)
        np.testing.assert_array_equal(real, np.maximum(dequantize(codes, qp), 0))


def test_dequantized_values_stay_within_calibrated_range(small_graph):
    x = np.random.default_rng(8).random((8, 16, 16, 3), dtype=np.float32)
    stats = calibrate(small_graph, [x])
    q = quantize_full(small_graph, stats)
    for n in q.nodes:
        if n.out_qparams is None or n.id not in stats:
            continue
        qp = n.out_qparams
        r = stats[n.id]
        lo, hi = min(r.min, 0.0), max(r.max, 0.0)
        vals = dequantize(np.arange(-128, 128, dtype=np.int8), qp)
        if n.op == "relu" or n.inputs[0] in stats and qp is q.node(n.inputs[0]).out_qparams:
            continue  # shares a neighbour's (wider) range by design
        assert vals.min() >= lo - qp.scale and vals.max() <= hi + qp.scale
