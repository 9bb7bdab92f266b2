import dataclasses
import math

import numpy as np
import pytest

from pipeqpp import tensor as T
from pipeqpp.dataflow import tree_from_trace
from pipeqpp.domain import COST_FIELDS, OperatorInstance as Op, ResourceUtilization
from pipeqpp.harness import fit_encoders
from pipeqpp.models import (Ablation, CheckpointError, CheckpointVersionError, FeatureEncoder,
                            GatCalibrator, ModelBundle, ModelConfig, TargetScaler, TcnPredictor,
                            UnknownOperatorType, build_graph, coefficient_matrices, collate,
                            encode_operator, load_bundle, load_ocp, ocp_predict,
                            operator_features, predict_query, save_bundle, save_ocp,
                            tcn_coefficients)
from pipeqpp.models.checkpoint import dumps_bundle, loads_bundle
from pipeqpp.models.gat import NEG_INF, neighborhood_mask
from pipeqpp.models.ocp import zero_output_layer
from gradcheck import max_gradient_error
from tracekit import random_tiny_trace, untrained_ocp

UTIL = ResourceUtilization(0.2, 0.4, 0.6)


# ------------------------------------------------------------------ encoders

def test_numeric_feature_at_its_mean_encodes_to_zero():
    enc = FeatureEncoder.fit([{"x": 1.0}, {"x": 3.0}])
    assert enc.encode({"x": 2.0})[0] == 0.0
    assert enc.encode({"x": 3.0})[0] == pytest.approx(1.0)


def test_constant_feature_std_is_clamped():
    enc = FeatureEncoder.fit([{"x": 5.0}, {"x": 5.0}])
    assert enc.numeric["x"] == (5.0, 1.0)
    assert enc.encode({"x": 7.0})[0] == 2.0


def test_categorical_one_hot_and_unseen_slot():
    enc = FeatureEncoder.fit([{"kind": "a"}, {"kind": "b"}])
    assert enc.slot_names() == ["kind=a", "kind=b", "kind=<unseen>"]
    assert list(enc.encode({"kind": "b"})) == [0.0, 1.0, 0.0]
    assert list(enc.encode({"kind": "zzz"})) == [0.0, 0.0, 1.0]
    assert list(enc.encode({})) == [0.0, 0.0, 0.0]


def test_encoder_round_trip_and_errors():
    enc = FeatureEncoder.fit([{"x": 1.0, "k": "a"}, {"x": 4.0, "k": "b"}])
    again = FeatureEncoder.from_dict(enc.to_dict())
    s = {"x": 2.5, "k": "a"}
    assert np.array_equal(enc.encode(s), again.encode(s))
    with pytest.raises(ValueError):
        FeatureEncoder.fit([])
    with pytest.raises(ValueError):
        FeatureEncoder.fit([{"x": 1.0}, {"x": "one"}])


def test_operator_features_skip_execution_params():
    inst = Op(3, "Filter", {"selectivity": 0.5, "predicate": "like", "dop": 4,
                            "planner_estimate": 99, "input_chunks": 3}, 2048.0, 4)
    f = operator_features(inst, UTIL)
    assert f["p_selectivity"] == 0.5 and f["p_predicate"] == "like"
    assert "p_dop" not in f and "p_planner_estimate" not in f and "p_input_chunks" not in f
    assert f["log_rows"] == pytest.approx(math.log1p(2048))
    assert f["log_chunks"] == pytest.approx(math.log1p(3))
    assert f["simd"] == "yes" and f["util_io"] == 0.6
    enc = FeatureEncoder.fit([f, operator_features(inst.with_rows(10.0), UTIL)])
    assert encode_operator(inst, UTIL, enc).shape == (enc.width,)


def test_target_scaler_inverts_and_clamps():
    y = np.abs(np.random.default_rng(0).normal(size=(30, len(COST_FIELDS)))) * 1e-3
    sc = TargetScaler.fit(y)
    assert np.allclose(sc.inverse(sc.transform(y)), y, rtol=1e-10, atol=1e-15)
    assert np.allclose(sc.transform(y).mean(axis=0), 0.0, atol=1e-12)
    assert np.all(sc.inverse(np.full((1, len(COST_FIELDS)), -50.0)) >= 0)
    back = TargetScaler.from_dict(sc.to_dict())
    assert np.array_equal(back.transform(y), sc.transform(y))


# ------------------------------------------------------------------ OCP

def test_zero_output_predictor_returns_the_training_centre():
    ocp = untrained_ocp(np.random.default_rng(1))
    pred = ocp.predictor("Scan")
    zero_output_layer(pred)
    inst = Op(0, "Scan", {}, 5000.0, 3)
    got = ocp_predict(inst, UTIL, ocp).to_array()
    # z = 0 maps back to the per-column mean of log1p(y / unit)
    centre = np.expm1(pred.scaler.mean) * pred.scaler.units
    centre[5] = min(centre[5], centre[4])
    centre[6] = min(centre[6], centre[7])
    assert np.allclose(got, centre, rtol=1e-12)


def test_predictions_are_nonnegative_and_consistent(small_ocp):
    for t in small_ocp.predictors:
        c = ocp_predict(Op(0, t, {}, 1024.0, 2), UTIL, small_ocp)
        assert c.violations() == []


def test_unknown_operator_type(small_ocp):
    with pytest.raises(UnknownOperatorType):
        ocp_predict(Op(0, "Limit", {}, 10.0, 1), UTIL, small_ocp)
    with pytest.raises(KeyError):
        small_ocp.predictor("Teleport")


def test_batched_and_single_predictions_agree(small_ocp):
    calls = [(Op(i, t, {}, 100.0 * (i + 1), 2), UTIL)
             for i, t in enumerate(["Scan", "Filter", "Scan", "Sink"])]
    batched = small_ocp.predict_many(calls)
    single = np.array([small_ocp.predict_array(inst, u) for inst, u in calls])
    assert np.allclose(batched, single, rtol=1e-12)


# ------------------------------------------------------------------ GAT

def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def dense_gat(gat, cost_x, vertex_x, m_pipe, mask):
    """Straight numpy transcription of the calibrator's forward pass."""
    def lin(layer, x):
        return x @ layer.W.value + layer.b.value
    h = _leaky(lin(gat.cost_map, cost_x), 0.01) + _leaky(lin(gat.vertex_map, vertex_x), 0.01)
    e = 0.5 * (m_pipe + m_pipe.T)
    for layer in gat.layers:
        msgs = []
        for W, a_src, a_dst in layer.heads:
            z = h @ W.value
            n = len(z)
            attn = np.zeros((n, n))
            for i in range(n):
                logits = np.array([_leaky(z[i] @ a_src.value[:, 0] + z[j] @ a_dst.value[:, 0], 0.2)
                                   + e[i, j] if mask[i, j] else -np.inf for j in range(n)])
                w = np.exp(logits - logits.max())
                attn[i] = w / w.sum()
            msgs.append(attn @ z)
        h = h + _leaky(sum(msgs) / len(msgs), 0.01)
    return h


@pytest.mark.parametrize("heads", [1, 2])
def test_gat_matches_dense_reference_on_a_chain(heads):
    rng = np.random.default_rng(heads)
    gat = GatCalibrator(4, 3, 5, rng, heads=heads)
    m_f = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=float)
    m_pipe = m_f + 0.3 * rng.random((3, 3))
    m_pipe[0, 2] = m_pipe[2, 0] = 0.0
    mask = neighborhood_mask(m_pipe)
    assert not mask[0, 2]
    cost_x, vertex_x = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))
    got = gat(cost_x, vertex_x, m_pipe, mask).value
    assert np.allclose(got, dense_gat(gat, cost_x, vertex_x, m_pipe, mask), rtol=1e-12, atol=1e-12)


def test_gat_singleton_attends_to_itself():
    rng = np.random.default_rng(0)
    gat = GatCalibrator(2, 2, 4, rng)
    cost_x, vertex_x = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    maps = gat.attention_maps(cost_x, vertex_x, np.zeros((1, 1)))
    assert all(m.shape == (1, 1) and m[0, 0] == 1.0 for m in maps)
    h = gat.embed(cost_x, vertex_x).value
    W = gat.layers[0].heads[0][0].value
    first = h + _leaky(h @ W, 0.01)
    W2 = gat.layers[1].heads[0][0].value
    assert np.allclose(gat(cost_x, vertex_x, np.zeros((1, 1))).value,
                       first + _leaky(first @ W2, 0.01), rtol=1e-12)


def test_gat_attention_rows_are_convex(small_corpus, small_bundle):
    g = build_graph(small_corpus.probe[0], small_bundle)
    m_pipe = (small_bundle.fusion.values()[0] * g.m_f
              + sum(w * a for w, a in zip(small_bundle.fusion.values()[1:], g.adjusted)))
    for attn in small_bundle.gat.attention_maps(g.cost_x, g.vertex_x, m_pipe, g.mask):
        assert np.all(attn >= 0)
        assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(attn[~g.mask] == 0.0)


def test_gat_shape_errors():
    gat = GatCalibrator(2, 2, 4, np.random.default_rng(0))
    with pytest.raises(T.ShapeError):
        gat(np.ones((2, 2)), np.ones((3, 2)), np.zeros((2, 2)))
    assert NEG_INF < -1e20


# ------------------------------------------------------------------ TCN

def test_tcn_coefficient_corners_and_worked_value():
    for d in (2, 3, 5):
        for n in (1, 2, 4):
            for p in range(1, n + 1):
                assert tcn_coefficients(d, d, p, n) == (1.0, 0.0, 0.0)
    assert tcn_coefficients(1, 2, 1, 2) == (0.0, 1.0, 0.0)
    eta_t, eta_l, eta_r = tcn_coefficients(2, 3, 2, 3)
    assert abs(eta_t - 0.5) <= 1e-12 and abs(eta_l - 0.375) <= 1e-12 and abs(eta_r - 0.25) <= 1e-12
    assert tcn_coefficients(1, 2, 1, 1) == (0.0, 1.0, 0.0)
    assert tcn_coefficients(1, 1, 1, 3) == (1.0, 0.0, 0.0)


@pytest.mark.parametrize("args", [(0, 2, 1, 1), (3, 2, 1, 1), (1, 2, 0, 2), (1, 2, 3, 2)])
def test_tcn_coefficient_ranges(args):
    with pytest.raises(ValueError):
        tcn_coefficients(*args)


def test_single_child_uses_left_weight_only():
    c_l, c_r = coefficient_matrices([[1], []], 2)
    assert c_l[0, 1] == 1.0 and c_r[0, 1] == 0.0


def recursive_tcn(tcn, children, x, root=0):
    """Per-node evaluation of y_i = x_i + tanh(sum over window of eta-weighted W x + b)."""
    for layer in tcn.layers:
        Wt, Wl, Wr, b = (p.value for p in layer.parameters())
        y = np.zeros_like(x)
        for i, kids in enumerate(children):
            acc = x[i] @ Wt
            n = len(kids)
            for p, j in enumerate(kids, start=1):
                eta_r = 0.0 if n == 1 else (p - 1) / (n - 1)
                acc = acc + (1 - eta_r) * (x[j] @ Wl) + eta_r * (x[j] @ Wr)
            y[i] = x[i] + np.tanh(acc + b[0])
        x = y
    h = x[root]
    for k, lin in enumerate(tcn.readout.layers):
        h = h @ lin.W.value + lin.b.value[0]
        if k < len(tcn.readout.layers) - 1:
            h = _leaky(h, 0.01)
    return h


def test_tcn_matches_recursive_reference():
    rng = np.random.default_rng(3)
    children = [[1, 2, 3], [4], [], [], []]
    tcn = TcnPredictor(4, rng)
    x = rng.normal(size=(5, 4))
    c_l, c_r = coefficient_matrices(children, 5)
    got = tcn(x, c_l, c_r, [0]).value[0]
    assert np.allclose(got, recursive_tcn(tcn, children, x), rtol=1e-12)


def test_tcn_zero_weights_reduce_to_biases():
    tcn = TcnPredictor(3, np.random.default_rng(0))
    for layer in tcn.layers:
        for p in (layer.W_t, layer.W_l, layer.W_r):
            p.value[:] = 0.0
    x = np.zeros((1, 3))
    out = tcn(x, np.zeros((1, 1)), np.zeros((1, 1)), [0]).value
    expected = sum(np.tanh(layer.b.value) for layer in tcn.layers)
    assert np.allclose(out, recursive_tcn(tcn, [[]], expected * 0 + x))
    h = expected[0]
    for k, lin in enumerate(tcn.readout.layers):
        h = h @ lin.W.value + lin.b.value[0]
        if k < len(tcn.readout.layers) - 1:
            h = _leaky(h, 0.01)
    assert np.allclose(out[0], h)
    with pytest.raises(ValueError):
        tcn(np.zeros((0, 3)), np.zeros((0, 0)), np.zeros((0, 0)), [])


# ------------------------------------------------------------------ full stack

def tiny_bundle(trace, seed, ablation=None):
    rng = np.random.default_rng(seed)
    vertex_enc, raw_enc = fit_encoders([trace])
    ablation = ablation or Ablation()
    return ModelBundle(vertex_enc, ocp=None if ablation.no_ocp else untrained_ocp(rng),
                       raw_encoder=raw_enc, config=ModelConfig(width=4), ablation=ablation,
                       seed=seed, label_stats=(-4.0, 1.5))


def full_stack_error(seed, ablation=None):
    rng = np.random.default_rng(seed)
    trace = random_tiny_trace(rng)
    bundle = tiny_bundle(trace, seed, ablation)
    g = build_graph(trace, bundle)
    assert g.n <= 6
    batch = collate([g])
    label = bundle.normalize_latency([trace.total_latency]).reshape(1, 1)
    # nudge fusion weights off their defaults so every group gets a generic point
    for p in bundle.fusion.parameters():
        p.value[:] = rng.normal()
    return max_gradient_error(lambda: T.mse(bundle.forward(batch), label),
                              bundle.qpp_parameters())


@pytest.mark.parametrize("seed", range(20))
def test_full_stack_gradient(seed):
    assert full_stack_error(seed) < 1e-3


@pytest.mark.parametrize("ablation", [Ablation(no_res_attn=True), Ablation(no_ocp=True)])
def test_ablation_gradients(ablation):
    assert full_stack_error(7, ablation) < 1e-3


def test_batching_matches_one_graph_at_a_time(small_corpus, small_bundle):
    graphs = [build_graph(t, small_bundle) for t in small_corpus.probe[:7]]
    together = small_bundle.predict_graphs(graphs, batch_size=64)
    apart = np.array([small_bundle.predict_graphs([g])[0] for g in graphs])
    assert np.allclose(together, apart, rtol=1e-10)


def test_predict_query_is_deterministic_and_chunk_order_free(small_corpus, small_bundle):
    trace = small_corpus.probe[5]
    a = predict_query(trace, small_bundle)
    assert math.isfinite(a) and a > 0
    assert predict_query(trace, small_bundle) == a
    flipped = dataclasses.replace(trace, chunks=tuple(reversed(trace.chunks)))
    assert predict_query(flipped, small_bundle) == a
    assert tree_from_trace(flipped).N == tree_from_trace(trace).N


def test_bundle_requires_matching_inputs():
    trace = random_tiny_trace(np.random.default_rng(0))
    enc, raw = fit_encoders([trace])
    with pytest.raises(ValueError):
        ModelBundle(enc)
    with pytest.raises(ValueError):
        ModelBundle(enc, ablation=Ablation(no_ocp=True))


# ------------------------------------------------------------------ checkpoints

def test_bundle_round_trip(tmp_path, small_corpus, small_bundle):
    path = tmp_path / "b.ckpt"
    save_bundle(small_bundle, path)
    back = load_bundle(path)
    for t in small_corpus.probe[:5]:
        assert predict_query(t, back) == predict_query(t, small_bundle)
    assert back.meta == small_bundle.meta
    assert dumps_bundle(back) == path.read_bytes()


def test_no_ocp_bundle_round_trip():
    trace = random_tiny_trace(np.random.default_rng(4))
    b = tiny_bundle(trace, 4, Ablation(no_ocp=True))
    back = loads_bundle(dumps_bundle(b))
    assert back.ablation.no_ocp and back.ocp is None
    assert predict_query(trace, back) == predict_query(trace, b)


def test_ocp_round_trip(tmp_path, small_ocp):
    save_ocp(small_ocp, tmp_path / "o.ckpt", meta={"epochs": 4})
    back = load_ocp(tmp_path / "o.ckpt")
    back = back[0] if isinstance(back, tuple) else back
    inst = Op(0, "Scan", {}, 4096.0, 3)
    assert np.array_equal(back.predict_array(inst, UTIL), small_ocp.predict_array(inst, UTIL))


def test_corrupted_checkpoints_are_rejected(tmp_path, small_bundle):
    data = bytearray(dumps_bundle(small_bundle))
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointError):
        loads_bundle(bytes(flipped))
    with pytest.raises(CheckpointError):
        loads_bundle(bytes(data[:-10]))
    with pytest.raises(CheckpointVersionError):
        loads_bundle(b"NOTACKPT" + bytes(data[8:]))
    bumped = bytearray(data)
    bumped[8] = 99
    with pytest.raises(CheckpointVersionError):
        loads_bundle(bytes(bumped))
    with pytest.raises(CheckpointError):
        loads_bundle(b"")


def test_loading_the_wrong_kind_fails(tmp_path, small_ocp, small_bundle):
    save_ocp(small_ocp, tmp_path / "o.ckpt")
    with pytest.raises(CheckpointError):
        load_bundle(tmp_path / "o.ckpt")
    save_bundle(small_bundle, tmp_path / "b.ckpt")
    with pytest.raises(CheckpointError):
        load_ocp(tmp_path / "b.ckpt")
