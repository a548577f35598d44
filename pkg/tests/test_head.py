import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roigraph import gradcheck
from roigraph.geom import Box3D
from roigraph.head import (HeadParams, InvalidResidual, aggregate, decode_box, head_forward, mlaf, refine_heads)
from roigraph.nn import Layer, MlpParams, dumps_weights, loads_weights, make_rng
from roigraph.objectives import regression_targets

finite = st.floats(-40, 40)
sizes = st.floats(0.3, 6.0)
boxes = st.builds(Box3D, finite, finite, st.floats(-2, 2), sizes, sizes, sizes, st.floats(-math.pi, math.pi))


def zero_mlp(dims, acts):
    return MlpParams([Layer(np.zeros((o, i)), np.zeros(o), a) for i, o, a in zip(dims, dims[1:], acts)])


def small_params(seed=0):
    return HeadParams.init(seed, in_dim=10, att_hidden=4, embed_dim=12, head_hidden=8)


def relu(x):
    return np.maximum(x, 0)


def test_mlaf_zero_attention():
    hp = small_params()
    hp.att = zero_mlp([10, 4, 10], ["relu", "sigmoid"])
    states = [make_rng(0).normal(size=(5, 4)), make_rng(1).normal(size=(5, 6))]
    c = np.hstack(states)
    e, s = hp.embed.layers[0], hp.shortcut.layers[0]
    want = relu((0.5 * c) @ e.weight.T + e.bias) + c @ s.weight.T + s.bias
    np.testing.assert_allclose(mlaf(states, hp), want, rtol=0, atol=1e-12)


def test_mlaf_zero_states():
    hp = small_params()
    out = mlaf([np.zeros((3, 4)), np.zeros((3, 6))], hp)
    want = relu(hp.embed.layers[0].bias) + hp.shortcut.layers[0].bias
    np.testing.assert_allclose(out, np.broadcast_to(want, (3, 12)), rtol=0, atol=1e-15)


def test_mlaf_hand_dataflow():
    hp = small_params(3)
    rng = make_rng(4)
    states = [rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.normal(size=(6, 4))]
    out = mlaf(states, hp)
    for j in range(6):
        c = np.concatenate([s[j] for s in states])
        a1, a2 = hp.att.layers
        att = 1 / (1 + np.exp(-(a2.weight @ relu(a1.weight @ c + a1.bias) + a2.bias)))
        e, s = hp.embed.layers[0], hp.shortcut.layers[0]
        want = relu(e.weight @ (c * att) + e.bias) + s.weight @ c + s.bias
        np.testing.assert_allclose(out[j], want, rtol=1e-12, atol=1e-12)


def test_mlaf_needs_iterations():
    with pytest.raises(ValueError):
        mlaf([], small_params())


def test_aggregate_single_node():
    f = make_rng(0).normal(size=(1, 5))
    for m in ("max", "mean"):
        np.testing.assert_array_equal(aggregate(f, m), f[0])


def test_aggregate_two_nodes_max():
    f = np.array([[1.0, -2.0, 3.0], [0.5, 4.0, 3.0]])
    assert aggregate(f, "max").tolist() == [1.0, 4.0, 3.0]


def test_attention_sum_zero_score_is_mean():
    f = make_rng(5).normal(size=(7, 4))
    np.testing.assert_allclose(aggregate(f, "attention_sum", zero_mlp([4, 1], ["none"])), f.mean(axis=0), atol=1e-15)


def test_aggregate_unknown_method():
    with pytest.raises(ValueError):
        aggregate(np.ones((2, 2)), "median")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_max_pool_permutation_invariant(seed, n):
    rng = make_rng(seed)
    f = rng.normal(size=(n, 6))
    perm = rng.permutation(n)
    assert np.array_equal(aggregate(f, "max"), aggregate(f[perm], "max"))


def test_zero_heads():
    hp = small_params()
    hp.cls = zero_mlp([12, 8, 1], ["relu", "none"])
    hp.reg = zero_mlp([12, 8, 7], ["relu", "none"])
    ref = refine_heads(make_rng(0).normal(size=12), hp)
    assert ref.score_logit == 0.0 and ref.score == 0.5 and not ref.residual.any()


def test_heads_match_direct_and_survive_round_trip():
    hp = small_params(7)
    roi = make_rng(1).normal(size=12)
    ref = refine_heads(roi, hp)
    c1, c2 = hp.cls.layers
    assert ref.score_logit == pytest.approx(float((c2.weight @ relu(c1.weight @ roi + c1.bias) + c2.bias)[0]), abs=1e-12)
    hp.cls = loads_weights(dumps_weights(hp.cls))
    hp.reg = loads_weights(dumps_weights(hp.reg))
    again = refine_heads(roi, hp)
    assert again.score_logit == ref.score_logit and np.array_equal(again.residual, ref.residual)


def test_dropout_only_in_training():
    hp = small_params()
    states = [make_rng(2).normal(size=(5, 4)), make_rng(3).normal(size=(5, 6))]
    a, _ = head_forward(states, hp, drop=0.5, training=False)
    b, _ = head_forward(states, hp, drop=0.5, training=False)
    assert a.score_logit == b.score_logit
    c, _ = head_forward(states, hp, drop=0.5, training=True, rng=make_rng(0))
    assert c.score_logit != a.score_logit


@pytest.mark.parametrize("suite", ["mlaf", "aggregate_max", "aggregate_mean", "aggregate_attention_sum", "heads"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradchecks(suite, seed):
    r = gradcheck.run_suite(suite, seed)
    assert r.passed, r


def test_decode_zero_residual():
    b = Box3D(1, 2, 3, 4, 2, 1.5, 0.3)
    assert decode_box(b, np.zeros(7)) == b


def test_decode_wraps_yaw():
    b = Box3D(0, 0, 0, 4, 2, 1.5, 3.0)
    out = decode_box(b, [0, 0, 0, 0, 0, 0, 0.5])
    assert -math.pi <= out.yaw < math.pi
    assert out.yaw == pytest.approx(3.5 - 2 * math.pi)


def test_decode_rejects_nonpositive_size():
    with pytest.raises(InvalidResidual):
        decode_box(Box3D(0, 0, 0, 1, 1, 1, 0), [0, 0, 0, -1, 0, 0, 0])


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_encode_decode_round_trip(p, g):
    out = decode_box(p, regression_targets(p, g))
    np.testing.assert_allclose(out.to_array()[:6], g.to_array()[:6], atol=1e-9)
    d = (out.yaw - g.yaw) % math.pi
    assert min(d, math.pi - d) < 1e-9
