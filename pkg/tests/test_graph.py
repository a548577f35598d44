import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roigraph import _accel, gradcheck
from roigraph.geom import Box3D, to_canonical
from roigraph.graph import (DegenerateGraph, GraphParams, ball_query, edge_conv_forward, edge_conv_step,
                            init_node_state, knn_graph, pointnet_encode, run_graph, run_graph_forward)
from roigraph.grouping import ProposalGroup
from roigraph.nn import Layer, MlpParams, make_rng, mlp_forward, seeded_init
from roigraph.sampling import SampleResult, fps_sample

UNIT = Box3D(0, 0, 0, 1, 1, 1, 0)


def knn_reference(xyz, k):
    out = []
    for j in range(len(xyz)):
        d = [(float(np.sum((xyz[i] - xyz[j]) ** 2)), i) for i in range(len(xyz)) if i != j]
        out.append([i for _, i in sorted(d)[:k]])
    return np.array(out)


def test_knn_collinear(backend):
    g = knn_graph(np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]]), 1)
    assert g.neighbors.tolist() == [[1], [0], [1]]


def test_knn_full_when_k_large(backend):
    g = knn_graph(make_rng(0).normal(size=(5, 3)), 10)
    assert [sorted(r) for r in g.neighbors.tolist()] == [[i for i in range(5) if i != j] for j in range(5)]


def test_knn_duplicate_ties(backend):
    xyz = np.array([[0.0, 0, 0], [1, 0, 0], [1, 0, 0], [1, 0, 0]])
    assert knn_graph(xyz, 2).neighbors[0].tolist() == [1, 2]
    assert knn_graph(xyz, 2).neighbors[3].tolist() == [1, 2]


def test_knn_degenerate():
    with pytest.raises(DegenerateGraph):
        knn_graph(np.zeros((1, 3)), 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 60), st.integers(1, 10), st.booleans())
def test_knn_matches_reference(seed, n, k, snap):
    xyz = make_rng(seed).uniform(-1, 1, (n, 3))
    if snap:
        xyz = np.round(xyz * 2) / 2  # many exact ties
    want = knn_reference(xyz, min(k, n - 1))
    for be in _accel.available_backends():
        with _accel.use_backend(be):
            assert np.array_equal(knn_graph(xyz, k).neighbors, want)


def test_ball_query_closed(backend):
    off, pos = ball_query(np.zeros((1, 3)), np.array([[0.4, 0, 0, 0], [0.41, 0, 0, 0], [0, 0.3, 0, 0]]), 0.4)
    assert pos.tolist() == [0, 2] and off.tolist() == [0, 2]


def test_pointnet_empty_ball(backend):
    f = pointnet_encode(np.zeros((1, 4)), np.array([[5.0, 0, 0, 0]]), 0.4, seeded_init([4, 16, 16], 0))
    assert f.shape == (1, 16) and not f.any()


def test_pointnet_zero_mlp(backend):
    p = MlpParams([Layer(np.zeros((16, 4)), np.zeros(16), "relu"), Layer(np.zeros((16, 16)), np.zeros(16), "relu")])
    assert not pointnet_encode(np.zeros((1, 4)), np.array([[0.1, 0, 0, 0.5]]), 0.4, p).any()


def test_pointnet_two_neighbors_max(backend):
    p = seeded_init([4, 8, 8], 2, final_activation="relu")
    node = np.array([[0.1, 0.0, 0.0, 0.9]])
    pts = np.array([[0.2, 0.1, 0.0, 0.3], [0.0, -0.1, 0.1, 0.7], [3.0, 0, 0, 0]])
    direct = np.maximum(*(mlp_forward(p, np.array([[*(pts[i, :3] - node[0, :3]), pts[i, 3]]]))[0][0] for i in (0, 1)))
    np.testing.assert_allclose(pointnet_encode(node, pts, 0.4, p)[0], direct, rtol=0, atol=1e-12)


def test_init_node_state_layout():
    s = init_node_state(np.zeros((3, 4)), np.ones((3, 16)), UNIT)
    assert s.shape == (3, 26)
    np.testing.assert_array_equal(s[0, -6:], [-0.5, -0.5, -0.5, 0.5, 0.5, 0.5])
    s = init_node_state(np.zeros((3, 4)), np.ones((3, 16)), UNIT, image=np.full((3, 32), 7.0))
    assert s.shape == (3, 58) and np.all(s[:, -32:] == 7.0)


def test_edge_conv_zero_phi():
    s = make_rng(0).normal(size=(6, 5))
    nbr = knn_graph(make_rng(1).normal(size=(6, 3)), 3)
    phi = MlpParams([Layer(np.zeros((4, 10)), np.zeros(4), "relu")])
    assert not edge_conv_step(s, nbr, phi).any()


def test_edge_conv_selector_is_identity():
    s = make_rng(0).normal(size=(6, 5))
    nbr = knn_graph(make_rng(1).normal(size=(6, 3)), 3)
    w = np.hstack([np.zeros((5, 5)), np.eye(5)])
    phi = MlpParams([Layer(w, np.zeros(5), "none")])
    np.testing.assert_array_equal(edge_conv_step(s, nbr, phi), s)


def test_edge_conv_two_nodes_by_hand():
    s = np.array([[1.0, 2.0], [3.0, -1.0]])
    w = np.array([[1.0, 0.0, 0.5, 0.0], [0.0, -1.0, 0.0, 1.0]])
    b = np.array([0.1, -0.2])
    phi = MlpParams([Layer(w, b, "relu")])
    out = edge_conv_forward(s, np.array([[1], [0]]), phi)[0]
    def msg(j, k):
        x = np.concatenate([s[k] - s[j], s[j]])
        return np.maximum(w @ x + b, 0)
    np.testing.assert_allclose(out, [msg(0, 1), msg(1, 0)])


def test_edge_conv_neighbor_order_invariant():
    rng = make_rng(3)
    s = rng.normal(size=(8, 4))
    nbr = knn_graph(rng.normal(size=(8, 3)), 4).neighbors
    phi = seeded_init([8, 6], 0, activations=["relu"])
    shuffled = np.array([rng.permutation(r) for r in nbr])
    assert np.array_equal(edge_conv_forward(s, nbr, phi)[0], edge_conv_forward(s, shuffled, phi)[0])


@pytest.mark.parametrize("suite", ["pointnet", "edgeconv"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradchecks(suite, seed):
    r = gradcheck.run_suite(suite, seed)
    assert r.passed, r


def _proposal(rng, n=120):
    box = Box3D(*rng.uniform(-20, 20, 2), 0.3, 4.0, 1.8, 1.6, float(rng.uniform(-3, 3)))
    local = rng.uniform(-0.5, 0.5, (n, 3)) * box.size
    canon = np.hstack([local, rng.uniform(0, 1, (n, 1))])
    return box, ProposalGroup(0, np.arange(n), canon)


def test_run_graph_zero_iterations(backend):
    rng = make_rng(0)
    box, group = _proposal(rng)
    params = GraphParams.init(0, (16, 16), ())
    states = run_graph(group, fps_sample(group, 32), box, params)
    assert len(states.states) == 1 and states.initial.shape == (32, 26)


def test_run_graph_deterministic(backend):
    rng = make_rng(1)
    box, group = _proposal(rng)
    params = GraphParams.init(1)
    sampled = fps_sample(group, 48)
    a = run_graph(group, sampled, box, params)
    b = run_graph(group, sampled, box, params)
    assert all(np.array_equal(x, y) for x, y in zip(a.states, b.states))
    assert [s.shape[1] for s in a.iterations] == [32, 32, 64]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_run_graph_permutation_equivariant(seed):
    rng = make_rng(seed)
    box, group = _proposal(rng)
    params = GraphParams.init(seed % 97)
    sampled = fps_sample(group, 40)
    perm = rng.permutation(40)
    a = run_graph(group, sampled, box, params)
    b = run_graph(group, SampleResult(sampled.indices[perm], 0), box, params)
    for x, y in zip(a.states, b.states):
        np.testing.assert_allclose(y, x[perm], rtol=0, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_initial_state_rigid_motion_invariant(seed):
    rng = make_rng(seed)
    box, group = _proposal(rng)
    params = GraphParams.init(3, iter_dims=())
    nodes = group.canonical[:30]
    s0 = run_graph_forward(group.canonical, nodes, box, params)[0].initial
    # move the scene rigidly, regroup in the moved box's frame
    yaw = float(rng.uniform(-np.pi, np.pi))
    t = rng.uniform(-30, 30, 2)
    c, s = np.cos(yaw), np.sin(yaw)
    from roigraph.geom import from_canonical
    world = from_canonical(group.canonical, box)
    moved = world.copy()
    moved[:, 0] = c * world[:, 0] - s * world[:, 1] + t[0]
    moved[:, 1] = s * world[:, 0] + c * world[:, 1] + t[1]
    cx = c * box.cx - s * box.cy + t[0]
    cy = s * box.cx + c * box.cy + t[1]
    moved_box = Box3D(cx, cy, box.cz, box.l, box.w, box.h, box.yaw + yaw)
    canon2 = to_canonical(moved, moved_box)
    s0b = run_graph_forward(canon2, canon2[:30], moved_box, params)[0].initial
    np.testing.assert_allclose(s0b, s0, rtol=0, atol=1e-6)
