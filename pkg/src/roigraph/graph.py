"""Local k-NN graphs over sampled nodes and their message passing.

Node state layout (columns of ``S^0``)::

    [0:3]   canonical xyz of the node
    [3]     reflectance
    [4:20]  PointNet feature of the raw points within ``r`` (16 by default)
    [20:26] diagonal corners (-l/2, -w/2, -h/2, l/2, w/2, h/2)
    [26:]   image features, when fusion is on

The max reductions pick the lowest node index on ties (neighbor rows are
sorted by node index before reducing), which fixes both the forward bits and
the subgradient routing.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._accel import njit
from .geom import diagonal_corners
from .nn import mlp_backward, mlp_forward, seeded_init


class DegenerateGraph(ValueError):
    pass


@dataclass
class LocalGraph:
    neighbors: np.ndarray  # (n, k), nearest first
    positions: np.ndarray  # (n, 4) canonical

    @property
    def k(self):
        return self.neighbors.shape[1]

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class NodeStates:
    states: list
    graph: LocalGraph = field(repr=False, default=None)

    @property
    def initial(self):
        return self.states[0]

    @property
    def iterations(self):
        return self.states[1:]


# ---------------------------------------------------------------------------
# neighbor search kernels


@njit
def _nb_knn(xyz, k):
    n = xyz.shape[0]
    out = np.empty((n, k), np.int64)
    d = np.empty(n)
    taken = np.zeros(n, np.bool_)
    for j in range(n):
        for i in range(n):
            dx = xyz[i, 0] - xyz[j, 0]
            dy = xyz[i, 1] - xyz[j, 1]
            dz = xyz[i, 2] - xyz[j, 2]
            d[i] = dx * dx + dy * dy + dz * dz
            taken[i] = False
        taken[j] = True
        for t in range(k):
            best = -1
            bestd = np.inf
            for i in range(n):
                if taken[i]:
                    continue
                if best < 0 or d[i] < bestd:
                    best = i
                    bestd = d[i]
            out[j, t] = best
            taken[best] = True
    return out


def _np_knn(xyz, k):
    diff = xyz[None, :, :] - xyz[:, None, :]
    d = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def knn_graph(nodes, k=8):
    """Exact k-NN over canonical xyz, self excluded, ties to the lower index."""
    pos = np.asarray(nodes, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[0] < 2:
        raise DegenerateGraph("a local graph needs at least 2 nodes")
    if pos.shape[1] == 3:
        pos = np.hstack([pos, np.zeros((pos.shape[0], 1))])
    k = min(int(k), pos.shape[0] - 1)
    if k < 1:
        raise ValueError("k must be >= 1")
    xyz = np.ascontiguousarray(pos[:, :3])
    nbr = _nb_knn(xyz, k) if _accel.backend() == "numba" else _np_knn(xyz, k)
    return LocalGraph(nbr, pos)


@njit
def _nb_ball(nodes, pts, r2):
    n = nodes.shape[0]
    m = pts.shape[0]
    offsets = np.zeros(n + 1, np.int64)
    buf = np.empty(max(16, 4 * n), np.int64)
    cnt = 0
    for j in range(n):
        for i in range(m):
            dx = pts[i, 0] - nodes[j, 0]
            dy = pts[i, 1] - nodes[j, 1]
            dz = pts[i, 2] - nodes[j, 2]
            if dx * dx + dy * dy + dz * dz <= r2:
                if cnt == buf.shape[0]:
                    nb = np.empty(2 * cnt, np.int64)
                    nb[:cnt] = buf
                    buf = nb
                buf[cnt] = i
                cnt += 1
        offsets[j + 1] = cnt
    return offsets, buf[:cnt].copy()


def _np_ball(nodes, pts, r2, chunk=64):
    parts = []
    for s in range(0, nodes.shape[0], chunk):
        nd = nodes[s : s + chunk]
        diff = pts[None, :, :] - nd[:, None, :]
        d = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        for row in d <= r2:
            parts.append(np.nonzero(row)[0].astype(np.int64))
    offsets = np.zeros(nodes.shape[0] + 1, np.int64)
    offsets[1:] = np.cumsum([len(p) for p in parts])
    return offsets, (np.concatenate(parts) if parts else np.zeros(0, np.int64))


def ball_query(nodes, points, radius):
    """CSR ``(offsets, positions)`` of points within ``radius`` (closed) of each node."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    nd = np.ascontiguousarray(np.asarray(nodes, dtype=np.float64)[:, :3])
    pt = np.ascontiguousarray(np.asarray(points, dtype=np.float64)[:, :3])
    r2 = float(radius) * float(radius)
    if _accel.backend() == "numba":
        return _nb_ball(nd, pt, r2)
    return _np_ball(nd, pt, r2)


# ---------------------------------------------------------------------------
# PointNet neighbor encoding


def _segment_max(h, offsets):
    n = len(offsets) - 1
    out = np.zeros((n, h.shape[1]))
    counts = np.diff(offsets)
    nz = counts > 0
    if h.shape[0]:
        out[nz] = np.maximum.reduceat(h, offsets[:-1][nz], axis=0)
    return out


def _segment_argmax(h, seg_max, offsets, owner):
    """First row attaining the max per (segment, channel); -1 for empty."""
    n = len(offsets) - 1
    rows = np.arange(h.shape[0])[:, None]
    hit = np.where(h == seg_max[owner], rows, h.shape[0])
    out = np.full((n, h.shape[1]), -1, np.int64)
    counts = np.diff(offsets)
    nz = counts > 0
    if h.shape[0]:
        out[nz] = np.minimum.reduceat(hit, offsets[:-1][nz], axis=0)
    return out


def pointnet_forward(nodes, points, radius, params):
    """Shared-MLP embedding of ``[dx, dy, dz, reflectance]`` of every raw point
    within ``radius`` of each node, max-pooled per node (zeros if none)."""
    nodes = np.asarray(nodes, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    offsets, pos = ball_query(nodes, points, radius)
    owner = np.repeat(np.arange(nodes.shape[0]), np.diff(offsets))
    x = np.empty((len(pos), 4))
    x[:, :3] = points[pos, :3] - nodes[owner, :3]
    x[:, 3] = points[pos, 3]
    if len(pos):
        h, mcache = mlp_forward(params, x)
    else:
        h, mcache = np.zeros((0, params.out_dim)), None
    f = _segment_max(h, offsets)
    return f, (params, x, h, mcache, offsets, owner, f)


def pointnet_encode(nodes, points, radius, params):
    return pointnet_forward(nodes, points, radius, params)[0]


def pointnet_backward(cache, grad_f):
    params, x, h, mcache, offsets, owner, f = cache
    if mcache is None:
        return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers]
    arg = _segment_argmax(h, f, offsets, owner)
    gh = np.zeros_like(h)
    j, c = np.nonzero(arg >= 0)
    np.add.at(gh, (arg[j, c], c), grad_f[j, c])
    _, grads = mlp_backward(params, mcache, gh)
    return grads


# ---------------------------------------------------------------------------
# node states and EdgeConv


def init_node_state(nodes, features, box, image=None):
    """``[xyz, r, f, u, w]`` per node, image block appended last."""
    nodes = np.atleast_2d(np.asarray(nodes, dtype=np.float64))
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    corners = np.broadcast_to(diagonal_corners(box), (nodes.shape[0], 6))
    blocks = [nodes[:, :4], features, corners]
    if image is not None:
        blocks.append(np.atleast_2d(np.asarray(image, dtype=np.float64)))
    return np.hstack(blocks)


def edge_conv_forward(states, neighbors, params):
    """``s_j' = max_k phi([s_k - s_j, s_j])`` over the neighbors of j."""
    s = np.asarray(states, dtype=np.float64)
    n, c = s.shape
    if params.in_dim != 2 * c:
        raise ValueError(f"edge MLP expects {params.in_dim} inputs, states have {c} columns")
    nbr = np.sort(np.asarray(neighbors, dtype=np.int64), axis=1)
    k = nbr.shape[1]
    x = np.empty((n, k, 2 * c))
    x[..., :c] = s[nbr] - s[:, None, :]
    x[..., c:] = s[:, None, :]
    h, mcache = mlp_forward(params, x.reshape(n * k, 2 * c))
    h = h.reshape(n, k, -1)
    out = h.max(axis=1)
    arg = h.argmax(axis=1)
    return out, (params, nbr, mcache, arg, n, k, c, h.shape[2])


def edge_conv_step(states, graph, params):
    neighbors = graph.neighbors if isinstance(graph, LocalGraph) else graph
    return edge_conv_forward(states, neighbors, params)[0]


def edge_conv_backward(cache, grad_out):
    """Returns ``(grad_states, param_grads)``."""
    params, nbr, mcache, arg, n, k, c, dout = cache
    gh = np.zeros((n, k, dout))
    np.put_along_axis(gh, arg[:, None, :], grad_out[:, None, :], axis=1)
    gx, grads = mlp_backward(params, mcache, gh.reshape(n * k, dout))
    gx = gx.reshape(n, k, 2 * c)
    gd = gx[..., :c]
    gs = gx[..., c:].sum(axis=1) - gd.sum(axis=1)
    np.add.at(gs, nbr, gd)
    return gs, grads


# ---------------------------------------------------------------------------


@dataclass
class GraphParams:
    pointnet: object
    edges: list

    @classmethod
    def init(cls, seed=0, pointnet_channels=(16, 16), iter_dims=(32, 32, 64), image_dim=0):
        pn = seeded_init([4, *pointnet_channels], seed, final_activation="relu")
        width = 4 + pointnet_channels[-1] + 6 + image_dim
        edges = []
        for t, d in enumerate(iter_dims):
            edges.append(seeded_init([2 * width, d], seed + 1 + t, activations=["relu"]))
            width = d
        return cls(pn, edges)

    def mlps(self):
        out = {"pointnet": self.pointnet}
        out.update({f"edge{t}": e for t, e in enumerate(self.edges)})
        return out


def node_positions(group, sampled):
    """Canonical points of the sampled scene indices (duplicates kept)."""
    pos = np.searchsorted(group.indices, sampled.indices)
    if np.any(pos >= len(group.indices)) or not np.array_equal(group.indices[np.minimum(pos, len(group.indices) - 1)], sampled.indices):
        raise ValueError("sampled indices are not members of the group")
    return group.canonical[pos]


def run_graph_forward(points, nodes, box, params, k=8, radius=0.4, image=None):
    """PointNet encode, build ``S^0``, then one EdgeConv step per edge MLP."""
    f, pn_cache = pointnet_forward(nodes, points, radius, params.pointnet)
    s0 = init_node_state(nodes, f, box, image)
    graph = knn_graph(nodes, k)
    states = [s0]
    caches = []
    for layer in params.edges:
        s, c = edge_conv_forward(states[-1], graph.neighbors, layer)
        states.append(s)
        caches.append(c)
    return NodeStates(states, graph), (pn_cache, caches, f.shape[1])


def run_graph(group, sampled, box, params, k=8, radius=0.4, image=None):
    nodes = node_positions(group, sampled)
    return run_graph_forward(group.canonical, nodes, box, params, k, radius, image)[0]


def run_graph_backward(cache, grad_states):
    """``grad_states[t]`` is dL/dS^t for t = 1..T (index 0 unused / may be None).
    Returns a dict of param grads keyed like :meth:`GraphParams.mlps`."""
    pn_cache, caches, fdim = cache
    grads = {}
    g = None
    for t in range(len(caches), 0, -1):
        gt = grad_states[t]
        g = gt if g is None else (g + gt if gt is not None else g)
        g, grads[f"edge{t - 1}"] = edge_conv_backward(caches[t - 1], g)
    g0 = grad_states[0] if grad_states and grad_states[0] is not None else None
    if g is None:
        g = g0
    elif g0 is not None:
        g = g + g0
    if g is None:
        gf = np.zeros((pn_cache[4].shape[0] - 1, fdim))
    else:
        gf = g[:, 4 : 4 + fdim]
    grads["pointnet"] = pointnet_backward(pn_cache, gf)
    return grads
