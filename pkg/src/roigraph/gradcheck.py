"""Central finite-difference checks of every analytic backward path.

Each entry is perturbed by ``eps = 1e-4``. Relative error is
``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` where the floor
is ``1e-3`` times the largest gradient magnitude in the same tensor.

Piecewise-linear ops (relu, max, |x|) make the loss non-differentiable on a
measure-zero set; an entry whose ``eps`` stencil straddles such a kink shows
up as a failure at ``eps`` that disappears at ``eps / 100``. Those entries
are counted as ``skipped``. An instance with more than 10% skipped entries
sits next to a kink and is redrawn (``attempts`` records how many draws were
needed); an entry that also fails at ``eps / 100`` is always a failure.
"""

from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .geom import Box3D, to_canonical
from .graph import (GraphParams, edge_conv_backward, edge_conv_forward, knn_graph, pointnet_backward,
                    pointnet_forward)
from .grouping import ProposalGroup
from .head import HeadParams, aggregate_backward, aggregate_forward, heads_backward, heads_forward, mlaf_backward, mlaf_forward
from .nn import make_rng, mlp_backward, mlp_forward, seeded_init
from .objectives import loss_terms, TargetSet
from .pipeline import RoiGraphModel, backward_proposal, forward_proposal
from .sampling import fps_sample

EPS = 1e-4
TOL = 1e-4
MAX_SKIP_FRACTION = 0.1


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    checked: int
    skipped: int
    attempts: int = 1

    @property
    def passed(self):
        return self.max_rel_error <= TOL and self.skipped <= MAX_SKIP_FRACTION * max(1, self.checked + self.skipped)


def _entries(shape, rng, limit):
    total = int(np.prod(shape))
    flat = np.arange(total) if total <= limit else np.sort(rng.choice(total, limit, replace=False))
    return [np.unravel_index(i, shape) for i in flat]


def check_tensors(loss_fn, tensors, analytic, rng, limit=24):
    """``tensors``: arrays mutated in place; ``analytic``: matching gradients."""
    worst, checked, skipped = 0.0, 0, 0
    for arr, grad in zip(tensors, analytic):
        floor = max(1e-3 * float(np.max(np.abs(grad))) if grad.size else 0.0, 1e-10)
        for idx in _entries(arr.shape, rng, limit):
            orig = arr[idx]

            def numeric(eps):
                arr[idx] = orig + eps
                fp = loss_fn()
                arr[idx] = orig - eps
                fm = loss_fn()
                arr[idx] = orig
                return (fp - fm) / (2 * eps)

            a = float(grad[idx])
            n = numeric(EPS)
            rel = abs(a - n) / max(abs(a), abs(n), floor)
            if rel > TOL:
                n2 = numeric(EPS / 100)
                rel2 = abs(a - n2) / max(abs(a), abs(n2), floor)
                if rel2 <= TOL:
                    skipped += 1
                    continue
            worst = max(worst, rel)
            checked += 1
    return worst, checked, skipped


def _param_arrays(mlps, grads):
    tensors, analytic = [], []
    for name, p in mlps.items():
        for layer, (gw, gb) in zip(p.layers, grads[name]):
            tensors += [layer.weight, layer.bias]
            analytic += [gw, gb]
    return tensors, analytic


def check_mlp(seed):
    rng = make_rng(seed)
    p = seeded_init([5, 7, 4], seed, activations=["relu", "sigmoid"])
    x = rng.normal(size=(6, 5))
    proj = rng.normal(size=(6, 4))

    def loss():
        return float(np.sum(mlp_forward(p, x)[0] * proj))

    _, cache = mlp_forward(p, x)
    gx, grads = mlp_backward(p, cache, proj)
    t, a = _param_arrays({"m": p}, {"m": grads})
    return CheckResult("mlp", seed, *check_tensors(loss, t + [x], a + [gx], rng))


def check_pointnet(seed):
    rng = make_rng(seed)
    p = seeded_init([4, 8, 8], seed, final_activation="relu")
    pts = np.hstack([rng.uniform(-1, 1, size=(60, 3)), rng.uniform(0, 1, size=(60, 1))])
    nodes = pts[:8]
    proj = rng.normal(size=(8, 8))

    def loss():
        return float(np.sum(pointnet_forward(nodes, pts, 0.7, p)[0] * proj))

    _, cache = pointnet_forward(nodes, pts, 0.7, p)
    grads = pointnet_backward(cache, proj)
    t, a = _param_arrays({"pn": p}, {"pn": grads})
    return CheckResult("pointnet", seed, *check_tensors(loss, t, a, rng))


def check_edgeconv(seed):
    rng = make_rng(seed)
    s = rng.normal(size=(10, 6))
    nbr = knn_graph(rng.normal(size=(10, 3)), 3).neighbors
    layers = [seeded_init([12, 5], seed, activations=["relu"]), seeded_init([10, 4], seed + 1, activations=["relu"])]
    proj = rng.normal(size=(10, 4))

    def loss():
        h1, _ = edge_conv_forward(s, nbr, layers[0])
        h2, _ = edge_conv_forward(h1, nbr, layers[1])
        return float(np.sum(h2 * proj))

    h1, c1 = edge_conv_forward(s, nbr, layers[0])
    _, c2 = edge_conv_forward(h1, nbr, layers[1])
    g1, grads2 = edge_conv_backward(c2, proj)
    gs, grads1 = edge_conv_backward(c1, g1)
    t, a = _param_arrays({"e0": layers[0], "e1": layers[1]}, {"e0": grads1, "e1": grads2})
    return CheckResult("edgeconv", seed, *check_tensors(loss, t + [s], a + [gs], rng))


def _small_head(seed, width):
    return HeadParams.init(seed, width, att_hidden=4, embed_dim=12, head_hidden=8)


def check_mlaf(seed):
    rng = make_rng(seed)
    states = [rng.normal(size=(7, 3)), rng.normal(size=(7, 3)), rng.normal(size=(7, 4))]
    hp = _small_head(seed, 10)
    proj = rng.normal(size=(7, 12))

    def loss():
        return float(np.sum(mlaf_forward(states, hp)[0] * proj))

    _, cache = mlaf_forward(states, hp)
    gstates, grads = mlaf_backward(cache, proj)
    t, a = _param_arrays({k: getattr(hp, k) for k in grads}, grads)
    return CheckResult("mlaf", seed, *check_tensors(loss, t + states, a + list(gstates), rng))


def check_aggregate(seed, method):
    rng = make_rng(seed)
    f = rng.normal(size=(9, 5))
    agg = seeded_init([5, 1], seed, activations=["none"])
    proj = rng.normal(size=5)

    def loss():
        return float(np.dot(aggregate_forward(f, method, agg)[0], proj))

    _, cache = aggregate_forward(f, method, agg)
    gf, g_agg = aggregate_backward(cache, proj)
    t, a = [f], [gf]
    if g_agg is not None:
        pt, pa = _param_arrays({"agg": agg}, {"agg": g_agg})
        t, a = t + pt, a + pa
    return CheckResult(f"aggregate_{method}", seed, *check_tensors(loss, t, a, rng))


def _targets(rng, b, positive=None):
    pos = rng.random(b) < 0.7 if positive is None else positive
    tg = rng.normal(scale=0.5, size=(b, 7)) * pos[:, None]
    return TargetSet(rng.uniform(0, 1, b), tg, pos, np.where(pos, 0, -1), np.zeros(b))


def check_heads(seed):
    rng = make_rng(seed)
    hp = _small_head(seed, 10)
    roi = rng.normal(size=12)
    ts = _targets(rng, 1, np.array([True]))

    def loss():
        ref, _ = heads_forward(roi, hp)
        return loss_terms(np.array([ref.score_logit]), ref.residual[None], ts)[0]

    ref, cache = heads_forward(roi, hp)
    _, _, _, gl, gr = loss_terms(np.array([ref.score_logit]), ref.residual[None], ts)
    groi, grads = heads_backward(hp, cache, gl[0], gr[0])
    t, a = _param_arrays({"cls": hp.cls, "reg": hp.reg}, grads)
    return CheckResult("heads", seed, *check_tensors(loss, t + [roi], a + [groi], rng))


def check_loss(seed):
    rng = make_rng(seed)
    b = 6
    logits = rng.normal(scale=2, size=b)
    res = rng.normal(size=(b, 7))
    ts = _targets(rng, b)

    def loss():
        return loss_terms(logits, res, ts)[0]

    _, _, _, gl, gr = loss_terms(logits, res, ts)
    return CheckResult("bce_l1", seed, *check_tensors(loss, [logits, res], [gl, gr], rng, limit=64))


def small_config(**kw):
    base = dict(pointnet_channels=[6, 6], iter_dims=[5, 5, 6], att_hidden=4, embed_dim=12, head_hidden=8, T_s=14,
                k=4, r=0.5, dropout=0.0)
    base.update(kw)
    return PipelineConfig(**base)


def synthetic_proposal(rng, n=80):
    box = Box3D(*rng.uniform(-10, 10, 2), 0.0, 3.0, 1.6, 1.5, float(rng.uniform(-np.pi, np.pi)))
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * box.size
    canon = np.hstack([local, rng.uniform(0, 1, size=(n, 1))])
    group = ProposalGroup(0, np.arange(n), canon)
    return box, group


def check_full_chain(seed, aggregation="max"):
    rng = make_rng(seed)
    cfg = small_config(seed=seed, aggregation=aggregation)
    model = RoiGraphModel.init(cfg)
    box, group = synthetic_proposal(rng)
    sampled = fps_sample(group, cfg.T_s)
    ts = _targets(rng, 1, np.array([True]))

    def loss():
        ref, _ = forward_proposal(model, cfg, group, box, sampled)
        return loss_terms(np.array([ref.score_logit]), ref.residual[None], ts)[0]

    ref, cache = forward_proposal(model, cfg, group, box, sampled)
    _, _, _, gl, gr = loss_terms(np.array([ref.score_logit]), ref.residual[None], ts)
    grads = backward_proposal(model, cache, gl[0], gr[0])
    mlps = model.mlps()
    if aggregation != "attention_sum":
        mlps.pop("agg")
    t, a = _param_arrays(mlps, grads)
    return CheckResult(f"full_chain_{aggregation}", seed, *check_tensors(loss, t, a, rng, limit=8))


SUITES = {
    "mlp": check_mlp,
    "pointnet": check_pointnet,
    "edgeconv": check_edgeconv,
    "mlaf": check_mlaf,
    "aggregate_max": lambda s: check_aggregate(s, "max"),
    "aggregate_mean": lambda s: check_aggregate(s, "mean"),
    "aggregate_attention_sum": lambda s: check_aggregate(s, "attention_sum"),
    "heads": check_heads,
    "bce_l1": check_loss,
    "full_chain_max": check_full_chain,
    "full_chain_attention_sum": lambda s: check_full_chain(s, "attention_sum"),
}


MAX_ATTEMPTS = 5


def run_suite(name, seed):
    """Run one suite, redrawing kink-adjacent instances."""
    fn = SUITES[name]
    for attempt in range(MAX_ATTEMPTS):
        res = fn(seed + 1000 * attempt)
        res.seed = seed
        res.attempts = attempt + 1
        if res.passed or res.max_rel_error > TOL:
            return res
    return res


def run_all(seeds=(0, 1, 2)):
    return [run_suite(name, seed) for name in SUITES for seed in seeds]
