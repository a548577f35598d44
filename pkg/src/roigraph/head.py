"""Graph aggregation and refinement heads.

MLAF dataflow per node::

    c      = [s^1, ..., s^T]                 (128 for [32, 32, 64])
    a      = sigmoid(att(c))                 att: 128 -> 64 (relu) -> 128
    fused  = embed(c * a) + shortcut(c)      embed: 128 -> 256 relu, shortcut linear

The fused node features are pooled into one RoI feature (max by default),
dropout is applied to it in training mode, and two MLPs produce the score
logit and the 7-value residual.
"""

from dataclasses import dataclass
import math

import numpy as np

from .geom import Box3D, wrap_angle
from .nn import dropout, mlp_backward, mlp_forward, seeded_init

AGGREGATIONS = ("max", "mean", "attention_sum")


class InvalidResidual(ValueError):
    pass


@dataclass
class Refinement:
    score_logit: float
    residual: np.ndarray

    @property
    def score(self):
        return 1.0 / (1.0 + math.exp(-self.score_logit)) if self.score_logit >= 0 else (
            math.exp(self.score_logit) / (1.0 + math.exp(self.score_logit)))


@dataclass
class HeadParams:
    att: object
    embed: object
    shortcut: object
    agg: object
    cls: object
    reg: object

    @classmethod
    def init(cls, seed=0, in_dim=128, att_hidden=64, embed_dim=256, head_hidden=256):
        return cls(
            att=seeded_init([in_dim, att_hidden, in_dim], seed, final_activation="sigmoid"),
            embed=seeded_init([in_dim, embed_dim], seed + 1, activations=["relu"]),
            shortcut=seeded_init([in_dim, embed_dim], seed + 2, activations=["none"]),
            agg=seeded_init([embed_dim, 1], seed + 3, activations=["none"]),
            cls=seeded_init([embed_dim, head_hidden, 1], seed + 4),
            reg=seeded_init([embed_dim, head_hidden, 7], seed + 5),
        )

    def mlps(self):
        return {k: getattr(self, k) for k in ("att", "embed", "shortcut", "agg", "cls", "reg")}


# ---------------------------------------------------------------------------
# MLAF


def mlaf_forward(iteration_states, params):
    c = np.hstack([np.asarray(s, dtype=np.float64) for s in iteration_states])
    a, att_cache = mlp_forward(params.att, c)
    z = c * a
    e, emb_cache = mlp_forward(params.embed, z)
    sc, sc_cache = mlp_forward(params.shortcut, c)
    widths = [s.shape[1] for s in iteration_states]
    return e + sc, (params, c, a, att_cache, emb_cache, sc_cache, widths)


def mlaf(states, params):
    """Fused per-node features from ``NodeStates`` (or a list S^1..S^T)."""
    its = states.iterations if hasattr(states, "iterations") else states
    if len(its) < 1:
        raise ValueError("MLAF needs at least one graph iteration")
    return mlaf_forward(its, params)[0]


def mlaf_backward(cache, grad_fused):
    params, c, a, att_cache, emb_cache, sc_cache, widths = cache
    gz, g_emb = mlp_backward(params.embed, emb_cache, grad_fused)
    gc_sc, g_sc = mlp_backward(params.shortcut, sc_cache, grad_fused)
    ga = gz * c
    gc_att, g_att = mlp_backward(params.att, att_cache, ga)
    gc = gz * a + gc_sc + gc_att
    splits = np.cumsum(widths)[:-1]
    return np.split(gc, splits, axis=1), {"att": g_att, "embed": g_emb, "shortcut": g_sc}


# ---------------------------------------------------------------------------
# aggregation


def aggregate_forward(features, method="max", agg_params=None):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("aggregation needs at least one node")
    if method == "max":
        return f.max(axis=0), ("max", f.argmax(axis=0), f.shape)
    if method == "mean":
        return f.mean(axis=0), ("mean", None, f.shape)
    if method == "attention_sum":
        scores, mcache = mlp_forward(agg_params, f)
        s = scores[:, 0]
        w = np.exp(s - s.max())
        w /= w.sum()
        return w @ f, ("attention_sum", (f, w, mcache, agg_params), f.shape)
    raise ValueError(f"unknown aggregation {method!r}; expected one of {AGGREGATIONS}")


def aggregate(features, method="max", agg_params=None):
    return aggregate_forward(features, method, agg_params)[0]


def aggregate_backward(cache, grad_roi):
    """Returns ``(grad_features, agg_param_grads or None)``."""
    method, extra, shape = cache
    if method == "max":
        g = np.zeros(shape)
        g[extra, np.arange(shape[1])] = grad_roi
        return g, None
    if method == "mean":
        return np.broadcast_to(grad_roi / shape[0], shape).copy(), None
    f, w, mcache, agg_params = extra
    gf = w[:, None] * grad_roi[None, :]
    gw = f @ grad_roi
    gs = w * (gw - np.dot(w, gw))
    gf_s, g_agg = mlp_backward(agg_params, mcache, gs[:, None])
    return gf + gf_s, g_agg


# ---------------------------------------------------------------------------
# heads


def heads_forward(roi, params):
    x = np.asarray(roi, dtype=np.float64).reshape(1, -1)
    logit, cls_cache = mlp_forward(params.cls, x)
    res, reg_cache = mlp_forward(params.reg, x)
    return Refinement(float(logit[0, 0]), res[0].copy()), (cls_cache, reg_cache)


def refine_heads(roi, params):
    return heads_forward(roi, params)[0]


def heads_backward(params, cache, grad_logit, grad_residual):
    cls_cache, reg_cache = cache
    g1, g_cls = mlp_backward(params.cls, cls_cache, np.array([[grad_logit]], dtype=np.float64))
    g2, g_reg = mlp_backward(params.reg, reg_cache, np.asarray(grad_residual, dtype=np.float64).reshape(1, 7))
    return (g1 + g2)[0], {"cls": g_cls, "reg": g_reg}


def head_forward(iteration_states, params, method="max", drop=0.0, training=False, rng=None):
    """MLAF -> aggregate -> dropout -> heads, with a cache for :func:`head_backward`."""
    fused, mcache = mlaf_forward(iteration_states, params)
    roi, acache = aggregate_forward(fused, method, params.agg)
    roi_d, mask = dropout(roi, drop, rng, training)
    ref, hcache = heads_forward(roi_d, params)
    return ref, (mcache, acache, mask, hcache, method)


def head_backward(params, cache, grad_logit, grad_residual):
    """Returns ``(grads wrt S^1..S^T, param grads by name)``."""
    mcache, acache, mask, hcache, method = cache
    g_roi, grads = heads_backward(params, hcache, grad_logit, grad_residual)
    if mask is not None:
        g_roi = g_roi * mask
    g_fused, g_agg = aggregate_backward(acache, g_roi)
    g_states, g_mlaf = mlaf_backward(mcache, g_fused)
    grads.update(g_mlaf)
    if g_agg is not None:
        grads["agg"] = g_agg
    return g_states, grads


def decode_box(proposal, residual):
    """Additive decode of ``(dc, ds, dyaw)``; yaw wrapped to ``[-pi, pi)``."""
    o = np.asarray(residual, dtype=np.float64).reshape(7)
    size = np.array([proposal.l, proposal.w, proposal.h]) + o[3:6]
    if np.any(size <= 0):
        raise InvalidResidual(f"decoded size {size.tolist()} is not positive")
    return Box3D(
        proposal.cx + o[0],
        proposal.cy + o[1],
        proposal.cz + o[2],
        float(size[0]),
        float(size[1]),
        float(size[2]),
        wrap_angle(proposal.yaw + o[6]),
    )
