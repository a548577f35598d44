"""End-to-end RoI refinement: grouping -> sampling -> graph -> head."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import os

import numpy as np

from . import fusion as _fusion
from .config import PipelineConfig
from .geom import Box3D
from .graph import GraphParams, node_positions, run_graph_backward, run_graph_forward
from .grouping import PatchIndex, exhaustive_indices, groups_from_csr
from .head import HeadParams, InvalidResidual, decode_box, head_backward, head_forward
from .nn import load_weights, make_rng, save_weights, sgd_step, zero_grads
from .objectives import assign_targets, loss_terms
from .sampling import EmptyGroup, sample


@dataclass
class RoiGraphModel:
    graph: GraphParams
    head: HeadParams
    reduction: object = None

    @classmethod
    def init(cls, cfg, image_in_channels=None):
        img = cfg.image_channels if cfg.fusion else 0
        graph = GraphParams.init(cfg.seed, tuple(cfg.pointnet_channels), tuple(cfg.iter_dims), img)
        width = sum(cfg.iter_dims)
        head = HeadParams.init(cfg.seed + 100, width, cfg.att_hidden, cfg.embed_dim, cfg.head_hidden)
        red = None
        if cfg.fusion and image_in_channels is not None:
            red = _fusion.reduction_params(image_in_channels, cfg.fusion_mid, cfg.image_channels, cfg.seed + 200)
        return cls(graph, head, red)

    def mlps(self):
        out = dict(self.graph.mlps())
        out.update(self.head.mlps())
        if self.reduction is not None:
            out["reduction"] = self.reduction
        return out

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        for name, p in self.mlps().items():
            save_weights(p, os.path.join(directory, f"{name}.rgw"))

    @classmethod
    def load(cls, directory):
        def get(name):
            return load_weights(os.path.join(directory, f"{name}.rgw"))

        edges = []
        while os.path.exists(os.path.join(directory, f"edge{len(edges)}.rgw")):
            edges.append(get(f"edge{len(edges)}"))
        graph = GraphParams(get("pointnet"), edges)
        head = HeadParams(*(get(k) for k in ("att", "embed", "shortcut", "agg", "cls", "reg")))
        red_path = os.path.join(directory, "reduction.rgw")
        return cls(graph, head, get("reduction") if os.path.exists(red_path) else None)


def forward_proposal(model, cfg, group, box, sampled, image=None, training=False, rng=None):
    """Refinement for one proposal. ``image`` is the appended S^0 block (or None)."""
    nodes = node_positions(group, sampled)
    states, gcache = run_graph_forward(group.canonical, nodes, box, model.graph, cfg.k, cfg.r, image)
    if len(states.iterations) == 0:
        raise ValueError("the head needs at least one graph iteration (T >= 1)")
    ref, hcache = head_forward(states.iterations, model.head, cfg.aggregation, cfg.dropout, training, rng)
    return ref, (gcache, hcache, states)


def backward_proposal(model, cache, grad_logit, grad_residual):
    gcache, hcache, states = cache
    g_states, grads = head_backward(model.head, hcache, grad_logit, grad_residual)
    grads.update(run_graph_backward(gcache, [None] + list(g_states)))
    for name, p in model.mlps().items():
        if name not in grads:
            grads[name] = zero_grads(p)
    return grads


def image_block(cfg, group, nodes_positions, box, fmap, calib):
    if not cfg.fusion:
        return None
    if fmap is None or calib is None:
        raise _fusion.MissingCalibration("fusion is enabled but no feature map / calibration was given")
    from .geom import from_canonical

    sensor = from_canonical(nodes_positions, box)[:, :3]
    return _fusion.sample_image_features(sensor, fmap, calib)


@dataclass
class TrainingExample:
    group: object
    box: Box3D
    sampled: object
    image: object = None


def batch_loss(model, cfg, examples, gts_targets, training=False, rng=None, with_grads=True):
    """Returns ``(total, cls, reg, grads or None)`` over a batch."""
    refs, caches = [], []
    for ex in examples:
        ref, cache = forward_proposal(model, cfg, ex.group, ex.box, ex.sampled, ex.image, training, rng)
        refs.append(ref)
        caches.append(cache)
    logits = np.array([r.score_logit for r in refs])
    res = np.stack([r.residual for r in refs])
    total, cls, reg, g_logit, g_res = loss_terms(logits, res, gts_targets, cfg.alpha)
    if not with_grads:
        return total, cls, reg, None
    grads = None
    for i, cache in enumerate(caches):
        g = backward_proposal(model, cache, g_logit[i], g_res[i])
        if grads is None:
            grads = g
        else:
            for name in grads:
                for (aw, ab), (gw, gb) in zip(grads[name], g[name]):
                    aw += gw
                    ab += gb
    return total, cls, reg, grads


def sgd_train(model, cfg, examples, targets, steps, lr, seed=0):
    """Plain SGD over the full batch; returns the per-step training losses."""
    rng = make_rng(seed)
    mlps = model.mlps()
    history = []
    for _ in range(steps):
        total, _, _, grads = batch_loss(model, cfg, examples, targets, training=True, rng=rng)
        history.append(total)
        for name, p in mlps.items():
            if name in grads:
                sgd_step(p, grads[name], lr)
    return history


def group_scene(points, boxes, cfg, oracle=False, threads=1):
    if oracle:
        offsets, idx = exhaustive_indices(points, boxes, cfg.sigma, threads)
    else:
        index = PatchIndex(points, cfg.patch_size)
        offsets, idx, _ = index.query(boxes, cfg.sigma, cfg.K, cfg.strict_grouping, threads)
    return groups_from_csr(points, boxes, offsets, idx)


def sample_group(cfg, group, box):
    return sample(cfg.sampling, group, box, cfg.T_s, cfg.lam, cfg.delta, cfg.hash_capacity, cfg.voxel_size,
                  cfg.seed + group.box_index, cfg.random_representative)


def refine_scene(points, boxes, model, cfg=None, fmap=None, calib=None, threads=1):
    """Refined boxes and scores for every proposal, in input order.

    Empty groups and non-positive decoded sizes keep the proposal and report
    ``score = None`` with a ``status`` field.
    """
    cfg = cfg or PipelineConfig()
    groups = group_scene(points, boxes, cfg, threads=threads)
    reduced = fmap
    if cfg.fusion and fmap is not None and model.reduction is not None:
        reduced = _fusion.reduce_channels(fmap, model.reduction)

    def one(i):
        box, group = boxes[i], groups[i]
        rec = {"box": i, "num_points": int(len(group))}
        try:
            sampled = sample_group(cfg, group, box)
        except EmptyGroup:
            rec.update(refined=list(box.as_tuple()), score=None, status="empty")
            return rec
        nodes = node_positions(group, sampled)
        img = image_block(cfg, group, nodes, box, reduced, calib)
        ref, _ = forward_proposal(model, cfg, group, box, sampled, img)
        try:
            refined = decode_box(box, ref.residual)
            rec.update(refined=list(refined.as_tuple()), score=ref.score, status="ok")
        except InvalidResidual:
            rec.update(refined=list(box.as_tuple()), score=ref.score, status="invalid_residual")
        return rec

    if threads <= 1:
        return [one(i) for i in range(len(boxes))]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(one, range(len(boxes))))


def make_training_examples(points, proposals, gts, cfg):
    groups = group_scene(points, proposals, cfg)
    examples = []
    keep = []
    for i, (g, b) in enumerate(zip(groups, proposals)):
        try:
            s = sample_group(cfg, g, b)
        except EmptyGroup:
            continue
        examples.append(TrainingExample(g, b, s))
        keep.append(i)
    targets = assign_targets([proposals[i] for i in keep], gts, cfg.positive_iou)
    return examples, targets
