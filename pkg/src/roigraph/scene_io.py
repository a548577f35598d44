"""Scene ingestion and synthetic scene generation.

Formats:

* KITTI velodyne ``.bin``: little-endian float32 ``(x, y, z, r)`` records.
* KITTI label ``.txt``: ``type trunc occ alpha x1 y1 x2 y2 h w l x y z ry [score]``,
  location is the bottom center in the rectified camera frame.
* KITTI calib ``.txt``: ``P2``, ``R0_rect`` and ``Tr_velo_to_cam`` rows.
* JSON-lines boxes: one ``{"box": [cx, cy, cz, l, w, h, yaw], "score": s}`` per line.
"""

from dataclasses import dataclass, field
import json
import math

import numpy as np

from .fusion import Calibration
from .geom import Box3D, PointCloud, from_canonical, point_in_box
from .nn import make_rng


class SceneFormatError(ValueError):
    pass


class InfeasibleSpec(ValueError):
    pass


@dataclass
class Scene:
    cloud: PointCloud
    proposals: list
    gts: list = field(default_factory=list)
    scores: list = None
    fmap: object = None
    calib: object = None
    gt_members: list = None  # per gt: indices generated inside it


# ---------------------------------------------------------------------------
# velodyne


def load_kitti_cloud(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) % 16:
        raise SceneFormatError(f"{path}: size {len(data)} is not a multiple of 16 bytes")
    arr = np.frombuffer(data, "<f4").reshape(-1, 4)
    return PointCloud(arr.astype(np.float64))


def save_kitti_cloud(cloud, path):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    with open(path, "wb") as fh:
        fh.write(np.asarray(pts, dtype="<f4").reshape(-1, 4).tobytes())


# ---------------------------------------------------------------------------
# calib


def _parse_floats(text, lineno, path):
    try:
        return [float(v) for v in text.split()]
    except ValueError as e:
        raise SceneFormatError(f"{path}:{lineno}: {e}") from None


def loads_kitti_calib(text, path="<calib>", image_width=1242, image_height=375):
    rows = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if ":" not in line:
            raise SceneFormatError(f"{path}:{lineno}: expected 'KEY: values'")
        key, rest = line.split(":", 1)
        rows[key.strip()] = (_parse_floats(rest, lineno, path), lineno)
    need = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}
    for key, n in need.items():
        if key not in rows:
            raise SceneFormatError(f"{path}: missing {key}")
        vals, lineno = rows[key]
        if len(vals) != n:
            raise SceneFormatError(f"{path}:{lineno}: {key} needs {n} values, got {len(vals)}")
    return Calibration.from_kitti(rows["P2"][0], rows["R0_rect"][0], rows["Tr_velo_to_cam"][0], image_width, image_height)


def load_kitti_calib(path, image_width=1242, image_height=375):
    with open(path) as fh:
        return loads_kitti_calib(fh.read(), path, image_width, image_height)


def dumps_kitti_calib(calib):
    def row(a):
        return " ".join(repr(float(v)) for v in np.asarray(a).ravel())

    return f"P2: {row(calib.P2)}\nR0_rect: {row(calib.R0)}\nTr_velo_to_cam: {row(calib.Tr)}\n"


# ---------------------------------------------------------------------------
# labels


@dataclass
class KittiLabel:
    type: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple
    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    ry: float
    score: float = None

    def to_box(self, calib):
        """Sensor-frame box: rect bottom center -> sensor, lifted by h/2;
        yaw = -ry - pi/2."""
        bottom = calib.rect_to_sensor([[self.x, self.y, self.z]])[0]
        return Box3D(bottom[0], bottom[1], bottom[2] + self.h / 2.0, self.l, self.w, self.h, -self.ry - math.pi / 2.0)

    @classmethod
    def from_box(cls, box, calib, type="Car", score=None):
        bottom = calib.sensor_to_rect([[box.cx, box.cy, box.cz - box.h / 2.0]])[0]
        return cls(type, 0.0, 0, 0.0, (0.0, 0.0, 0.0, 0.0), box.h, box.w, box.l,
                   float(bottom[0]), float(bottom[1]), float(bottom[2]), -box.yaw - math.pi / 2.0, score)


def loads_kitti_labels(text, path="<labels>"):
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "DontCare":
            continue
        if len(parts) not in (15, 16):
            raise SceneFormatError(f"{path}:{lineno}: expected 15 or 16 fields, got {len(parts)}")
        try:
            v = [float(p) for p in parts[1:]]
        except ValueError as e:
            raise SceneFormatError(f"{path}:{lineno}: {e}") from None
        out.append(KittiLabel(parts[0], v[0], int(v[1]), v[2], tuple(v[3:7]), v[7], v[8], v[9], v[10], v[11], v[12],
                              v[13], v[14] if len(v) == 15 else None))
    return out


def load_kitti_labels(path):
    with open(path) as fh:
        return loads_kitti_labels(fh.read(), path)


def dumps_kitti_labels(labels):
    lines = []
    for lb in labels:
        vals = [lb.truncation, lb.occlusion, lb.alpha, *lb.bbox, lb.h, lb.w, lb.l, lb.x, lb.y, lb.z, lb.ry]
        if lb.score is not None:
            vals.append(lb.score)
        lines.append(" ".join([lb.type] + [str(int(v)) if i == 1 else repr(float(v)) for i, v in enumerate(vals)]))
    return "\n".join(lines) + ("\n" if lines else "")


def label_boxes(labels, calib):
    return [lb.to_box(calib) for lb in labels]


# ---------------------------------------------------------------------------
# JSON-lines boxes


def dumps_boxes_jsonl(boxes, scores=None):
    lines = []
    for i, b in enumerate(boxes):
        rec = {"box": list(b.as_tuple())}
        if scores is not None:
            rec["score"] = scores[i]
        lines.append(json.dumps(rec))
    return "\n".join(lines) + ("\n" if lines else "")


def loads_boxes_jsonl(text, path="<boxes>"):
    boxes, scores = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            boxes.append(Box3D(*[float(v) for v in rec["box"]]))
        except (ValueError, KeyError, TypeError) as e:
            raise SceneFormatError(f"{path}:{lineno}: {e}") from None
        scores.append(rec.get("score"))
    return boxes, scores


def load_boxes(path, calib=None):
    """Proposal boxes from ``.jsonl`` or a KITTI label file (needs ``calib``)."""
    with open(path) as fh:
        text = fh.read()
    if path.endswith(".jsonl") or path.endswith(".json"):
        return loads_boxes_jsonl(text, path)
    if calib is None:
        raise SceneFormatError(f"{path}: KITTI labels need a calibration file")
    labels = loads_kitti_labels(text, path)
    return label_boxes(labels, calib), [lb.score for lb in labels]


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthSpec:
    n_boxes: int = 8
    points_per_box: int = 200
    density: str = "uniform"  # or "distance": count ~ points_per_box * (ref / d)^2
    ref_distance: float = 10.0
    min_box_points: int = 1
    clutter: int = 1000
    clutter_mode: str = "uniform"  # or "radial": denser near the sensor
    extent: float = 60.0
    distance_range: tuple = (3.0, 60.0)
    fixed_distance: float = None
    length_range: tuple = (3.5, 5.0)
    width_range: tuple = (1.5, 2.2)
    height_range: tuple = (1.4, 1.9)
    margin: float = 0.4
    proposals_per_box: int = 1
    proposal_jitter: float = 0.3
    extra_proposals: int = 0
    total_points: int = None
    max_retries: int = 1000


PRESETS = {
    "small": SynthSpec(n_boxes=6, points_per_box=600, density="distance", clutter=3000, extent=40.0,
                       distance_range=(4.0, 35.0), proposals_per_box=2),
    "paper-scale": SynthSpec(n_boxes=60, points_per_box=1200, density="distance", clutter_mode="radial",
                             extent=75.0, distance_range=(4.0, 70.0), proposals_per_box=8, extra_proposals=20,
                             total_points=180_000),
}


def _box_points(rng, box, n):
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * box.size
    refl = rng.uniform(0.0, 1.0, size=(n, 1))
    return from_canonical(np.hstack([local, refl]), box)


def _clutter(rng, spec, n):
    if spec.clutter_mode == "radial":
        r = np.exp(rng.uniform(np.log(1.0), np.log(spec.extent), n))
        a = rng.uniform(-np.pi, np.pi, n)
        xy = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    elif spec.clutter_mode == "uniform":
        xy = rng.uniform(-spec.extent, spec.extent, size=(n, 2))
    else:
        raise ValueError(f"unknown clutter mode {spec.clutter_mode!r}")
    z = rng.uniform(-2.0, 1.0, size=(n, 1))
    return np.hstack([xy, z, rng.uniform(0.0, 1.0, size=(n, 1))])


def _in_any(points, boxes, margin):
    mask = np.zeros(len(points), bool)
    for b in boxes:
        mask |= point_in_box(points, b, margin)
    return mask


def synth_scene(spec=None, seed=0):
    """Scene whose gt boxes are separated (after enlargement by ``margin``)
    and whose clutter avoids every enlarged gt, so each gt's members are
    known by construction (``Scene.gt_members``)."""
    if isinstance(spec, str):
        spec = PRESETS[spec]
    spec = spec or SynthSpec()
    rng = make_rng(seed)
    gts = []
    tries = 0
    while len(gts) < spec.n_boxes:
        tries += 1
        if tries > spec.max_retries * max(1, spec.n_boxes):
            raise InfeasibleSpec(f"could not place {spec.n_boxes} separated boxes")
        l = rng.uniform(*spec.length_range)
        w = rng.uniform(*spec.width_range)
        h = rng.uniform(*spec.height_range)
        if spec.fixed_distance is not None:
            d = spec.fixed_distance
        else:
            d = rng.uniform(*spec.distance_range)
        a = rng.uniform(-np.pi, np.pi)
        cand = Box3D(d * math.cos(a), d * math.sin(a), -1.0 + h / 2.0, l, w, h, rng.uniform(-np.pi, np.pi))
        rad = 0.5 * math.hypot(l + spec.margin, w + spec.margin)
        ok = all(
            math.hypot(cand.cx - g.cx, cand.cy - g.cy) > rad + 0.5 * math.hypot(g.l + spec.margin, g.w + spec.margin) + 1e-6
            for g in gts
        )
        if ok:
            gts.append(cand)

    chunks, members = [], []
    start = 0
    for g in gts:
        if spec.density == "distance":
            dist = math.sqrt(g.cx**2 + g.cy**2 + g.cz**2)
            n = int(round(spec.points_per_box * (spec.ref_distance / max(dist, spec.ref_distance)) ** 2))
            n = max(spec.min_box_points, n)
        elif spec.density == "uniform":
            n = spec.points_per_box
        else:
            raise ValueError(f"unknown density profile {spec.density!r}")
        chunks.append(_box_points(rng, g, n))
        members.append(np.arange(start, start + n))
        start += n
    n_clutter = spec.clutter if spec.total_points is None else max(0, spec.total_points - start)
    clutter = np.zeros((0, 4))
    while len(clutter) < n_clutter:
        need = n_clutter - len(clutter)
        cand = _clutter(rng, spec, int(need * 1.2) + 16)
        cand = cand[~_in_any(cand, gts, spec.margin)]
        clutter = np.vstack([clutter, cand[:need]])
    chunks.append(clutter)
    cloud = PointCloud(np.vstack(chunks) if chunks else np.zeros((0, 4)))

    proposals = []
    for g in gts:
        for _ in range(spec.proposals_per_box):
            j = spec.proposal_jitter
            proposals.append(Box3D(
                g.cx + rng.normal(0, j), g.cy + rng.normal(0, j), g.cz + rng.normal(0, j / 3),
                max(0.5, g.l * (1 + rng.normal(0, j / 3))), max(0.5, g.w * (1 + rng.normal(0, j / 3))),
                max(0.5, g.h * (1 + rng.normal(0, j / 3))), g.yaw + rng.normal(0, j / 2),
            ))
    for _ in range(spec.extra_proposals):
        d = rng.uniform(*spec.distance_range)
        a = rng.uniform(-np.pi, np.pi)
        proposals.append(Box3D(d * math.cos(a), d * math.sin(a), -0.2, rng.uniform(*spec.length_range),
                               rng.uniform(*spec.width_range), rng.uniform(*spec.height_range), rng.uniform(-np.pi, np.pi)))
    return Scene(cloud, proposals, gts, gt_members=members)


def random_grouping_scene(rng, n_points, n_boxes, extent=20.0, clustered=False):
    """Stress scene for grouping equivalence: boxes with arbitrary yaw, some
    snapped to patch corners and the origin, some points exactly on faces."""
    if clustered:
        centers = rng.uniform(-extent, extent, size=(max(1, n_points // 500), 3))
        owner = rng.integers(0, len(centers), n_points)
        xyz = centers[owner] + rng.normal(0, 1.5, size=(n_points, 3))
    else:
        xyz = rng.uniform(-extent, extent, size=(n_points, 3))
    xyz[:, 2] = np.clip(xyz[:, 2] * 0.15, -3, 3)
    pts = np.hstack([xyz, rng.uniform(0, 1, size=(n_points, 1))])
    boxes = []
    for i in range(n_boxes):
        kind = i % 4
        if kind == 0:
            c = np.round(rng.uniform(-extent, extent, 2))  # on a patch corner
        elif kind == 1 and i < 8:
            c = np.zeros(2)  # at the origin
        elif kind == 2:
            c = np.round(rng.uniform(-extent, extent, 2)) + 0.5
        else:
            c = rng.uniform(-extent, extent, 2)
        l, w = rng.uniform(0.3, 6.0, 2)
        h = rng.uniform(0.5, 3.0)
        yaw = rng.choice([0.0, np.pi / 2, np.pi / 4, -np.pi]) if rng.random() < 0.3 else rng.uniform(-2 * np.pi, 2 * np.pi)
        boxes.append(Box3D(float(c[0]), float(c[1]), float(rng.uniform(-1, 1)), float(l), float(w), float(h), float(yaw)))
    # put some points on the faces of the enlarged boxes
    face = []
    for b in boxes[: min(len(boxes), 16)]:
        for axis in range(3):
            loc = rng.uniform(-0.5, 0.5, size=(2, 3)) * (b.size + 0.4)
            loc[:, axis] = np.array([-1, 1]) * (b.size[axis] + 0.4) / 2
            face.append(from_canonical(np.hstack([loc, np.zeros((2, 1))]), b))
    if face and n_points:
        face = np.vstack(face)
        k = min(len(face), n_points)
        pos = rng.choice(n_points, k, replace=False)
        pts[pos] = face[:k]
    return pts, boxes
