"""Rotated 3D box geometry.

Boxes are 7-DoF ``(cx, cy, cz, l, w, h, yaw)`` in the sensor frame, yaw about
+z. The canonical frame of a box is translated to its center and rotated by
``-yaw`` so the box becomes axis-aligned at the origin.

All point/box arithmetic that feeds containment decisions goes through
:func:`box_frames`, so the grouping kernels and the exhaustive oracle see
bit-identical numbers.
"""

from dataclasses import dataclass
import math

import numpy as np


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got {(self.l, self.w, self.h)}")
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError("box fields must be finite")

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64).reshape(7)
        return cls(*(float(v) for v in a))

    def as_tuple(self):
        return (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw)

    def to_array(self):
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def center(self):
        return np.array([self.cx, self.cy, self.cz])

    @property
    def size(self):
        return np.array([self.l, self.w, self.h])

    @property
    def volume(self):
        return self.l * self.w * self.h


@dataclass
class PointCloud:
    """Ordered ``(N, 4)`` array of ``x, y, z, reflectance``.

    Row order is the point index and is never changed by any reader.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"expected (N, 4) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]


def boxes_to_array(boxes):
    """Stack a list of :class:`Box3D` (or an ``(M, 7)`` array) into ``(M, 7)`` float64."""
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
        return arr.reshape(-1, 7)
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.array([b.as_tuple() if isinstance(b, Box3D) else tuple(b) for b in boxes], dtype=np.float64)


def box_frames(boxes, sigma=0.0):
    """Per-box ``(cx, cy, cz, cos, sin, hx, hy, hz)`` with half-extents of the
    sigma-enlarged box (``(l + sigma) / 2`` etc.)."""
    b = boxes_to_array(boxes)
    out = np.empty((b.shape[0], 8))
    out[:, 0:3] = b[:, 0:3]
    out[:, 3] = np.cos(b[:, 6])
    out[:, 4] = np.sin(b[:, 6])
    out[:, 5] = (b[:, 3] + sigma) / 2.0
    out[:, 6] = (b[:, 4] + sigma) / 2.0
    out[:, 7] = (b[:, 5] + sigma) / 2.0
    return out


def _canonical_xyz(x, y, z, frame):
    cx, cy, cz, c, s = frame[0], frame[1], frame[2], frame[3], frame[4]
    dx = x - cx
    dy = y - cy
    lx = c * dx + s * dy
    ly = c * dy - s * dx
    return lx, ly, z - cz


def to_canonical(points, box):
    """Map sensor-frame points (``(4,)`` or ``(n, 4)``) into ``box``'s canonical
    frame. Reflectance passes through; extra columns are copied unchanged."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    frame = box_frames([box])[0]
    out = p2.copy()
    lx, ly, lz = _canonical_xyz(p2[:, 0], p2[:, 1], p2[:, 2], frame)
    out[:, 0], out[:, 1], out[:, 2] = lx, ly, lz
    return out[0] if single else out


def from_canonical(points, box):
    """Inverse of :func:`to_canonical`."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = p2.copy()
    out[:, 0] = c * p2[:, 0] - s * p2[:, 1] + box.cx
    out[:, 1] = s * p2[:, 0] + c * p2[:, 1] + box.cy
    out[:, 2] = p2[:, 2] + box.cz
    return out[0] if single else out


_CORNER_SIGNS = np.array(
    [
        [1, 1, 1],
        [1, -1, 1],
        [-1, -1, 1],
        [-1, 1, 1],
        [1, 1, -1],
        [1, -1, -1],
        [-1, -1, -1],
        [-1, 1, -1],
    ],
    dtype=np.float64,
)


def box_corners(box):
    """``(8, 3)`` sensor-frame corners: images of ``(+-l/2, +-w/2, +-h/2)``."""
    local = _CORNER_SIGNS * (box.size / 2.0)
    return from_canonical(np.hstack([local, np.zeros((8, 1))]), box)[:, :3]


def diagonal_corners(box):
    """The canonical min/max corner pair, flattened to 6 values."""
    half = box.size / 2.0
    return np.concatenate([-half, half])


def point_in_box(point, box, sigma=0.0):
    """Closed-interval containment in the sigma-enlarged box. Accepts ``(4,)``
    or ``(n, 4)`` points; returns a bool or a bool array."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    p = np.asarray(point, dtype=np.float64)
    p2 = np.atleast_2d(p)
    frame = box_frames([box], sigma)[0]
    lx, ly, lz = _canonical_xyz(p2[:, 0], p2[:, 1], p2[:, 2], frame)
    inside = (np.abs(lx) <= frame[5]) & (np.abs(ly) <= frame[6]) & (np.abs(lz) <= frame[7])
    return bool(inside[0]) if p.ndim == 1 else inside


# ---------------------------------------------------------------------------
# IoU


def bev_polygon(box, origin=(0.0, 0.0)):
    """Counter-clockwise BEV rectangle relative to ``origin``, ``(4, 2)``."""
    hl, hw = box.l / 2.0, box.w / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx - origin[0], box.cy - origin[1]])


def _polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    x = np.array([p[0] for p in poly])
    y = np.array([p[1] for p in poly])
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def clip_convex(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` against convex CCW ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        inp, output = output, []
        prev = inp[-1]
        prev_in = _cross(a, b, prev) >= 0.0
        for cur in inp:
            cur_in = _cross(a, b, cur) >= 0.0
            if cur_in != prev_in:
                # edge crosses the clip line
                d1 = _cross(a, b, prev)
                d2 = _cross(a, b, cur)
                t = d1 / (d1 - d2)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return output


def bev_intersection_area(a, b):
    """Symmetric in ``a`` and ``b``. Clipping runs around the midpoint of the
    centers so far-from-origin boxes keep their digits, and both clipping
    orders are averaged since they can differ in the last ulp."""
    o = (0.5 * (a.cx + b.cx), 0.5 * (a.cy + b.cy))
    pa, pb = bev_polygon(a, o), bev_polygon(b, o)
    area = 0.5 * (_polygon_area(clip_convex(pa, pb)) + _polygon_area(clip_convex(pb, pa)))
    return area if area > 0.0 else 0.0


def iou_bev(a, b):
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return min(1.0, inter / union)


def iou_3d(a, b):
    """Exact rotated 3D IoU (BEV polygon clipping times vertical overlap)."""
    if a == b:
        return 1.0
    zlo = max(a.cz - a.h / 2.0, b.cz - b.h / 2.0)
    zhi = min(a.cz + a.h / 2.0, b.cz + b.h / 2.0)
    dz = zhi - zlo
    if dz <= 0.0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    area = bev_intersection_area(a, b)
    if area <= 0.0:
        return 0.0
    inter = area * dz
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_3d_matrix(boxes_a, boxes_b):
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou_3d(a, b)
    return out


def wrap_angle(theta):
    """Wrap to ``[-pi, pi)``; angles already in range are returned unchanged."""
    if -math.pi <= theta < math.pi:
        return float(theta)
    w = (theta + math.pi) % (2.0 * math.pi) - math.pi
    return w if w < math.pi else -math.pi
