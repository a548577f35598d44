"""Image feature decoration of graph nodes.

Feature maps are ``(H, W, C)`` arrays with a ``stride`` mapping feature-grid
coordinates to image pixels (``pixel = stride * grid``). Nodes are projected
with a composed 3x4 matrix, divided by the stride and sampled bilinearly.
Nodes behind the camera or outside the image receive zeros.
"""

from dataclasses import dataclass
import struct

import numpy as np

from .geom import from_canonical
from .nn import mlp_forward, seeded_init

_MAGIC = b"RGF1"


class FeatureMapFormatError(ValueError):
    pass


class MissingCalibration(ValueError):
    pass


@dataclass
class FeatureMap:
    data: np.ndarray  # (H, W, C)
    stride: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError("feature map must be (H, W, C)")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature map has non-finite values")
        self.data = d

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class Calibration:
    """``P`` is the full sensor->image projection (``P2 @ R0 @ Tr`` for KITTI)."""

    P: np.ndarray
    image_width: int = 1242
    image_height: int = 375
    P2: np.ndarray = None
    R0: np.ndarray = None
    Tr: np.ndarray = None

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64).reshape(3, 4)

    @classmethod
    def from_kitti(cls, P2, R0, Tr, image_width=1242, image_height=375):
        P2 = np.asarray(P2, dtype=np.float64).reshape(3, 4)
        R0h = np.eye(4)
        R0h[:3, :3] = np.asarray(R0, dtype=np.float64).reshape(3, 3)
        Trh = np.eye(4)
        Trh[:3, :4] = np.asarray(Tr, dtype=np.float64).reshape(3, 4)
        return cls(P2 @ R0h @ Trh, image_width, image_height, P2, R0h[:3, :3], Trh[:3, :4])

    def sensor_to_rect(self, xyz):
        """Sensor frame -> rectified camera frame (``R0 @ Tr``)."""
        xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
        hom = np.hstack([xyz, np.ones((xyz.shape[0], 1))])
        return hom @ (self.R0 @ self.Tr).T

    def rect_to_sensor(self, xyz):
        xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
        m = np.eye(4)
        m[:3, :4] = self.R0 @ self.Tr
        hom = np.hstack([xyz, np.ones((xyz.shape[0], 1))])
        return (hom @ np.linalg.inv(m).T)[:, :3]


def reduction_params(c_in, mid=64, out=32, seed=0):
    """Two per-pixel linear layers ``c_in -> mid (relu) -> out``."""
    return seeded_init([c_in, mid, out], seed)


def reduce_channels(fmap, params):
    """Per-pixel MLP; a 1x1 convolution is exactly this."""
    h, w, c = fmap.data.shape
    if params.in_dim != c:
        raise ValueError(f"reduction expects {params.in_dim} channels, map has {c}")
    out, _ = mlp_forward(params, fmap.data.reshape(h * w, c))
    return FeatureMap(out.reshape(h, w, params.out_dim), fmap.stride)


def project(points, calib):
    """Returns ``(u, v, depth)`` arrays (scalars for a single point)."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    xyz = np.atleast_2d(p)[:, :3]
    hom = np.hstack([xyz, np.ones((xyz.shape[0], 1))]) @ calib.P.T
    depth = hom[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = hom[:, 0] / depth
        v = hom[:, 1] / depth
    if single:
        return float(u[0]), float(v[0]), float(depth[0])
    return u, v, depth


def bilinear_weights(u, v, width, height):
    """Clamped 4-tap corners ``(u0, u1, v0, v1)`` and weights ``(w00, w01, w10, w11)``
    where ``wab`` multiplies pixel ``(v_a, u_b)``."""
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, width - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, height - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    du = u - u0
    dv = v - v0
    w = ((1 - dv) * (1 - du), (1 - dv) * du, dv * (1 - du), dv * du)
    return (u0, u1, v0, v1), w


def bilinear_sample(fmap, u, v):
    """Sample at feature-grid coords ``(u, v)`` (u = column, v = row)."""
    data = fmap.data if isinstance(fmap, FeatureMap) else np.asarray(fmap, dtype=np.float64)
    single = np.ndim(u) == 0
    (u0, u1, v0, v1), (w00, w01, w10, w11) = bilinear_weights(np.atleast_1d(u), np.atleast_1d(v), data.shape[1], data.shape[0])
    out = (
        w00[:, None] * data[v0, u0]
        + w01[:, None] * data[v0, u1]
        + w10[:, None] * data[v1, u0]
        + w11[:, None] * data[v1, u1]
    )
    return out[0] if single else out


def sample_image_features(sensor_xyz, fmap, calib):
    """Per node ``C`` features, zeros where the projection is invalid."""
    if calib is None:
        raise MissingCalibration("fusion is enabled but no calibration was given")
    u, v, depth = project(np.atleast_2d(sensor_xyz), calib)
    valid = (depth > 0) & np.isfinite(u) & np.isfinite(v)
    valid &= (u >= 0) & (u <= calib.image_width - 1) & (v >= 0) & (v <= calib.image_height - 1)
    out = np.zeros((len(depth), fmap.channels))
    if np.any(valid):
        out[valid] = bilinear_sample(fmap, u[valid] / fmap.stride, v[valid] / fmap.stride)
    return out


def decorate_nodes(s0, canonical_nodes, box, fmap, calib, enabled=True):
    """Append sampled image features to ``S^0``; returns ``s0`` itself when disabled."""
    if not enabled:
        return s0
    if calib is None:
        raise MissingCalibration("fusion is enabled but no calibration was given")
    sensor = from_canonical(np.atleast_2d(canonical_nodes)[:, :4], box)[:, :3]
    return np.hstack([s0, sample_image_features(sensor, fmap, calib)])


# ---------------------------------------------------------------------------
# RGF1: magic, u32 H, u32 W, u32 C, f32 stride, f32 data (H, W, C) row-major


def dumps_feature_map(fmap):
    h, w, c = fmap.data.shape
    return _MAGIC + struct.pack("<IIIf", h, w, c, fmap.stride) + fmap.data.astype("<f4").tobytes(order="C")


def loads_feature_map(data):
    if len(data) < 20 or data[:4] != _MAGIC:
        raise FeatureMapFormatError("not an RGF1 feature map")
    h, w, c, stride = struct.unpack_from("<IIIf", data, 4)
    n = h * w * c
    if len(data) != 20 + 4 * n:
        raise FeatureMapFormatError(f"expected {20 + 4 * n} bytes, got {len(data)}")
    arr = np.frombuffer(data, "<f4", n, 20).reshape(h, w, c)
    return FeatureMap(arr.astype(np.float64), float(stride))


def save_feature_map(fmap, path):
    with open(path, "wb") as fh:
        fh.write(dumps_feature_map(fmap))


def load_feature_map(path):
    with open(path, "rb") as fh:
        return loads_feature_map(fh.read())
