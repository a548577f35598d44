"""Point grouping for enlarged proposals.

``patch_search`` buckets the scene into a BEV grid of square patches, lets
every box claim the patches under its axis-aligned footprint, and tests only
the points of claimed patches. ``exhaustive_group`` is the N x M scan it must
agree with exactly.

Index layout: points are bucketed into an open-addressing table keyed by the
packed ``(ix, iy)`` patch pair (point2patch), members stored CSR in ascending
point order. Per query a dense ``(P, K)`` patch2box table holds the first K
claimants of each patch; claims past K are an error in strict mode and a
fallback scan list in permissive mode.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging

import numpy as np

from . import _accel
from ._accel import njit
from .geom import PointCloud, boxes_to_array, box_frames, to_canonical, Box3D

log = logging.getLogger(__name__)

_OFFSET = np.int64(1) << np.int64(31)
_AABB_PAD = 1e-9


class PatchOverflow(RuntimeError):
    def __init__(self, patch, count, limit):
        self.patch = patch
        self.count = count
        self.limit = limit
        super().__init__(f"patch {patch} claimed by {count} boxes (K={limit})")


@dataclass
class ProposalGroup:
    box_index: int
    indices: np.ndarray
    canonical: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.indices)


def patch_id(point, patch_size):
    if patch_size <= 0:
        raise ValueError("patch_size must be > 0")
    return (int(np.floor(point[0] / patch_size)), int(np.floor(point[1] / patch_size)))


def _patch_coords(points, patch_size):
    ix = np.floor(points[:, 0] / patch_size).astype(np.int64)
    iy = np.floor(points[:, 1] / patch_size).astype(np.int64)
    if ix.size and (np.abs(ix).max() >= _OFFSET or np.abs(iy).max() >= _OFFSET):
        raise ValueError("scene extent exceeds the patch id range")
    return ix, iy


def box_patch_ranges(frames, patch_size):
    """Inclusive patch-index ranges ``(ix0, ix1, iy0, iy1)`` of each box's
    BEV axis-aligned bound. Padded by a nanometre so rounding in the
    containment test can never place a grouped point outside the range."""
    c = np.abs(frames[:, 3])
    s = np.abs(frames[:, 4])
    ex = c * frames[:, 5] + s * frames[:, 6] + _AABB_PAD
    ey = s * frames[:, 5] + c * frames[:, 6] + _AABB_PAD
    out = np.empty((frames.shape[0], 4), dtype=np.int64)
    out[:, 0] = np.floor((frames[:, 0] - ex) / patch_size)
    out[:, 1] = np.floor((frames[:, 0] + ex) / patch_size)
    out[:, 2] = np.floor((frames[:, 1] - ey) / patch_size)
    out[:, 3] = np.floor((frames[:, 1] + ey) / patch_size)
    return out


def occupied_patches(box, sigma, patch_size):
    if patch_size <= 0:
        raise ValueError("patch_size must be > 0")
    r = box_patch_ranges(box_frames([box], sigma), patch_size)[0]
    return {(x, y) for x in range(r[0], r[1] + 1) for y in range(r[2], r[3] + 1)}


# ---------------------------------------------------------------------------
# numba kernels


@njit
def _inside(x, y, z, f):
    dx = x - f[0]
    dy = y - f[1]
    lx = f[3] * dx + f[4] * dy
    ly = f[3] * dy - f[4] * dx
    lz = z - f[2]
    return abs(lx) <= f[5] and abs(ly) <= f[6] and abs(lz) <= f[7]


@njit
def _grow(a, n):
    b = np.empty(max(2 * a.shape[0], 64), a.dtype)
    b[:n] = a[:n]
    return b


@njit
def _mix(ix, iy, mask):
    return ((ix * 73856093) ^ (iy * 19349663)) & mask


@njit
def _pack(ix, iy):
    return ((ix + 2147483648) << 32) | (iy + 2147483648)


@njit
def _nb_build(ix, iy, capacity):
    mask = capacity - 1
    tkeys = np.full(capacity, -1, np.int64)
    tpatch = np.full(capacity, -1, np.int64)
    n = ix.shape[0]
    point_patch = np.empty(n, np.int64)
    counts = np.zeros(n + 1, np.int64)
    npatch = 0
    for j in range(n):
        key = _pack(ix[j], iy[j])
        h = _mix(ix[j], iy[j], mask)
        i = 0
        while True:
            s = (h + (i * (i + 1)) // 2) & mask
            if tkeys[s] == -1:
                tkeys[s] = key
                tpatch[s] = npatch
                npatch += 1
                break
            if tkeys[s] == key:
                break
            i += 1
        pid = tpatch[s]
        point_patch[j] = pid
        counts[pid + 1] += 1
    start = np.cumsum(counts[: npatch + 1])
    fill = start[:npatch].copy()
    members = np.empty(n, np.int64)
    for j in range(n):
        pid = point_patch[j]
        members[fill[pid]] = j
        fill[pid] += 1
    return tkeys, tpatch, point_patch, start, members


@njit
def _nb_lookup(tkeys, tpatch, ix, iy):
    mask = tkeys.shape[0] - 1
    key = _pack(ix, iy)
    h = _mix(ix, iy, mask)
    i = 0
    while True:
        s = (h + (i * (i + 1)) // 2) & mask
        k = tkeys[s]
        if k == -1:
            return -1
        if k == key:
            return tpatch[s]
        i += 1


@njit
def _nb_claims(tkeys, tpatch, npatch, ranges, K):
    m = ranges.shape[0]
    claims = np.zeros(npatch, np.int64)
    p2b = np.empty((npatch, K), np.int64)
    ov_patch = np.empty(64, np.int64)
    ov_box = np.empty(64, np.int64)
    nov = 0
    for i in range(m):
        for gx in range(ranges[i, 0], ranges[i, 1] + 1):
            for gy in range(ranges[i, 2], ranges[i, 3] + 1):
                pid = _nb_lookup(tkeys, tpatch, gx, gy)
                if pid < 0:
                    continue
                c = claims[pid]
                if c < K:
                    p2b[pid, c] = i
                else:
                    if nov == ov_patch.shape[0]:
                        ov_patch = _grow(ov_patch, nov)
                        ov_box = _grow(ov_box, nov)
                    ov_patch[nov] = pid
                    ov_box[nov] = i
                    nov += 1
                claims[pid] = c + 1
    return claims, p2b, ov_patch[:nov].copy(), ov_box[:nov].copy()


@njit
def _nb_emit(p0, p1, pts, frames, claims, p2b, K, start, members, ov_patch, ov_box):
    out_b = np.empty(1024, np.int64)
    out_p = np.empty(1024, np.int64)
    n = 0
    for pid in range(p0, p1):
        nb = min(claims[pid], K)
        for q in range(start[pid], start[pid + 1]):
            j = members[q]
            x = pts[j, 0]
            y = pts[j, 1]
            z = pts[j, 2]
            for t in range(nb):
                i = p2b[pid, t]
                if _inside(x, y, z, frames[i]):
                    if n == out_b.shape[0]:
                        out_b = _grow(out_b, n)
                        out_p = _grow(out_p, n)
                    out_b[n] = i
                    out_p[n] = j
                    n += 1
    for o in range(ov_patch.shape[0]):
        pid = ov_patch[o]
        i = ov_box[o]
        for q in range(start[pid], start[pid + 1]):
            j = members[q]
            if _inside(pts[j, 0], pts[j, 1], pts[j, 2], frames[i]):
                if n == out_b.shape[0]:
                    out_b = _grow(out_b, n)
                    out_p = _grow(out_p, n)
                out_b[n] = i
                out_p[n] = j
                n += 1
    return out_b[:n], out_p[:n]


@njit
def _nb_pairs_to_csr(pb, pp, m):
    offsets = np.zeros(m + 1, np.int64)
    for t in range(pb.shape[0]):
        offsets[pb[t] + 1] += 1
    for i in range(m):
        offsets[i + 1] += offsets[i]
    fill = offsets[:m].copy()
    idx = np.empty(pb.shape[0], np.int64)
    for t in range(pb.shape[0]):
        idx[fill[pb[t]]] = pp[t]
        fill[pb[t]] += 1
    for i in range(m):
        idx[offsets[i] : offsets[i + 1]] = np.sort(idx[offsets[i] : offsets[i + 1]])
    return offsets, idx


@njit
def _nb_scan_one(x, y, z, f, out):
    cx, cy, cz, c, s, hx, hy, hz = f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7]
    cnt = 0
    for j in range(x.shape[0]):
        dx = x[j] - cx
        dy = y[j] - cy
        lx = c * dx + s * dy
        ly = c * dy - s * dx
        if (abs(lx) <= hx) & (abs(ly) <= hy) & (abs(z[j] - cz) <= hz):
            out[cnt] = j
            cnt += 1
    return cnt


@njit
def _nb_exhaustive(pts, frames):
    # column copies and a per-box scratch buffer keep the inner loop free of
    # reallocation, which otherwise blocks vectorization
    n = pts.shape[0]
    m = frames.shape[0]
    x = pts[:, 0].copy()
    y = pts[:, 1].copy()
    z = pts[:, 2].copy()
    offsets = np.zeros(m + 1, np.int64)
    tmp = np.empty(n, np.int64)
    buf = np.empty(max(1024, n), np.int64)
    total = 0
    for i in range(m):
        k = _nb_scan_one(x, y, z, frames[i], tmp)
        if total + k > buf.shape[0]:
            big = np.empty(max(2 * buf.shape[0], total + k), np.int64)
            big[:total] = buf[:total]
            buf = big
        buf[total : total + k] = tmp[:k]
        total += k
        offsets[i + 1] = total
    return offsets, buf[:total].copy()


# ---------------------------------------------------------------------------
# numpy fallbacks (same arithmetic as ``_inside``)


def _np_inside(pts, f):
    dx = pts[:, 0] - f[0]
    dy = pts[:, 1] - f[1]
    lx = f[3] * dx + f[4] * dy
    ly = f[3] * dy - f[4] * dx
    lz = pts[:, 2] - f[2]
    return (np.abs(lx) <= f[5]) & (np.abs(ly) <= f[6]) & (np.abs(lz) <= f[7])


def _np_exhaustive(pts, frames):
    parts = [np.nonzero(_np_inside(pts, f))[0].astype(np.int64) for f in frames]
    offsets = np.zeros(len(parts) + 1, np.int64)
    offsets[1:] = np.cumsum([len(p) for p in parts])
    idx = np.concatenate(parts) if parts else np.zeros(0, np.int64)
    return offsets, idx


def _shards(n, k):
    k = max(1, min(k, n)) if n else 1
    bounds = np.linspace(0, n, k + 1).astype(int)
    return [(bounds[t], bounds[t + 1]) for t in range(k)]


def _concat_csr(parts):
    offsets = [np.zeros(1, np.int64)]
    idx = []
    base = 0
    for off, ix in parts:
        offsets.append(off[1:] + base)
        idx.append(ix)
        base += len(ix)
    return np.concatenate(offsets), (np.concatenate(idx) if idx else np.zeros(0, np.int64))


def exhaustive_indices(points, boxes, sigma, threads=1):
    """CSR ``(offsets, indices)`` of the N x M containment scan."""
    pts = np.ascontiguousarray(points[:, :3], dtype=np.float64)
    frames = box_frames(boxes, sigma)
    kernel = _nb_exhaustive if _accel.backend() == "numba" else _np_exhaustive
    if threads <= 1 or len(frames) < 2:
        return kernel(pts, frames)
    shards = _shards(len(frames), threads)
    with ThreadPoolExecutor(len(shards)) as ex:
        parts = list(ex.map(lambda r: kernel(pts, frames[r[0] : r[1]]), shards))
    return _concat_csr(parts)


class PatchIndex:
    """point2patch over a fixed cloud; immutable after construction so
    :meth:`query` may run from several threads."""

    def __init__(self, points, patch_size=1.0):
        if patch_size <= 0:
            raise ValueError("patch_size must be > 0")
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
        self.points = np.ascontiguousarray(pts[:, :3], dtype=np.float64)
        self.patch_size = float(patch_size)
        self.backend = _accel.backend()
        ix, iy = _patch_coords(self.points, self.patch_size)
        if self.backend == "numba":
            cap = 1 << max(4, int(2 * max(len(ix), 1) - 1).bit_length())
            self._tkeys, self._tpatch, self.point2patch, self.patch_start, self.patch_members = _nb_build(ix, iy, cap)
            self.n_patches = len(self.patch_start) - 1
            order = np.argsort(self.point2patch, kind="stable")
            first = order[self.patch_start[:-1]] if self.n_patches else np.zeros(0, np.int64)
            self.patch_keys = np.stack([ix[first], iy[first]], axis=1) if self.n_patches else np.zeros((0, 2), np.int64)
        else:
            packed = (ix + _OFFSET) << np.int64(32) | (iy + _OFFSET)
            self._keys, first, inv = np.unique(packed, return_index=True, return_inverse=True)
            self.point2patch = inv.astype(np.int64).ravel()
            self.n_patches = len(self._keys)
            counts = np.bincount(self.point2patch, minlength=self.n_patches)
            self.patch_start = np.zeros(self.n_patches + 1, np.int64)
            self.patch_start[1:] = np.cumsum(counts)
            self.patch_members = np.argsort(self.point2patch, kind="stable").astype(np.int64)
            self.patch_keys = np.stack([ix[first], iy[first]], axis=1) if self.n_patches else np.zeros((0, 2), np.int64)

    def _lookup_np(self, gx, gy):
        packed = (gx + _OFFSET) << np.int64(32) | (gy + _OFFSET)
        pos = np.searchsorted(self._keys, packed)
        pos = np.minimum(pos, max(len(self._keys) - 1, 0))
        hit = (self._keys[pos] == packed) if len(self._keys) else np.zeros(len(packed), bool)
        return np.where(hit, pos, -1)

    def _claims_np(self, ranges):
        # (patch, box) claims in box order, so ranks match the numba loop
        cp, cb = [], []
        for i, r in enumerate(ranges):
            gx, gy = np.meshgrid(np.arange(r[0], r[1] + 1), np.arange(r[2], r[3] + 1), indexing="ij")
            pid = self._lookup_np(gx.ravel(), gy.ravel())
            pid = pid[pid >= 0]
            cp.append(pid)
            cb.append(np.full(len(pid), i, np.int64))
        cp = np.concatenate(cp) if cp else np.zeros(0, np.int64)
        cb = np.concatenate(cb) if cb else np.zeros(0, np.int64)
        order = np.argsort(cp, kind="stable")
        sp = cp[order]
        counts = np.bincount(sp, minlength=self.n_patches) if len(sp) else np.zeros(self.n_patches, np.int64)
        first = np.zeros(self.n_patches + 1, np.int64)
        first[1:] = np.cumsum(counts)
        rank = np.empty(len(cp), np.int64)
        rank[order] = np.arange(len(cp)) - first[sp]
        return cp, cb, rank, counts

    def claims(self, boxes, sigma, K):
        """Per-patch claim counts plus the ``patch2box`` mapping as a dict
        ``(ix, iy) -> list of box indices`` (first ``K`` claimants)."""
        ranges = box_patch_ranges(box_frames(boxes, sigma), self.patch_size)
        if self.backend == "numba":
            claims, p2b, _, _ = _nb_claims(self._tkeys, self._tpatch, self.n_patches, ranges, K)
            table = {
                tuple(int(v) for v in self.patch_keys[p]): [int(b) for b in p2b[p, : min(claims[p], K)]]
                for p in range(self.n_patches)
                if claims[p]
            }
            return claims, table
        cp, cb, rank, counts = self._claims_np(ranges)
        table = {}
        for p, b, r in zip(cp, cb, rank):
            if r < K:
                table.setdefault(tuple(int(v) for v in self.patch_keys[p]), []).append(int(b))
        return counts, table

    def _check_overflow(self, claims, K, strict):
        over = claims > K
        n_over = int(np.sum(claims[over] - K))
        if n_over and strict:
            cand = np.nonzero(over)[0]
            keys = self.patch_keys[cand]
            worst = cand[np.lexsort((keys[:, 1], keys[:, 0]))[0]]
            raise PatchOverflow(tuple(int(v) for v in self.patch_keys[worst]), int(claims[worst]), K)
        return n_over

    def query(self, boxes, sigma=0.0, K=32, strict=False, threads=1):
        """Group points for ``boxes``. Returns ``(offsets, indices, n_overflow)``
        with each box's indices ascending."""
        if K < 1:
            raise ValueError("K must be >= 1")
        if self.backend != _accel.backend():
            raise RuntimeError("PatchIndex was built under a different backend")
        frames = box_frames(boxes, sigma)
        m = frames.shape[0]
        ranges = box_patch_ranges(frames, self.patch_size)
        if self.backend == "numba":
            claims, p2b, ov_patch, ov_box = _nb_claims(self._tkeys, self._tpatch, self.n_patches, ranges, K)
            n_over = self._check_overflow(claims, K, strict)
            args = (self.points, frames, claims, p2b, K, self.patch_start, self.patch_members)
            if threads <= 1 or self.n_patches < 2:
                pb, pp = _nb_emit(0, self.n_patches, *args, ov_patch, ov_box)
            else:
                shards = _shards(self.n_patches, threads)
                # one overflow slice per patch shard (possibly empty)
                ob = np.linspace(0, len(ov_patch), len(shards) + 1).astype(int)
                jobs = [(sh, (ob[t], ob[t + 1])) for t, sh in enumerate(shards)]

                def run(job):
                    (p0, p1), (o0, o1) = job
                    return _nb_emit(p0, p1, *args, ov_patch[o0:o1], ov_box[o0:o1])

                with ThreadPoolExecutor(len(jobs)) as ex:
                    parts = list(ex.map(run, jobs))
                pb = np.concatenate([p[0] for p in parts])
                pp = np.concatenate([p[1] for p in parts])
            offsets, idx = _nb_pairs_to_csr(pb, pp, m)
            return offsets, idx, n_over

        cp, cb, rank, counts = self._claims_np(ranges)
        n_over = self._check_overflow(counts, K, strict)
        # both patch2box members and overflow claimants are scanned
        bstart = np.zeros(m + 1, np.int64)
        bstart[1:] = np.cumsum(np.bincount(cb, minlength=m)) if len(cb) else 0

        def one(i):
            pids = cp[bstart[i] : bstart[i + 1]]
            if len(pids) == 0:
                return np.zeros(0, np.int64)
            cand = np.concatenate([self.patch_members[self.patch_start[p] : self.patch_start[p + 1]] for p in pids])
            hit = cand[_np_inside(self.points[cand], frames[i])]
            return np.sort(hit)

        if threads <= 1:
            parts = [one(i) for i in range(m)]
        else:
            with ThreadPoolExecutor(threads) as ex:
                parts = list(ex.map(one, range(m)))
        offsets = np.zeros(m + 1, np.int64)
        offsets[1:] = np.cumsum([len(p) for p in parts])
        idx = np.concatenate(parts) if parts else np.zeros(0, np.int64)
        return offsets, idx, n_over


def _as_points(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 4)


def _as_boxes(boxes):
    if isinstance(boxes, np.ndarray):
        return [Box3D.from_array(b) for b in boxes.reshape(-1, 7)]
    return list(boxes)


def groups_from_csr(points, boxes, offsets, indices):
    out = []
    for i, b in enumerate(boxes):
        sel = indices[offsets[i] : offsets[i + 1]]
        out.append(ProposalGroup(i, sel, to_canonical(points[sel], b).reshape(-1, 4)))
    return out


def patch_search(cloud, boxes, sigma=0.4, patch_size=1.0, K=32, strict=False, threads=1, return_overflow=False):
    """Group points of each sigma-enlarged box via the patch index.

    In permissive mode (``strict=False``) boxes past the K-th claimant of a
    patch are still grouped by a fallback scan of that patch; the number of
    such claims is logged and returned when ``return_overflow`` is set.
    """
    pts = _as_points(cloud)
    boxes = _as_boxes(boxes)
    index = PatchIndex(pts, patch_size)
    offsets, idx, n_over = index.query(boxes, sigma, K, strict, threads)
    if n_over:
        log.warning("patch2box overflow: %d claims beyond K=%d handled by fallback", n_over, K)
    groups = groups_from_csr(pts, boxes, offsets, idx)
    return (groups, n_over) if return_overflow else groups


def exhaustive_group(cloud, boxes, sigma=0.4, threads=1):
    pts = _as_points(cloud)
    boxes = _as_boxes(boxes)
    offsets, idx = exhaustive_indices(pts, boxes, sigma, threads)
    return groups_from_csr(pts, boxes, offsets, idx)
