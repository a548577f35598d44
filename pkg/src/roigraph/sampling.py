"""Per-proposal point sampling: dynamic farthest voxel sampling and baselines.

DFVS voxelizes a proposal's canonical points at a distance-dependent voxel
size, keeps one representative point per non-empty voxel (through an
open-addressing hash with quadratic probing), then runs farthest point
sampling over the representatives.

Indices in a :class:`SampleResult` are scene point indices (the group's
``indices`` entries), not positions inside the group.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import _accel
from ._accel import njit

DEFAULT_CAPACITY = 4099
_H1, _H2, _H3 = 73856093, 19349663, 83492791


class EmptyGroup(ValueError):
    pass


@dataclass
class SampleResult:
    indices: np.ndarray
    pad_count: int

    @property
    def unique_count(self):
        return len(self.indices) - self.pad_count


def dynamic_voxel_size(box, lam=0.18, delta=50.0):
    """``lam * exp(-|center| / delta)``."""
    if lam <= 0 or delta <= 0:
        raise ValueError("lam and delta must be > 0")
    dist = math.sqrt(box.cx * box.cx + box.cy * box.cy + box.cz * box.cz)
    return lam * math.exp(-dist / delta)


def _pad(selected, count):
    selected = np.asarray(selected, dtype=np.int64)
    n = len(selected)
    if n >= count:
        return SampleResult(selected[:count].copy(), 0)
    reps = selected[np.arange(count) % n]
    return SampleResult(reps, count - n)


# ---------------------------------------------------------------------------
# voxel hash


def is_prime(n):
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


def next_prime(n):
    while not is_prime(n):
        n += 1
    return n


@njit
def _nb_is_prime(n):
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


@njit
def _nb_next_prime(n):
    while not _nb_is_prime(n):
        n += 1
    return n


@njit
def _nb_slot_hash(gx, gy, gz, capacity):
    return ((gx * 73856093) ^ (gy * 19349663) ^ (gz * 83492791)) % capacity


@njit
def _nb_probe(keys, used, gx, gy, gz):
    """Slot holding ``g`` or the first free slot on its probe sequence; -1
    when the quadratic sequence is exhausted."""
    cap = keys.shape[0]
    h = _nb_slot_hash(gx, gy, gz, cap)
    for i in range(cap):
        s = (h + i * i) % cap
        if not used[s]:
            return s
        if keys[s, 0] == gx and keys[s, 1] == gy and keys[s, 2] == gz:
            return s
    return -1


@njit
def _nb_rehash(keys, reps, used, capacity):
    nkeys = np.empty((capacity, 3), np.int64)
    nreps = np.full(capacity, -1, np.int64)
    nused = np.zeros(capacity, np.bool_)
    for s in range(keys.shape[0]):
        if used[s]:
            t = _nb_probe(nkeys, nused, keys[s, 0], keys[s, 1], keys[s, 2])
            if t < 0:
                return nkeys, nreps, nused, False
            nkeys[t] = keys[s]
            nreps[t] = reps[s]
            nused[t] = True
    return nkeys, nreps, nused, True


@njit
def _nb_insert_all(keys, reps, used, count, grid, values):
    """Insert ``grid[i] -> values[i]`` keeping the first value per key.
    Grows to the next prime >= 2x when the table would exceed capacity-1
    entries or a probe sequence finds no slot."""
    slot_of = np.empty(grid.shape[0], np.int64)
    for i in range(grid.shape[0]):
        gx, gy, gz = grid[i, 0], grid[i, 1], grid[i, 2]
        while True:
            s = _nb_probe(keys, used, gx, gy, gz)
            if s >= 0 and (used[s] or count + 1 <= keys.shape[0] - 1):
                break
            cap = _nb_next_prime(2 * keys.shape[0])
            while True:
                keys, reps, used, ok = _nb_rehash(keys, reps, used, cap)
                if ok:
                    break
                cap = _nb_next_prime(2 * cap)
        if not used[s]:
            keys[s, 0] = gx
            keys[s, 1] = gy
            keys[s, 2] = gz
            reps[s] = values[i]
            used[s] = True
            count += 1
        slot_of[i] = s
    return keys, reps, used, count, slot_of


class VoxelHash:
    """Open-addressing map from 3D grid index to a representative point.

    ``slot = (hash(g) + i**2) mod capacity`` with the classic xor spatial
    hash. Both backends run the same table (numba-jitted or plain Python)
    so slot layouts agree.
    """

    def __init__(self, capacity=DEFAULT_CAPACITY):
        if capacity < 2:
            raise ValueError("capacity must be >= 2")
        self.keys = np.zeros((capacity, 3), np.int64)
        self.reps = np.full(capacity, -1, np.int64)
        self.used = np.zeros(capacity, bool)
        self.count = 0

    @property
    def capacity(self):
        return self.keys.shape[0]

    def __len__(self):
        return self.count

    @staticmethod
    def slot_hash(g, capacity):
        gx, gy, gz = (int(v) for v in g)
        h = (np.int64(gx) * np.int64(_H1)) ^ (np.int64(gy) * np.int64(_H2)) ^ (np.int64(gz) * np.int64(_H3))
        return int(h % np.int64(capacity))

    def insert_many(self, grid, values):
        grid = np.ascontiguousarray(np.asarray(grid, dtype=np.int64).reshape(-1, 3))
        values = np.asarray(values, dtype=np.int64).reshape(-1)
        with np.errstate(over="ignore"):
            self.keys, self.reps, self.used, self.count, slots = _nb_insert_all(
                self.keys, self.reps, self.used, self.count, grid, values
            )
        return slots

    def insert(self, g, value):
        """Insert and return the stored representative (the existing one when
        ``g`` is already present)."""
        slot = self.insert_many([g], [value])[0]
        return int(self.reps[slot])

    def get(self, g, default=None):
        gx, gy, gz = (int(v) for v in g)
        with np.errstate(over="ignore"):
            s = _nb_probe(self.keys, self.used, np.int64(gx), np.int64(gy), np.int64(gz))
        if s < 0 or not self.used[s]:
            return default
        return int(self.reps[s])

    def items(self):
        occ = np.nonzero(self.used)[0]
        return [(tuple(int(v) for v in self.keys[s]), int(self.reps[s])) for s in occ]


# ---------------------------------------------------------------------------
# voxelize


def grid_indices(canonical, voxel_size):
    if voxel_size <= 0:
        raise ValueError("voxel size must be > 0")
    return np.floor(np.asarray(canonical)[:, :3] / voxel_size).astype(np.int64)


def voxelize(group, voxel_size, capacity=DEFAULT_CAPACITY, rng=None):
    """Non-empty voxels of a group as ``(grid (V, 3), rep_positions (V,))``.

    ``rep_positions`` index into the group (not the scene). The
    representative is the lowest-index point of each voxel, or a seeded
    random member when ``rng`` is given. Output is ordered by
    representative position.
    """
    canonical = group.canonical if hasattr(group, "canonical") else np.asarray(group)
    n = canonical.shape[0]
    if n == 0:
        return np.zeros((0, 3), np.int64), np.zeros(0, np.int64)
    grid = grid_indices(canonical, voxel_size)
    order = np.arange(n, dtype=np.int64) if rng is None else rng.permutation(n).astype(np.int64)
    if _accel.backend() == "numba":
        table = VoxelHash(capacity)
        table.insert_many(grid[order], order)
        occ = np.nonzero(table.used)[0]
        reps = table.reps[occ]
    else:
        _, first = np.unique(grid[order], axis=0, return_index=True)
        reps = order[first]
    reps = np.sort(reps)
    return grid[reps], reps


# ---------------------------------------------------------------------------
# farthest point sampling


@njit
def _nb_fps(xyz, count, seed):
    n = xyz.shape[0]
    out = np.empty(count, np.int64)
    mind = np.full(n, np.inf)
    cur = seed
    for t in range(count):
        out[t] = cur
        mind[cur] = -1.0
        cx, cy, cz = xyz[cur, 0], xyz[cur, 1], xyz[cur, 2]
        best = -1
        bestd = -1.0
        for j in range(n):
            if mind[j] < 0.0:
                continue
            dx = xyz[j, 0] - cx
            dy = xyz[j, 1] - cy
            dz = xyz[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
            if mind[j] > bestd:
                bestd = mind[j]
                best = j
        cur = best
    return out


def _np_fps(xyz, count, seed):
    n = xyz.shape[0]
    out = np.empty(count, np.int64)
    mind = np.full(n, np.inf)
    taken = np.zeros(n, bool)
    cur = seed
    for t in range(count):
        out[t] = cur
        taken[cur] = True
        diff = xyz - xyz[cur]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(mind, d, out=mind)
        mind[taken] = -1.0
        cur = int(np.argmax(mind))
    return out


def fps(points, count, seed_index=0):
    """Greedy max-min selection over ``points[:, :3]``; ties go to the lowest
    position. Returns ``min(count, n)`` positions, starting at ``seed_index``."""
    xyz = np.ascontiguousarray(np.asarray(points, dtype=np.float64)[:, :3])
    n = xyz.shape[0]
    if n == 0:
        raise EmptyGroup("fps on an empty point set")
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= seed_index < n:
        raise IndexError("seed_index out of range")
    count = min(count, n)
    if _accel.backend() == "numba":
        return _nb_fps(xyz, count, seed_index)
    return _np_fps(xyz, count, seed_index)


# ---------------------------------------------------------------------------
# strategies


def _require(group, count):
    if count < 1:
        raise ValueError("sample count must be >= 1")
    if len(group.indices) == 0:
        raise EmptyGroup(f"group of box {group.box_index} has no points")


def fps_sample(group, count):
    _require(group, count)
    pos = fps(group.canonical, count)
    return _pad(group.indices[pos], count)


def dfvs(group, box, count=256, lam=0.18, delta=50.0, capacity=DEFAULT_CAPACITY, rng=None):
    """Dynamic farthest voxel sampling for one proposal."""
    _require(group, count)
    v = dynamic_voxel_size(box, lam, delta)
    _, reps = voxelize(group, v, capacity, rng)
    sel = fps(group.canonical[reps], count)
    return _pad(group.indices[reps[sel]], count)


def random_sample(group, count, rng_seed=0):
    _require(group, count)
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    n = len(group.indices)
    pos = rng.permutation(n)[: min(count, n)]
    return _pad(group.indices[pos], count)


def voxel_sample(group, count, voxel_size, capacity=DEFAULT_CAPACITY):
    """First ``count`` voxel representatives in lexicographic grid order."""
    _require(group, count)
    grid, reps = voxelize(group, voxel_size, capacity)
    order = np.lexsort((grid[:, 2], grid[:, 1], grid[:, 0]))
    return _pad(group.indices[reps[order]], count)


def dynamic_voxel_sample(group, box, count, lam=0.18, delta=50.0, capacity=DEFAULT_CAPACITY):
    return voxel_sample(group, count, dynamic_voxel_size(box, lam, delta), capacity)


STRATEGIES = ("rps", "fps", "vs", "dvs", "dfvs")


def sample(strategy, group, box, count, lam=0.18, delta=50.0, capacity=DEFAULT_CAPACITY, voxel_size=None, seed=0,
           random_representative=False):
    """Dispatch by strategy name (``rps | fps | vs | dvs | dfvs``)."""
    if strategy == "rps":
        return random_sample(group, count, seed)
    if strategy == "fps":
        return fps_sample(group, count)
    if strategy == "vs":
        return voxel_sample(group, count, lam if voxel_size is None else voxel_size, capacity)
    if strategy == "dvs":
        return dynamic_voxel_sample(group, box, count, lam, delta, capacity)
    if strategy == "dfvs":
        rng = np.random.Generator(np.random.PCG64(seed)) if random_representative else None
        return dfvs(group, box, count, lam, delta, capacity, rng)
    raise ValueError(f"unknown sampling strategy {strategy!r}; expected one of {STRATEGIES}")
