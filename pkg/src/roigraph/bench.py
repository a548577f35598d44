"""Timing harness: patch search vs the exhaustive scan, FPS vs DFVS.

Every timing is the median of ``repeats`` runs after one warm-up call (the
warm-up also triggers numba compilation). Rows are emitted for each
backend and both thread modes; ``speedup`` is baseline time over method
time measured at the same backend and thread count.
"""

import csv
import io
import statistics
import time

import numpy as np

from . import _accel
from .geom import Box3D
from .grouping import PatchIndex, ProposalGroup, exhaustive_indices
from .nn import make_rng
from .sampling import dfvs, fps_sample
from .scene_io import PRESETS, SynthSpec, synth_scene

COLUMNS = ("method", "backend", "threads", "N", "M", "wall_time_ms", "speedup")
PRESET_NAMES = ("paper-scale", "sweep", "sampling", "quick")


def median_ms(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def _grouping_rows(points, boxes, cfg_sigma, patch_size, K, backends, thread_modes, repeats):
    rows = []
    n, m = len(points), len(boxes)
    for be in backends:
        with _accel.use_backend(be):
            for threads in thread_modes:
                base = median_ms(lambda: exhaustive_indices(points, boxes, cfg_sigma, threads), repeats)

                def patch():
                    PatchIndex(points, patch_size).query(boxes, cfg_sigma, K, False, threads)

                fast = median_ms(patch, repeats)
                rows.append(dict(method="exhaustive", backend=be, threads=threads, N=n, M=m,
                                 wall_time_ms=base, speedup=1.0))
                rows.append(dict(method="patch_search", backend=be, threads=threads, N=n, M=m,
                                 wall_time_ms=fast, speedup=base / fast))
    return rows


def grouping_bench(scene, backends=None, threads=(1,), repeats=20, sigma=0.4, patch_size=1.0, K=32):
    points = scene.cloud.points
    return _grouping_rows(points, scene.proposals, sigma, patch_size, K, backends or _accel.available_backends(),
                          threads, repeats)


def sampling_group(n=70_000, seed=0, distance=10.0):
    """One dense proposal group of ``n`` points in a car-sized box."""
    rng = make_rng(seed)
    box = Box3D(distance, 0.0, 0.0, 4.0, 1.8, 1.6, 0.0)
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * box.size
    canon = np.hstack([local, rng.uniform(0, 1, size=(n, 1))])
    return box, ProposalGroup(0, np.arange(n), canon)


def sampling_bench(backends=None, repeats=20, n=70_000, count=256, lam=0.18, delta=50.0):
    box, group = sampling_group(n)
    rows = []
    for be in backends or _accel.available_backends():
        with _accel.use_backend(be):
            t_fps = median_ms(lambda: fps_sample(group, count), repeats)
            t_dfvs = median_ms(lambda: dfvs(group, box, count, lam, delta), repeats)
        rows.append(dict(method="fps", backend=be, threads=1, N=n, M=1, wall_time_ms=t_fps, speedup=1.0))
        rows.append(dict(method="dfvs", backend=be, threads=1, N=n, M=1, wall_time_ms=t_dfvs,
                         speedup=t_fps / t_dfvs))
    return rows


def sweep_scenes(seed=0):
    for n_boxes, total in ((10, 20_000), (30, 60_000), (60, 120_000), (60, 180_000)):
        spec = SynthSpec(n_boxes=n_boxes, points_per_box=1200, density="distance", clutter_mode="radial",
                         extent=75.0, distance_range=(4.0, 70.0), proposals_per_box=8, total_points=total)
        yield synth_scene(spec, seed)


def run_preset(name, backends=None, threads=None, repeats=20, seed=0):
    """Rows for a named preset; ``threads`` adds a multi-thread mode beside 1."""
    modes = (1,) if not threads or threads == 1 else (1, threads)
    if name == "paper-scale":
        return grouping_bench(synth_scene(PRESETS["paper-scale"], seed), backends, modes, repeats)
    if name == "quick":
        return grouping_bench(synth_scene(PRESETS["small"], seed), backends, modes, repeats)
    if name == "sweep":
        rows = []
        for scene in sweep_scenes(seed):
            rows += grouping_bench(scene, backends, modes, repeats)
        return rows
    if name == "sampling":
        return sampling_bench(backends, repeats)
    raise ValueError(f"unknown bench preset {name!r}; expected one of {PRESET_NAMES}")


def to_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        r = dict(r)
        r["wall_time_ms"] = f"{r['wall_time_ms']:.3f}"
        r["speedup"] = f"{r['speedup']:.2f}"
        w.writerow(r)
    return buf.getvalue()
