"""``roigraph`` command line.

Subcommands read one scene (a synthetic preset or KITTI-style files), run a
stage of the pipeline and write JSON-lines (``bench`` writes CSV). Exit codes:
0 success, 1 runtime error, 2 usage error.
"""

import argparse
import json
import os
import sys

from . import _accel, bench, gradcheck
from .config import PipelineConfig, load_config, parse_overrides
from .fusion import load_feature_map
from .pipeline import RoiGraphModel, group_scene, refine_scene, sample_group
from .sampling import STRATEGIES, EmptyGroup
from .scene_io import PRESETS, Scene, dumps_boxes_jsonl, load_boxes, load_kitti_calib, load_kitti_cloud, \
    save_kitti_cloud, synth_scene


class UsageError(Exception):
    pass


def _add_scene_args(p):
    src = p.add_argument_group("scene")
    src.add_argument("--synth", choices=sorted(PRESETS), help="synthetic scene preset")
    src.add_argument("--seed", type=int, default=0, help="seed of the synthetic scene")
    src.add_argument("--cloud", help="KITTI velodyne .bin")
    src.add_argument("--proposals", help="proposal boxes (.jsonl or KITTI label file)")
    src.add_argument("--calib", help="KITTI calib file")
    src.add_argument("--feature-map", help="RGF1 feature map (for fusion)")


def _add_run_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--threads", type=int, help="worker threads (default: RG_THREADS or 1)")
    p.add_argument("--backend", choices=_accel.available_backends(), help="kernel backend")
    p.add_argument("--out", help="output file (default: stdout)")


def build_parser():
    ap = argparse.ArgumentParser(prog="roigraph", description="RoI graph refinement pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("group", help="group points of each proposal")
    _add_scene_args(p)
    _add_run_args(p)
    p.add_argument("--oracle", action="store_true", help="use the exhaustive N x M scan")

    p = sub.add_parser("sample", help="sample each proposal group")
    _add_scene_args(p)
    _add_run_args(p)
    p.add_argument("--strategy", choices=STRATEGIES, help="overrides the config's sampling strategy")

    p = sub.add_parser("pool", help="refine proposals with the full pipeline")
    _add_scene_args(p)
    _add_run_args(p)
    p.add_argument("--weights", help="directory of .rgw files (default: seeded init)")
    p.add_argument("--save-weights", help="write the model used to this directory")

    p = sub.add_parser("bench", help="timing benchmarks as CSV")
    p.add_argument("--preset", choices=bench.PRESET_NAMES, default="paper-scale")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, help="also time this many threads")
    p.add_argument("--backend", choices=_accel.available_backends(), action="append",
                   help="restrict to a backend (repeatable; default all)")
    p.add_argument("--out", help="CSV file (default: stdout)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=3, help="seeds per suite")
    p.add_argument("--suite", action="append", choices=sorted(gradcheck.SUITES), help="run only these suites")

    p = sub.add_parser("synth", help="write a synthetic scene to disk")
    p.add_argument("preset", choices=sorted(PRESETS))
    p.add_argument("outdir")
    p.add_argument("--seed", type=int, default=0)
    return ap


def load_cfg(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    try:
        changes = parse_overrides(pairs)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    return cfg.replace(**changes) if changes else cfg


def load_scene(args):
    if args.synth and (args.cloud or args.proposals):
        raise UsageError("give either --synth or --cloud/--proposals, not both")
    calib = load_kitti_calib(args.calib) if args.calib else None
    fmap = load_feature_map(args.feature_map) if args.feature_map else None
    if args.synth:
        scene = synth_scene(args.synth, args.seed)
    else:
        if not (args.cloud and args.proposals):
            raise UsageError("a scene needs --synth PRESET or both --cloud and --proposals")
        cloud = load_kitti_cloud(args.cloud)
        boxes, scores = load_boxes(args.proposals, calib)
        scene = Scene(cloud, boxes, scores=scores)
    scene.calib = calib
    scene.fmap = fmap
    return scene


def resolve_threads(flag):
    if flag is not None:
        if flag < 1:
            raise UsageError("--threads must be >= 1")
        return flag
    return _accel.thread_count(1)


def _jsonl(records):
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)


def _write(text, path):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_group(args, cfg, scene, threads):
    groups = group_scene(scene.cloud.points, scene.proposals, cfg, oracle=args.oracle, threads=threads)
    return _jsonl({"box": g.box_index, "indices": g.indices.tolist()} for g in groups)


def cmd_sample(args, cfg, scene, threads):
    if args.strategy:
        cfg = cfg.replace(sampling=args.strategy)
    groups = group_scene(scene.cloud.points, scene.proposals, cfg, threads=threads)
    out = []
    for g, box in zip(groups, scene.proposals):
        try:
            s = sample_group(cfg, g, box)
        except EmptyGroup:
            out.append({"box": g.box_index, "indices": [], "pad_count": 0, "status": "empty"})
            continue
        out.append({"box": g.box_index, "indices": s.indices.tolist(), "pad_count": int(s.pad_count),
                    "status": "ok"})
    return _jsonl(out)


def cmd_pool(args, cfg, scene, threads):
    channels = scene.fmap.channels if scene.fmap is not None else None
    model = RoiGraphModel.load(args.weights) if args.weights else RoiGraphModel.init(cfg, channels)
    if args.save_weights:
        model.save(args.save_weights)
    recs = refine_scene(scene.cloud.points, scene.proposals, model, cfg, scene.fmap, scene.calib, threads)
    return _jsonl(recs)


def cmd_bench(args):
    threads = resolve_threads(args.threads)
    rows = bench.run_preset(args.preset, args.backend, threads, args.repeats, args.seed)
    _write(bench.to_csv(rows), args.out)
    return 0


def cmd_gradcheck(args):
    names = args.suite or list(gradcheck.SUITES)
    ok = True
    for name in names:
        for seed in range(args.seeds):
            r = gradcheck.run_suite(name, seed)
            ok &= r.passed
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name} seed={r.seed} max_rel={r.max_rel_error:.2e} "
                  f"checked={r.checked} skipped={r.skipped} attempts={r.attempts}")
    return 0 if ok else 1


def cmd_synth(args):
    scene = synth_scene(args.preset, args.seed)
    os.makedirs(args.outdir, exist_ok=True)
    save_kitti_cloud(scene.cloud, os.path.join(args.outdir, "cloud.bin"))
    with open(os.path.join(args.outdir, "proposals.jsonl"), "w") as fh:
        fh.write(dumps_boxes_jsonl(scene.proposals))
    with open(os.path.join(args.outdir, "gts.jsonl"), "w") as fh:
        fh.write(dumps_boxes_jsonl(scene.gts))
    return 0


_SCENE_COMMANDS = {"group": cmd_group, "sample": cmd_sample, "pool": cmd_pool}


def run(args):
    if args.command == "bench":
        return cmd_bench(args)
    if args.command == "gradcheck":
        return cmd_gradcheck(args)
    if args.command == "synth":
        return cmd_synth(args)
    cfg = load_cfg(args)
    threads = resolve_threads(args.threads)
    scene = load_scene(args)
    _write(_SCENE_COMMANDS[args.command](args, cfg, scene, threads), args.out)
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    backend = getattr(args, "backend", None)
    try:
        if isinstance(backend, str):
            with _accel.use_backend(backend):
                return run(args)
        return run(args)
    except UsageError as e:
        print(f"roigraph: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        print(f"roigraph: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
