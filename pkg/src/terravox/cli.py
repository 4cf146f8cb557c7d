"""Command-line entry point: ``terravox <command> [options]``.

Commands: ``metrics``, ``sample``, ``aggregate``, ``augment``, ``plan`` and
``split``. Global flags (``--seed``, ``--threads``, ``--quiet``) may be given
before or after the command name.

Exit codes: 0 success, 1 usage or input error, 2 generation finished but
produced no voxels.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import AggregationConfig, contribution_counts, load_views, scatter_aggregate
from .augment import crop_with_pose, flip_with_pose, jagged_perturb, normal_drop, roughen
from .datasetops import decode_semantic_rgb, height_split, read_manifest
from .flow import (GenerationConfig, GuidanceConfig, ScheduleConfig, builtin_field_pair,
                   coarse_to_fine_generate, sliding_window_generate)
from .geo import (AdaLevelConfig, SpiralConfig, TopPoseConfig, lift_semantic_plane, load_heightfield,
                  load_poses, plan_adalevel, plan_building_spiral, plan_top_pose, pose_to_json)
from .grid import SparseVoxelGrid, downsample_coords, iou, set_op
from .svox import encode_svox, read_svox

logger = logging.getLogger("terravox")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_EMPTY = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # exit 2 is reserved for empty generations, so usage errors exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default if suppress else 0,
                        help="RNG seed for stochastic commands (default 0)")
    parser.add_argument("--threads", type=int, default=default if suppress else 1,
                        help="worker threads (results do not depend on it)")
    parser.add_argument("--quiet", action="store_true", default=default if suppress else False,
                        help="only log warnings and errors")


def _triple(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected x,y,z")
    return tuple(float(p) for p in parts)


def _box(text: str) -> tuple[int, ...]:
    parts = text.split(",")
    if len(parts) != 6:
        raise argparse.ArgumentTypeError("expected x0,y0,z0,x1,y1,z1")
    return tuple(int(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)

    p = _Parser(prog="terravox", description="Sparse voxel scene tools.")
    p.add_argument("--version", action="version", version=f"terravox {__version__}")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("metrics", parents=[common], help="IoU and accuracy between two SVOX grids")
    m.add_argument("--pred", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--level", type=int, default=0, help="compare after downsampling by 2**level")

    s = sub.add_parser("sample", parents=[common], help="generate a voxel structure")
    s.add_argument("--mode", choices=("coarse2fine", "sliding"), default="coarse2fine")
    s.add_argument("--field", required=True, help="shape-oracle or seeded-random")
    s.add_argument("--target", help="SVOX target for shape-oracle (at resolution/8 or resolution)")
    s.add_argument("--cond", default="none", help="semantic PNG (palette colors) or 'none'")
    s.add_argument("--resolution", type=int, default=256)
    s.add_argument("--steps", type=int, default=25)
    s.add_argument("--shift", type=float, default=3.0)
    s.add_argument("--cfg", type=float, default=3.0)
    s.add_argument("--tau", type=float, default=0.3)
    s.add_argument("--frac", type=float, default=0.5)
    s.add_argument("--overlap", type=int, default=64, help="sliding mode window overlap in voxels")
    s.add_argument("--out", required=True)
    s.add_argument("--diagnostics", help="diagnostics JSON path (default: OUT with .json suffix)")

    a = sub.add_parser("aggregate", parents=[common], help="fuse per-view features onto elements")
    a.add_argument("--views", required=True, help="directory with manifest.json")
    a.add_argument("--elements", type=int, required=True)
    a.add_argument("--normals", help="per-element normals, flat f32 (N x 3)")
    a.add_argument("--coords", help="SVOX grid with one voxel per element; output becomes SVOX")
    a.add_argument("--z-far", type=float, default=2.0)
    a.add_argument("--tau-s", type=float, default=3.0)
    a.add_argument("--tau-d", type=float, default=3.0)
    a.add_argument("--eps", type=float, default=1e-6)
    a.add_argument("--out", required=True)

    g = sub.add_parser("augment", parents=[common], help="apply one augmentation to an SVOX grid")
    g.add_argument("--op", required=True, choices=("jagged", "roughen", "normal-drop", "flip", "crop"))
    g.add_argument("--in", dest="inp", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--jagged-mode", choices=("symmetric", "lower"), default="symmetric")
    g.add_argument("--dl", type=int, default=3)
    g.add_argument("--sl", type=int, default=2)
    g.add_argument("--sigma", type=float, default=0.9)
    g.add_argument("--closing", type=int, default=3)
    g.add_argument("--noise-deg", type=float, default=5.0)
    g.add_argument("--axis", type=int, default=0)
    g.add_argument("--box", type=_box)
    g.add_argument("--poses", help="pose JSON transformed along with flip/crop")
    g.add_argument("--poses-out")

    pl = sub.add_parser("plan", parents=[common], help="plan camera poses")
    pl.add_argument("--pattern", required=True, choices=("top", "adalevel", "spiral"))
    pl.add_argument("--center", type=_triple)
    pl.add_argument("--heightfield")
    pl.add_argument("--altitude", type=float, default=500.0)
    pl.add_argument("--building-height", type=float, default=0.0)
    pl.add_argument("--points", type=int, default=36)
    pl.add_argument("--turns", type=float, default=3.0)
    pl.add_argument("--levels", type=int, default=9)
    pl.add_argument("--per-ring", type=int, default=6)
    pl.add_argument("--out", required=True)

    sp = sub.add_parser("split", parents=[common], help="height-stratified train/val split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--groups", type=int, default=20)
    sp.add_argument("--ratio", type=float, default=1 / 120)
    sp.add_argument("--min-val", type=int, default=8)
    sp.add_argument("--out-train", required=True)
    sp.add_argument("--out-val", required=True)
    return p


# -- helpers -------------------------------------------------------------------

def _write_bytes(path: str, data: bytes) -> None:
    Path(path).write_bytes(data)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


def _load_condition(source: str) -> np.ndarray | None:
    if source.lower() == "none":
        return None
    from PIL import Image

    try:
        with Image.open(source) as im:
            rgb = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read condition image {source}: {exc}") from None
    # image rows map to x, columns to y
    return decode_semantic_rgb(rgb)


def _domain_size(a: SparseVoxelGrid, b: SparseVoxelGrid) -> int | None:
    if a.bounded and b.bounded and a.resolution == b.resolution:
        return a.resolution ** 3
    return None


# -- commands --------------------------------------------------------------------

def cmd_metrics(args) -> int:
    pred, gt = read_svox(args.pred), read_svox(args.gt)
    if args.level < 0:
        raise UsageError("--level must be >= 0")
    if args.level:
        f = 2 ** args.level
        pred, gt = downsample_coords(pred, f), downsample_coords(gt, f)
    out = {"iou": iou(pred, gt), "level": args.level}
    cells = _domain_size(pred, gt)
    diff = len(set_op(pred, gt, "union")) - len(set_op(pred, gt, "intersection"))
    if cells is not None:
        out["accuracy"] = (cells - diff) / cells
        out["resolution"] = pred.resolution
    else:
        union = len(set_op(pred, gt, "union"))
        out["accuracy"] = 1.0 if union == 0 else (union - diff) / union
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.resolution % 8 or args.resolution <= 0:
        raise UsageError("--resolution must be a positive multiple of 8")
    cfg = GenerationConfig(resolution=args.resolution, schedule=ScheduleConfig(args.steps, args.shift),
                           guidance=GuidanceConfig(args.cfg), seed=args.seed, tau=args.tau, frac=args.frac)
    target = None
    if args.field == "shape-oracle":
        if not args.target:
            raise UsageError("shape-oracle needs --target")
        target = read_svox(args.target)
        if target.bounded and target.resolution == args.resolution:
            target = downsample_coords(target, 8)
    elif args.field != "seeded-random":
        raise UsageError(f"unknown field {args.field!r}; expected shape-oracle or seeded-random")
    class_field, latent_field = builtin_field_pair(args.field, target=target, seed=args.seed)
    sem = _load_condition(args.cond)

    if args.mode == "coarse2fine":
        condition = None if sem is None else lift_semantic_plane(sem, args.resolution)
        res = coarse_to_fine_generate(class_field, latent_field, condition, cfg)
        grid, diag, empty = res.latents, dict(res.diagnostics), res.empty
        diag["empty_stage"] = res.empty_stage
    else:
        if sem is None:
            raise UsageError("sliding mode needs --cond")
        res = sliding_window_generate(sem, class_field, latent_field, cfg, overlap=args.overlap)
        grid, empty = res.grid, res.empty
        diag = dict(res.diagnostics)
        diag["tile_diagnostics"] = [t.diagnostics for t in res.tiles]
    diag.update(field=args.field, mode=args.mode, empty=bool(empty))

    payload = encode_svox(grid)
    diag_path = args.diagnostics or str(Path(args.out).with_suffix(".json"))
    _write_bytes(args.out, payload)
    _write_bytes(diag_path, _json_bytes(diag))
    logger.info("wrote %d voxels to %s", len(grid), args.out)
    if empty:
        logger.warning("generation produced no voxels")
        return EXIT_EMPTY
    return EXIT_OK


def cmd_aggregate(args) -> int:
    views, manifest = load_views(args.views)
    if args.elements <= 0:
        raise UsageError("--elements must be positive")
    if "element_count" in manifest and int(manifest["element_count"]) != args.elements:
        raise UsageError(f"manifest says {manifest['element_count']} elements, --elements is {args.elements}")
    normals = None
    if args.normals:
        normals = np.fromfile(args.normals, dtype="<f4").astype(np.float64)
        if normals.size != 3 * args.elements:
            raise UsageError(f"{args.normals}: expected {3 * args.elements} values, got {normals.size}")
        normals = normals.reshape(-1, 3)
    coords = read_svox(args.coords) if args.coords else None
    if coords is not None and len(coords) != args.elements:
        raise UsageError(f"--coords has {len(coords)} voxels for {args.elements} elements")
    cfg = AggregationConfig(args.z_far, args.tau_s, args.tau_d, args.eps)
    feats = scatter_aggregate(views, args.elements, cfg, normals)
    for i, n in enumerate(contribution_counts(views)):
        logger.info("view %d: %d contributing pixels", i, n)
    if coords is not None:
        data = encode_svox(coords.with_features(feats.astype(np.float32)))
    else:
        data = np.ascontiguousarray(feats, dtype="<f4").tobytes()
    _write_bytes(args.out, data)
    return EXIT_OK


def cmd_augment(args) -> int:
    g = read_svox(args.inp)
    rng = np.random.default_rng(args.seed)
    poses = []
    cams = []
    if args.poses:
        loaded = load_poses(args.poses)
        poses = [p for p, _ in loaded]
        cams = [c for _, c in loaded]
    if args.op == "jagged":
        out = jagged_perturb(g, rng, args.jagged_mode)
    elif args.op == "roughen":
        out = roughen(g, args.dl, args.sl)
    elif args.op == "normal-drop":
        if g.channels < 3:
            raise UsageError("normal-drop needs at least three feature channels (normals last)")
        out = normal_drop(g, args.sigma, rng, args.closing, args.noise_deg)
    elif args.op == "flip":
        out, poses = flip_with_pose(g, args.axis, poses)
    else:
        if args.box is None:
            raise UsageError("crop needs --box")
        out, poses = crop_with_pose(g, args.box, poses)
    payload = encode_svox(out)
    pose_payload = None
    if args.poses_out:
        pose_payload = json.dumps([pose_to_json(p, c) for p, c in zip(poses, cams)], indent=1).encode()
    _write_bytes(args.out, payload)
    if pose_payload is not None:
        _write_bytes(args.poses_out, pose_payload)
    logger.info("%s: %d -> %d voxels", args.op, len(g), len(out))
    return EXIT_OK


def cmd_plan(args) -> int:
    if args.pattern == "top":
        if args.center is None:
            raise UsageError("top needs --center")
        poses = plan_top_pose(args.center, TopPoseConfig(altitude=args.altitude))
    elif args.pattern == "adalevel":
        if not args.heightfield:
            raise UsageError("adalevel needs --heightfield")
        hf = load_heightfield(args.heightfield)
        poses = plan_adalevel(hf, AdaLevelConfig(levels=args.levels, per_ring=args.per_ring))
    else:
        if args.center is None:
            raise UsageError("spiral needs --center")
        if args.points < 0:
            raise UsageError("--points must be >= 0")
        poses = plan_building_spiral(args.center, args.building_height,
                                     SpiralConfig(turns=args.turns, points=args.points))
    _write_bytes(args.out, json.dumps([pose_to_json(p) for p in poses], indent=1).encode())
    logger.info("planned %d poses", len(poses))
    return EXIT_OK


def cmd_split(args) -> int:
    records = read_manifest(args.manifest)
    if not records:
        raise UsageError("manifest is empty")
    train, val = height_split(records, args.groups, args.ratio, args.min_val, np.random.default_rng(args.seed))
    _write_bytes(args.out_train, (json.dumps(train) + "\n").encode())
    _write_bytes(args.out_val, (json.dumps(val) + "\n").encode())
    logger.info("split %d scenes: %d train, %d val", len(records), len(train), len(val))
    return EXIT_OK


COMMANDS = {
    "metrics": cmd_metrics,
    "sample": cmd_sample,
    "aggregate": cmd_aggregate,
    "augment": cmd_augment,
    "plan": cmd_plan,
    "split": cmd_split,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    if args.threads < 1:
        print("terravox: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    if args.seed < 0:
        print("terravox: error: --seed must be >= 0", file=sys.stderr)
        return EXIT_ERROR
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError, OSError, KeyError) as exc:
        print(f"terravox {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
