"""``meshray`` command line: simulate, bench scans, bench mapsize, info.

Exit codes: 0 success, 1 bad input or usage, 2 internal invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import InputError, InvariantError
from .sensors import bundled_sensor_path

log = logging.getLogger("meshray")


class UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for invariant failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(float(x)) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MESHRAY_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MESHRAY_THREADS must be an integer, got '{env}'") from None
    return None


def _apply_threads(args):
    from .bvh import set_num_threads

    n = _threads(args)
    if n is not None:
        if n < 1:
            raise UsageError(f"--threads must be at least 1, got {n}")
        set_num_threads(n)


def _require_path(text, what, parser):
    if text is None or not str(text).strip():
        parser.print_usage(sys.stderr)
        raise UsageError(f"{what} is required")
    return Path(text)


def _load_rig(text):
    from .sensors import load_sensor

    p = Path(text)
    if not p.exists() and bundled_sensor_path(text).exists():
        p = bundled_sensor_path(text)
    if not p.exists():
        raise UsageError(f"sensor config not found: {text}")
    return load_sensor(p)


def _load_map(path: Path):
    from .assets import load_scene

    if not path.exists():
        raise UsageError(f"map not found: {path}")
    scene, _ = load_scene(path)
    return scene


# -- simulate -------------------------------------------------------------------


def cmd_simulate(args, parser) -> int:
    from .assets import load_poses
    from .export import split_path, write_result_csv, write_result_ply
    from .noise import apply_noise, parse_noise
    from .simulation import AttrSelection, simulate

    map_path = _require_path(args.map, "--map", parser)
    _require_path(args.sensor, "--sensor", parser)
    poses_path = _require_path(args.poses, "--poses", parser)
    out = _require_path(args.out, "--out", parser)
    sel = AttrSelection.from_names(args.attrs)
    noises = [parse_noise(text, args.seed + k) for k, text in enumerate(args.noise or [])]

    scene = _load_map(map_path)
    rig = _load_rig(args.sensor)
    if not poses_path.exists():
        raise UsageError(f"poses file not found: {poses_path}")
    poses = load_poses(poses_path)
    _apply_threads(args)

    # noise acts on ranges and points follow the noisy ranges; --hits-only
    # also needs ranges, so they are computed even when not written
    run_sel = sel
    if (noises or args.hits_only) and not sel.ranges:
        run_sel = replace(sel, ranges=True)
    res = simulate(scene, rig, poses, run_sel)
    if noises:
        r = res.ranges
        for spec in noises:
            r = apply_noise(r, spec, rig)
        res.ranges = r
        if res.points is not None:
            o, d = rig.model.rays()
            hit = np.isfinite(r)
            pts = o[None] + np.where(hit, r, 0.0).astype(np.float64)[..., None] * d[None]
            res.points = np.where(hit[..., None], pts, np.nan).astype(np.float32)
    mask = np.isfinite(res.ranges) if args.hits_only else None
    n_hits = None if res.ranges is None else int(np.count_nonzero(np.isfinite(res.ranges)))
    if not sel.ranges:
        res.ranges = None

    out.parent.mkdir(parents=True, exist_ok=True)
    n_rows = 0
    if args.format == "csv":
        n_rows = write_result_csv(out, res, mask=mask)
        files = [out]
    elif args.split:
        files = []
        for i in range(res.n_poses):
            fp = split_path(out, i, res.n_poses)
            n_rows += write_result_ply(fp, res, poses=slice(i, i + 1), mask=mask,
                                       binary=not args.ascii, deterministic=args.deterministic)
            files.append(fp)
    else:
        n_rows = write_result_ply(out, res, with_index=res.n_poses > 1, mask=mask,
                                  binary=not args.ascii, deterministic=args.deterministic)
        files = [out]
    msg = f"{res.n_poses} poses x {res.n_rays} rays -> {n_rows} records in {len(files)} file(s)"
    if n_hits is not None:
        msg += f", {n_hits} hits"
    print(msg, file=sys.stderr)
    return 0


# -- bench ------------------------------------------------------------------------


def _bench_scene(args, parser):
    from .bench import sphere_scene

    if args.map and args.sphere_faces:
        raise UsageError("give either --map or --sphere-faces, not both")
    if args.sphere_faces:
        return sphere_scene(args.sphere_faces, args.radius), True
    return _load_map(_require_path(args.map, "--map or --sphere-faces", parser)), False


def _write_csv(path, header, rows):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def cmd_bench_scans(args, parser) -> int:
    from .bench import bench_scans, poses_in_ball, poses_in_box, scan_linearity

    if args.reps < 1:
        raise UsageError(f"--reps must be at least 1, got {args.reps}")
    scene, is_sphere = _bench_scene(args, parser)
    rig = _load_rig(args.sensor)
    _apply_threads(args)
    n = max(args.counts)
    poses = poses_in_ball(n, np.zeros(3), 0.5 * args.radius, args.seed) if is_sphere \
        else poses_in_box(n, scene.bounds(), args.seed)

    def progress(r):
        print(f"  {r.workload:>8d} scans  {r.seconds:9.3f} s  {r.scans_per_second:10.1f} scans/s",
              file=sys.stderr)

    recs = bench_scans(scene, args.counts, args.reps, rig, poses, args.seed, progress=progress)
    _write_csv(args.out, ["count", "reps", "seconds", "scans_per_second"],
               [[r.workload, r.reps, f"{r.seconds:.6f}", f"{r.scans_per_second:.3f}"] for r in recs])
    print(f"device: {recs[0].device}", file=sys.stderr)
    if len(recs) >= 2:
        (a, b, r2), (am, bm, r2m) = scan_linearity(recs)
        print(f"linear fit over all repetitions: time = {a:.4f} + {b:.6g} * N, R^2 = {r2:.5f}", file=sys.stderr)
        print(f"linear fit over per-count medians: time = {am:.4f} + {bm:.6g} * N, R^2 = {r2m:.5f}",
              file=sys.stderr)
    return 0


def cmd_bench_mapsize(args, parser) -> int:
    from .bench import bench_mapsize, step_ratios

    if args.reps < 1:
        raise UsageError(f"--reps must be at least 1, got {args.reps}")
    rig = _load_rig(args.sensor)
    _apply_threads(args)
    faces = args.faces
    if faces != sorted(faces):
        print("warning: --faces not ascending; sorted", file=sys.stderr)
        faces = sorted(faces)

    def progress(r):
        print(f"  {r.workload:>9d} faces  median {r.median_seconds:9.3f} s  {r.scans_per_second:10.1f} scans/s",
              file=sys.stderr)

    recs = bench_mapsize(faces, args.scans, args.reps, rig, args.seed, args.radius, progress=progress)
    _write_csv(args.out, ["faces", "scans", "reps", "seconds", "scans_per_second"],
               [[r.workload, r.n_scans, r.reps, f"{r.seconds:.6f}", f"{r.scans_per_second:.3f}"] for r in recs])
    print(f"device: {recs[0].device}", file=sys.stderr)
    for (a, b), q in zip(zip(recs, recs[1:]), step_ratios(recs)):
        print(f"time({b.workload}) / time({a.workload}) = {q:.3f}", file=sys.stderr)
    return 0


# -- info ---------------------------------------------------------------------------


def cmd_info(args, parser) -> int:
    from .bench import sphere_scene

    if args.sphere_faces:
        scene = sphere_scene(args.sphere_faces, args.radius)
    else:
        scene = _load_map(_require_path(args.map, "--map or --sphere-faces", parser))
    box = scene.bounds()
    print(f"geometries: {len(scene.geometries())}")
    print(f"instances: {len(scene.instances())}")
    print(f"distinct geometries: {len(scene.distinct_geometries())}")
    print(f"unique faces: {scene.stored_face_count}")
    print(f"instanced faces: {scene.instanced_face_count}")
    print(f"aabb min: {' '.join(f'{x:.6g}' for x in box.min)}")
    print(f"aabb max: {' '.join(f'{x:.6g}' for x in box.max)}")
    for g in scene.distinct_geometries():
        label = g.name or f"geometry {g.geom_id}"
        print(f"  {label}: {g.mesh.n_vertices} vertices, {g.mesh.n_faces} faces, "
              f"bvh depth {g.bvh.depth}, sah cost {g.bvh._sah_cost():.4f}")
    return 0


# -- wiring -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meshray", description="Batch LiDAR/depth-sensor simulation on triangle meshes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def threads(sp):
        sp.add_argument("--threads", type=int, help="worker threads (default: MESHRAY_THREADS or all cores)")

    s = sub.add_parser("simulate", help="simulate scans and write point clouds")
    s.add_argument("--map", help="mesh file (.obj/.ply/.stl) or directory")
    s.add_argument("--sensor", default="vlp16", help="sensor TOML, or a bundled name (default: vlp16)")
    s.add_argument("--poses", help="CSV of x,y,z,qx,qy,qz,qw base poses")
    s.add_argument("--attrs", default="points", help="comma list: hits,ranges,points,normals,prim_ids,"
                                                      "geom_ids,inst_ids, 'ids' or 'all' (default: points)")
    s.add_argument("--out", help="output file")
    s.add_argument("--format", choices=("ply", "csv"), default="ply")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--split", action="store_true", help="one PLY per pose")
    g.add_argument("--merged", action="store_true", help="one PLY for all poses (default)")
    s.add_argument("--noise", action="append", help="e.g. gaussian:sigma=0.01, relgaussian:a=0.005,b=0.002,exp=1, "
                                                    "dust:rho=0.01 (repeatable)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--hits-only", action="store_true", help="drop measurements without a return")
    s.add_argument("--ascii", action="store_true", help="ascii PLY instead of binary")
    s.add_argument("--deterministic", action="store_true", help="omit the timestamp comment")
    threads(s)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", help="benchmarks")
    bsub = b.add_subparsers(dest="bench_command", parser_class=_Parser)

    bs = bsub.add_parser("scans", help="wall time versus number of scans")
    bs.add_argument("--map")
    bs.add_argument("--sphere-faces", type=int)
    bs.add_argument("--radius", type=float, default=10.0, help="sphere radius in m (default 10)")
    bs.add_argument("--counts", type=_int_list, default=[1000, 2000, 4000, 8000])
    bs.add_argument("--reps", type=int, default=5)
    bs.add_argument("--seed", type=int, default=0)
    bs.add_argument("--sensor", default="vlp16")
    bs.add_argument("--out", help="CSV path (default: stdout)")
    threads(bs)
    bs.set_defaults(func=cmd_bench_scans)

    bm = bsub.add_parser("mapsize", help="wall time versus map size")
    bm.add_argument("--faces", type=_int_list, default=[10000, 40000, 160000, 640000, 2560000])
    bm.add_argument("--scans", type=int, default=10000)
    bm.add_argument("--reps", type=int, default=3)
    bm.add_argument("--radius", type=float, default=10.0)
    bm.add_argument("--seed", type=int, default=0)
    bm.add_argument("--sensor", default="vlp16")
    bm.add_argument("--out", help="CSV path (default: stdout)")
    threads(bm)
    bm.set_defaults(func=cmd_bench_mapsize)

    i = sub.add_parser("info", help="describe a map")
    i.add_argument("--map")
    i.add_argument("--sphere-faces", type=int)
    i.add_argument("--radius", type=float, default=10.0)
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args, parser)
    except InputError as e:
        print(f"meshray: error: {e}", file=sys.stderr)
        return 1
    except InvariantError as e:
        print(f"meshray: internal error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"meshray: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
