"""Command-line pipeline: simulate, segment, build-map, relocalize, merge, evaluate.

Every stage reads and writes plain files so partial runs can be inspected.
Options may also come from a ``--config`` file of ``key = value`` lines whose
keys are the long option names; explicit flags override the file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluation import align_fitness, summary_rows, trajectory_mae, write_errors_csv, write_summary_csv
from .features import FeatureConfig
from .fusion import FilterConfig, filter_movables, write_labels
from .geometry import FormatError, Pose, read_poses, read_scan, write_poses, write_scan
from .mapping import build_gt_map, load_map, preprocess_frame, save_map
from .merge import extend_map
from .odometry import IcpParams
from .projection import read_boxes, write_boxes
from .relocalization import Method, RelocConfig, read_events, run_session, write_events
from .segmentation import OracleSegmenter, RasterSegmenter

log = logging.getLogger("dynmap")


class InputError(Exception):
    """Bad user input: unknown flag, missing file, malformed content."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ file helpers


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _scan_files(directory) -> list[Path]:
    d = _require(directory, "scan directory")
    files = sorted(d.glob("*.bin"))
    if not files:
        raise InputError(f"no .bin scans in {d}")
    return files


def _load_scans(directory) -> list:
    return [read_scan(f, frame_id=i) for i, f in enumerate(_scan_files(directory))]


def write_gps(path, fixes) -> None:
    """``frame x y`` for every frame that has a fix."""
    with open(path, "w") as fh:
        for i, fix in enumerate(fixes):
            if fix is not None and fix.valid:
                fh.write(f"{i} {fix.position[0]:.6f} {fix.position[1]:.6f}\n")


def read_gps(path, n_frames: int) -> list:
    fixes: list = [None] * n_frames
    with open(_require(path, "GPS file")) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                frame, x, y = int(parts[0]), float(parts[1]), float(parts[2])
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}:{n}: expected 'frame x y'") from exc
            if len(parts) != 3:
                raise FormatError(f"{path}:{n}: expected 3 fields, got {len(parts)}")
            if 0 <= frame < n_frames:
                fixes[frame] = np.array([x, y])
    return fixes


def _boxes_for(path, n_frames: int):
    if path is None:
        return None
    by_frame = read_boxes(_require(path, "boxes file"))
    return [by_frame.get(i, []) for i in range(n_frames)]


def _segmenter(args):
    if getattr(args, "front_rasters", None) or getattr(args, "bev_rasters", None):
        def paths(d):
            if not d:
                return {}
            files = sorted(_require(d, "raster directory").glob("*.bin"))
            return {i: f for i, f in enumerate(files)}

        return RasterSegmenter(paths(args.front_rasters), paths(args.bev_rasters))
    return OracleSegmenter(args.flip_prob, args.seed)


def _filter_cfg(args) -> FilterConfig:
    sectors = args.sectors
    if args.front_rasters or args.bev_rasters:
        # external rasters describe the unrotated scan only
        sectors = 1
    return FilterConfig(
        link_dist=args.link_dist,
        min_points=args.min_points,
        score_threshold=args.score_threshold,
        bev_weight=args.bev_weight,
        front_weight=args.front_weight,
        candidate_threshold=args.candidate_threshold,
        removal_radius=args.removal_radius,
        sectors=sectors,
    )


def _feature_cfg(args) -> FeatureConfig:
    return FeatureConfig(c_edge=args.c_edge, c_plane=args.c_plane)


def _reloc_cfg(args) -> RelocConfig:
    icp = IcpParams(args.icp_max_iterations, args.icp_translation_tol, args.icp_rotation_tol_deg, args.icp_max_corr_dist)
    return RelocConfig(
        initial_threshold=args.initial_threshold,
        continuous_threshold=args.continuous_threshold,
        submap_radius=args.submap_radius,
        sweep_step_deg=args.sweep_step_deg,
        gate_enabled=not args.no_gate,
        gate_translation=args.gate_translation,
        gate_rotation_deg=args.gate_rotation_deg,
        icp=icp,
        initial_icp=replace(icp, coarse_dists=tuple(args.initial_coarse_dists)),
        odometry_icp=replace(icp, min_inlier_fraction=0.2),
        odometry_window=args.odometry_window,
    )


def _frame_features(scans, args, filtered: bool, boxes=None):
    seg = _segmenter(args) if filtered else None
    if filtered and isinstance(seg, OracleSegmenter) and boxes is None:
        raise InputError("filtering with the oracle segmenter needs --boxes")
    boxes = boxes or [None] * len(scans)
    return [preprocess_frame(c, filtered, seg, b, _filter_cfg(args), _feature_cfg(args)) for c, b in zip(scans, boxes)]


# --------------------------------------------------------------------- commands


def cmd_simulate(args) -> None:
    from .world import WorldConfig, generate_world, gps_stream, route_poses, simulate_scan, snake_route

    cfg = WorldConfig(occupancy=args.occupancy, label_margin=args.label_margin)
    session_seed = args.session_seed if args.session_seed is not None else args.seed
    world = generate_world(cfg, args.world_seed, session_seed)
    poses = route_poses(snake_route(cfg), args.frames, args.start, args.spacing)
    out = Path(args.out)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    boxes = {}
    for i, pose in enumerate(poses):
        cloud, b = simulate_scan(world, pose, args.noise_sigma, frame_id=i)
        write_scan(out / "scans" / f"{i:06d}.bin", cloud)
        boxes[i] = b
    write_poses(out / "poses.txt", poses)
    write_gps(out / "gps.txt", gps_stream(poses, args.gps_sigma, args.gps_rate, seed=session_seed))
    write_boxes(out / "boxes.txt", boxes.items())
    log.info("simulated %d frames into %s (%d cars)", len(poses), out, len(world.cars))


def cmd_segment(args) -> None:
    scans = _load_scans(args.scans)
    boxes = _boxes_for(args.boxes, len(scans))
    seg = _segmenter(args)
    if isinstance(seg, OracleSegmenter) and boxes is None:
        raise InputError("the oracle segmenter needs --boxes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(scans):
        res = filter_movables(cloud, seg, boxes[i] if boxes else None, _filter_cfg(args))
        write_scan(out / f"{i:06d}.bin", res.cloud)
        if args.labels:
            write_labels(out / f"{i:06d}.label", res.removed)


def cmd_build_map(args) -> None:
    scans = _load_scans(args.scans)
    poses = read_poses(_require(args.poses, "pose file"))
    if len(poses) != len(scans):
        raise InputError(f"{len(scans)} scans but {len(poses)} poses in {args.poses}")
    boxes = _boxes_for(args.boxes, len(scans))
    seg = _segmenter(args) if args.filtered else None
    if args.filtered and isinstance(seg, OracleSegmenter) and boxes is None:
        raise InputError("--filtered with the oracle segmenter needs --boxes")
    store = build_gt_map(scans, poses, args.filtered, seg, boxes, _filter_cfg(args), _feature_cfg(args), args.voxel)
    save_map(args.out, store)
    log.info("map with %d points written to %s", len(store), args.out)


def cmd_relocalize(args) -> None:
    scans = _load_scans(args.scans)
    store = load_map(_require(args.map, "map file"))
    gps = read_gps(args.gps, len(scans)) if args.gps else [None] * len(scans)
    method = Method(args.method)
    filtered = method is Method.RELOC_FILTERED
    frames = _frame_features(scans, args, filtered, _boxes_for(args.boxes, len(scans)))
    res = run_session(frames, store, gps, _reloc_cfg(args), reloc=method is not Method.LEGO, method=method.value)
    write_poses(args.out_trajectory, res.trajectory)
    if args.out_events:
        write_events(args.out_events, res.events)
    first = "" if res.first_reloc is None else res.first_reloc
    print(f"{method.value} first_reloc={first} accepted={res.reloc_count}")


def cmd_merge(args) -> None:
    scans = _load_scans(args.scans)
    base = load_map(_require(args.map, "map file"))
    gps = read_gps(args.gps, len(scans)) if args.gps else [None] * len(scans)
    frames = _frame_features(scans, args, args.filtered, _boxes_for(args.boxes, len(scans)))
    res = extend_map(base, frames, gps, _reloc_cfg(args), voxel=args.voxel)
    save_map(args.out, res.store)
    if args.out_trajectory and res.trajectory is not None:
        write_poses(args.out_trajectory, res.trajectory)
    if not res.anchored:
        log.warning("session never relocalized; base map written unchanged")


def cmd_evaluate(args) -> None:
    gt = read_poses(_require(args.gt, "ground-truth pose file"))
    reports = {}
    for spec in args.est:
        label, _, path = spec.rpartition("=")
        label = label or Path(path).stem
        est = read_poses(_require(path, "trajectory file"))
        events = []
        if args.events:
            for ev in args.events:
                elabel, _, epath = ev.rpartition("=")
                if (elabel or Path(epath).stem) == label:
                    events = [_EventRow(*row) for row in read_events(_require(epath, "event log"))]
        first = None
        for fr in args.first_reloc or []:
            flabel, _, value = fr.rpartition("=")
            if flabel == label:
                try:
                    first = int(value)
                except ValueError as exc:
                    raise InputError(f"--first-reloc {fr!r}: expected label=frame") from exc
        try:
            reports[label] = trajectory_mae(est, gt, events, label, first)
        except ValueError as exc:
            raise InputError(f"{path}: {exc}") from exc
        if args.errors_dir:
            Path(args.errors_dir).mkdir(parents=True, exist_ok=True)
            write_errors_csv(Path(args.errors_dir) / f"{label}_errors.csv", reports[label])
        if args.align:
            print(f"{label} align_fitness {align_fitness(est, gt):.6f}")
    rows = summary_rows(args.map_name, args.sequence, reports, args.baseline)
    write_summary_csv(args.summary, rows)
    for row in rows:
        print(",".join(str(v) for v in row))


class _EventRow:
    def __init__(self, frame, kind, accepted, score, pose):
        self.frame, self.kind, self.accepted, self.fitting_score, self.pose_after = frame, kind, accepted, score, pose


# ------------------------------------------------------------------------ parser


def _add_filter_opts(p) -> None:
    g = p.add_argument_group("segmentation and filtering")
    g.add_argument("--boxes", help="per-frame box file (ground truth for the oracle segmenter)")
    g.add_argument("--flip-prob", type=float, default=0.0, help="oracle label-flip probability (default 0.0)")
    g.add_argument("--front-rasters", help="directory of front-view probability rasters, one per frame")
    g.add_argument("--bev-rasters", help="directory of BEV probability rasters, one per frame")
    g.add_argument("--link-dist", type=float, default=0.5, help="cluster link distance in m (default 0.5)")
    g.add_argument("--min-points", type=int, default=50, help="minimum cluster size (default 50)")
    g.add_argument("--score-threshold", type=float, default=0.13, help="cluster score threshold (default 0.13)")
    g.add_argument("--bev-weight", type=float, default=0.2, help="BEV weight in the cluster score (default 0.2)")
    g.add_argument("--front-weight", type=float, default=0.1, help="front weight in the cluster score (default 0.1)")
    g.add_argument("--candidate-threshold", type=float, default=0.5, help="per-point candidate probability (default 0.5)")
    g.add_argument("--removal-radius", type=float, default=0.10, help="radius around removed points in m (default 0.10)")
    g.add_argument("--sectors", type=int, default=8, help="yaw-rotated view copies covering 360 deg (default 8; 1 = front crop only)")
    f = p.add_argument_group("features")
    f.add_argument("--c-edge", type=float, default=0.5, help="edge smoothness threshold (default 0.5)")
    f.add_argument("--c-plane", type=float, default=0.05, help="planar smoothness threshold (default 0.05)")


def _add_reloc_opts(p) -> None:
    g = p.add_argument_group("relocalization")
    g.add_argument("--initial-threshold", type=float, default=0.4, help="initial-estimate fitting score gate in m^2 (default 0.4)")
    g.add_argument("--continuous-threshold", type=float, default=0.3, help="continuous fitting score gate in m^2 (default 0.3)")
    g.add_argument("--submap-radius", type=float, default=60.0, help="submap radius in m (default 60)")
    g.add_argument("--sweep-step-deg", type=float, default=45.0, help="heading sweep step (default 45)")
    g.add_argument("--no-gate", action="store_true", help="disable the correction sanity gate")
    g.add_argument("--gate-translation", type=float, default=5.0, help="largest accepted correction in m (default 5)")
    g.add_argument("--gate-rotation-deg", type=float, default=15.0, help="largest accepted rotation correction (default 15)")
    g.add_argument("--odometry-window", type=int, default=1, help="previous frames pooled as odometry target (default 1)")
    g.add_argument("--icp-max-iterations", type=int, default=30, help="ICP iterations (default 30)")
    g.add_argument("--icp-translation-tol", type=float, default=1e-3, help="ICP translation convergence in m (default 1e-3)")
    g.add_argument("--icp-rotation-tol-deg", type=float, default=0.01, help="ICP rotation convergence in deg (default 0.01)")
    g.add_argument("--icp-max-corr-dist", type=float, default=1.0, help="ICP correspondence rejection in m (default 1.0)")
    g.add_argument("--initial-coarse-dists", type=float, nargs="*", default=[8.0, 4.0, 2.0], help="coarse rejection stages for the initial sweep (default 8 4 2)")


def _global_opts(suppress: bool) -> argparse.ArgumentParser:
    # accepted before or after the subcommand; the subcommand copy must not
    # clobber a value given before it, hence SUPPRESS defaults there
    g = _Parser(add_help=False)
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g.add_argument("--config", default=d(None), help="key=value file of defaults (keys are long option names)")
    g.add_argument("--seed", type=int, default=d(0), help="master seed (default 0)")
    g.add_argument("--threads", type=int, default=d(1), help="worker cap (default 1; stages run single-threaded)")
    g.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynmap", description=__doc__.splitlines()[0], parents=[_global_opts(False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_global_opts(True)]

    s = sub.add_parser("simulate", help="generate a world session: scans, poses, GPS and boxes", parents=common)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--world-seed", type=int, default=0, help="static layout seed (default 0)")
    s.add_argument("--session-seed", type=int, default=None, help="parked-car seed (default --seed)")
    s.add_argument("--occupancy", type=float, default=0.3, help="slot occupancy probability (default 0.3)")
    s.add_argument("--frames", type=int, default=100, help="frames to simulate (default 100)")
    s.add_argument("--start", type=float, default=0.0, help="route offset in m (default 0)")
    s.add_argument("--spacing", type=float, default=0.5, help="metres between frames (default 0.5)")
    s.add_argument("--noise-sigma", type=float, default=0.02, help="range noise in m (default 0.02)")
    s.add_argument("--gps-sigma", type=float, default=3.0, help="GPS noise in m (default 3.0)")
    s.add_argument("--gps-rate", type=int, default=10, help="one GPS fix every N frames (default 10)")
    s.add_argument("--label-margin", type=float, default=0.1, help="box label inflation in m (default 0.1)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("segment", help="remove movable objects from scans", parents=common)
    s.add_argument("--scans", required=True, help="directory of .bin scans")
    s.add_argument("--out", required=True, help="output directory for filtered scans")
    s.add_argument("--labels", action="store_true", help="also write per-point u8 label sidecars")
    _add_filter_opts(s)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("build-map", help="feature map from scans posed by ground truth", parents=common)
    s.add_argument("--scans", required=True)
    s.add_argument("--poses", required=True, help="ground-truth pose file (12 values per line)")
    s.add_argument("--out", required=True, help="map file to write")
    s.add_argument("--filtered", action="store_true", help="remove movable objects before feature extraction")
    s.add_argument("--voxel", type=float, default=0.2, help="deduplication voxel in m (default 0.2)")
    _add_filter_opts(s)
    s.set_defaults(func=cmd_build_map)

    s = sub.add_parser("relocalize", help="localize a session against a map", parents=common)
    s.add_argument("--scans", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--gps", help="GPS fix file (frame x y)")
    s.add_argument("--method", choices=[m.value for m in Method], default=Method.RELOC_FILTERED.value)
    s.add_argument("--out-trajectory", required=True)
    s.add_argument("--out-events", help="relocation event log")
    _add_filter_opts(s)
    _add_reloc_opts(s)
    s.set_defaults(func=cmd_relocalize)

    s = sub.add_parser("merge", help="extend a map with a new session", parents=common)
    s.add_argument("--map", required=True, help="base map file")
    s.add_argument("--scans", required=True)
    s.add_argument("--gps")
    s.add_argument("--out", required=True, help="merged map file")
    s.add_argument("--out-trajectory", help="corrected session trajectory")
    s.add_argument("--filtered", action="store_true", help="filter the session's scans before merging")
    s.add_argument("--voxel", type=float, default=0.2)
    _add_filter_opts(s)
    _add_reloc_opts(s)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("evaluate", help="trajectory error reports", parents=common)
    s.add_argument("--gt", required=True, help="ground-truth pose file")
    s.add_argument("--est", required=True, action="append", help="[label=]trajectory file; repeatable")
    s.add_argument("--events", action="append", help="[label=]event log matching an --est label; repeatable")
    s.add_argument("--first-reloc", action="append", help="label=frame for runs whose alignment is not in an event log; repeatable")
    s.add_argument("--summary", required=True, help="summary CSV to write")
    s.add_argument("--errors-dir", help="directory for per-frame error CSVs")
    s.add_argument("--baseline", default="lego", help="label improvements are measured against (default lego)")
    s.add_argument("--map-name", default="map")
    s.add_argument("--sequence", default="seq")
    s.add_argument("--align", action="store_true", help="also print align_fitness per trajectory")
    s.set_defaults(func=cmd_evaluate)
    return p


def read_config(path) -> dict[str, str]:
    out = {}
    with open(_require(path, "config file")) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("_", "-")] = v
    return out


def _config_argv(cfg: dict[str, str], parser: argparse.ArgumentParser, command: str) -> list[str]:
    """Turn config entries into flags for ``command``; unknown keys are errors."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    known = {}
    for action in sub._actions + parser._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                known[opt[2:]] = action
    argv = []
    for key, value in cfg.items():
        if key not in known or key == "config":
            raise InputError(f"config key {key!r} is not an option of '{command}'")
        action = known[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(f"--{key}")
            elif value.lower() not in ("0", "false", "no", "off"):
                raise InputError(f"config key {key!r} expects a boolean, got {value!r}")
        elif action.nargs in ("*", "+"):
            argv += [f"--{key}", *value.split()]
        elif isinstance(action, argparse._AppendAction):
            for v in value.split(","):
                argv += [f"--{key}", v.strip()]
        else:
            argv += [f"--{key}", value]
    return argv


def _merge_config(argv: list[str], parser) -> list[str]:
    # config entries go right after the subcommand so explicit flags, parsed later, win
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return argv
    cfg = read_config(known.config)
    ns, _ = parser.parse_known_args(argv)
    idx = argv.index(ns.command)
    return argv[: idx + 1] + _config_argv(cfg, parser, ns.command) + argv[idx + 1 :]


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _merge_config(argv, parser)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        os.environ.setdefault("OMP_NUM_THREADS", str(max(1, args.threads)))
        args.func(args)
        return 0
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
