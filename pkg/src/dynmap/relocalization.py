"""Initial pose from a coarse position prior, and per-frame re-localization against a feature map."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .features import FeatureSet
from .geometry import PointCloud, Pose, rot_z
from .mapping import EmptySubmapError, MapStore, extract_submap
from .odometry import IcpParams, icp_register

INITIAL, CONTINUOUS = "initial", "continuous"


class Method(str, Enum):
    LEGO = "lego"
    RELOC_FULL = "reloc-full"
    RELOC_FILTERED = "reloc-filtered"


@dataclass(frozen=True)
class RelocConfig:
    initial_threshold: float = 0.4
    continuous_threshold: float = 0.3
    submap_radius: float = 60.0
    sweep_step_deg: float = 45.0
    gate_enabled: bool = True
    gate_translation: float = 5.0  # m
    gate_rotation_deg: float = 15.0
    grid_spacing: float = 10.0  # trial positions when no prior exists
    icp: IcpParams = IcpParams()
    # the sweep starts metres away from the truth, so it widens the rejection distance first
    initial_icp: IcpParams = IcpParams(coarse_dists=(8.0, 4.0, 2.0), coarse_iterations=10)
    odometry_icp: IcpParams = IcpParams(min_inlier_fraction=0.2)
    odometry_window: int = 1  # previous frames pooled as the odometry target
    reloc_every: int = 1

    def __post_init__(self):
        if self.sweep_step_deg <= 0 or 360.0 % self.sweep_step_deg > 1e-9:
            raise ValueError("sweep step must divide 360 degrees")
        if self.odometry_window < 1 or self.reloc_every < 1:
            raise ValueError("odometry_window and reloc_every must be >= 1")


@dataclass(frozen=True)
class RelocEvent:
    frame: int
    kind: str
    pose_before: Pose
    pose_after: Pose
    fitting_score: float
    accepted: bool

    def __post_init__(self):
        if self.kind not in (INITIAL, CONTINUOUS):
            raise ValueError(f"unknown relocation kind {self.kind!r}")


@dataclass(frozen=True)
class SweepResult:
    pose: Pose | None
    fitting_score: float
    bin_deg: float | None
    scores: tuple[float, ...] = ()
    poses: tuple[Pose, ...] = field(default=(), repr=False)

    @property
    def accepted(self) -> bool:
        return self.pose is not None


def _height_prior(store: MapStore, xy) -> float:
    if not store.poses:
        return 0.0
    t = np.array([p.translation for p in store.poses])
    k = int(np.argmin(np.sum((t[:, :2] - np.asarray(xy)[:2]) ** 2, axis=1)))
    return float(t[k, 2])


def _wrap_deg(a):
    return (np.asarray(a) + 180.0) % 360.0 - 180.0


def _sweep_at(features: FeatureSet, store: MapStore, xy, cfg: RelocConfig) -> SweepResult:
    try:
        sub = extract_submap(store, xy, cfg.submap_radius)
    except EmptySubmapError:
        return SweepResult(None, math.inf, None)
    if len(sub) < 10 or len(features) == 0:
        return SweepResult(None, math.inf, None)
    z = _height_prior(store, xy)
    bins = np.arange(0.0, 360.0, cfg.sweep_step_deg)
    scores, poses = [], []
    for yaw in bins:
        init = Pose(rot_z(math.radians(yaw)), [xy[0], xy[1], z])
        res = icp_register(features, sub.tree, init, cfg.initial_icp)
        scores.append(res.fitting_score if res.ok else math.inf)
        poses.append(res.transform)
    best = int(np.argmin(scores))
    if not math.isfinite(scores[best]):
        return SweepResult(None, math.inf, None, tuple(scores), tuple(poses))
    # bins that reached the same solution are interchangeable; credit the one
    # nearest the refined heading
    same = [k for k in range(len(bins)) if math.isfinite(scores[k]) and poses[k].distance_to(poses[best]) < 0.5 and poses[k].angle_to(poses[best]) < math.radians(2.0)]
    heading = math.degrees(poses[best].yaw)
    win = min(same, key=lambda k: (abs(float(_wrap_deg(bins[k] - heading))), k))
    pose = poses[best] if scores[best] < cfg.initial_threshold else None
    return SweepResult(pose, scores[best], float(bins[win]), tuple(scores), tuple(poses))


def initial_pose_estimate(features: FeatureSet, store: MapStore, gps=None, cfg: RelocConfig = RelocConfig()) -> SweepResult:
    """Rotation sweep plus ICP at the prior position; ``pose`` is None unless the best score passes."""
    if gps is not None:
        return _sweep_at(features, store, np.asarray(gps, dtype=np.float64)[:2], cfg)
    if len(store) == 0:
        return SweepResult(None, math.inf, None)
    lo = store.xyz[:, :2].min(axis=0)
    hi = store.xyz[:, :2].max(axis=0)
    best = SweepResult(None, math.inf, None)
    for x in np.arange(lo[0], hi[0] + 1e-9, cfg.grid_spacing):
        for y in np.arange(lo[1], hi[1] + 1e-9, cfg.grid_spacing):
            res = _sweep_at(features, store, (x, y), cfg)
            if res.fitting_score < best.fitting_score:
                best = res
    return best


def within_gate(before: Pose, after: Pose, cfg: RelocConfig) -> bool:
    if not cfg.gate_enabled:
        return True
    return before.distance_to(after) <= cfg.gate_translation and before.angle_to(after) <= math.radians(cfg.gate_rotation_deg)


def relocalize_step(features: FeatureSet, store: MapStore, current: Pose, cfg: RelocConfig = RelocConfig(), frame: int = 0) -> tuple[Pose | None, RelocEvent]:
    """ICP of the frame against the submap around ``current``; the corrected pose when it passes."""
    try:
        sub = extract_submap(store, current.translation, cfg.submap_radius)
    except EmptySubmapError:
        return None, RelocEvent(frame, CONTINUOUS, current, current, math.inf, False)
    if len(sub) < 10 or len(features) == 0:
        return None, RelocEvent(frame, CONTINUOUS, current, current, math.inf, False)
    res = icp_register(features, sub.tree, current, cfg.icp)
    ok = res.ok and res.fitting_score < cfg.continuous_threshold and within_gate(current, res.transform, cfg)
    event = RelocEvent(frame, CONTINUOUS, current, res.transform, res.fitting_score, ok)
    return (res.transform if ok else None), event


# ------------------------------------------------------------------ sessions


@dataclass
class SessionResult:
    trajectory: list[Pose]
    events: list[RelocEvent]
    odometry_deltas: list[Pose]  # frame k-1 -> frame k, identity for frame 0
    first_reloc: int | None
    method: str = ""

    @property
    def initialized(self) -> bool:
        return self.first_reloc is not None

    @property
    def reloc_count(self) -> int:
        return sum(e.accepted for e in self.events)

    @property
    def anchors(self) -> dict[int, Pose]:
        """Accepted relocation pose per frame (the last one wins)."""
        return {e.frame: e.pose_after for e in self.events if e.accepted}


class _LocalMap:
    """Sliding window of recent frames' features, kept in world coordinates."""

    def __init__(self, size: int):
        self.size = size
        self.frames: list[np.ndarray] = []

    def push(self, xyz_world: np.ndarray):
        self.frames.append(xyz_world)
        del self.frames[: -self.size]

    def cloud_in(self, pose: Pose) -> np.ndarray:
        pts = np.vstack(self.frames)
        return pose.inverse().apply(pts)


def _gps_position(fix) -> np.ndarray | None:
    if fix is None:
        return None
    pos = getattr(fix, "position", fix)
    if getattr(fix, "valid", True) is False:
        return None
    return np.asarray(pos, dtype=np.float64)[:2]


def _odometry_delta(target_xyz: np.ndarray, curr: FeatureSet, prior: Pose, cfg: RelocConfig) -> Pose:
    if len(target_xyz) < 10 or len(curr) == 0:
        return prior
    res = icp_register(curr, PointCloud(target_xyz), prior, cfg.odometry_icp)
    if not res.ok or res.inlier_fraction < cfg.odometry_icp.min_inlier_fraction:
        return prior
    return res.transform


def run_session(frames, store: MapStore | None, gps, cfg: RelocConfig = RelocConfig(), reloc: bool = True, method: str = "", init_store: MapStore | None = None) -> SessionResult:
    """Localize a sequence of per-frame feature sets.

    Until the initial estimate succeeds each pose is the latest GPS position
    (heading undefined, reported as zero yaw). Afterwards every frame gets an
    odometry step and, when ``reloc`` is set, a relocalization attempt whose
    accepted result replaces the pose. Without ``reloc`` the initial alignment
    still happens (``first_reloc`` records it) but no events are emitted.
    ``init_store`` overrides the map used
    for the initial estimate (defaults to ``store``).
    """
    frames = list(frames)
    gps = list(gps) if gps is not None else [None] * len(frames)
    if len(gps) != len(frames):
        raise ValueError(f"{len(frames)} frames but {len(gps)} GPS entries")
    init_store = init_store if init_store is not None else store
    trajectory: list[Pose] = []
    events: list[RelocEvent] = []
    deltas: list[Pose] = []
    first = None
    last_fix = next((p for p in map(_gps_position, gps) if p is not None), None)
    local = _LocalMap(cfg.odometry_window)
    odo_pose = Pose.identity()  # pure odometry chain in its own frame
    prior = Pose.identity()
    z_prior = _height_prior(init_store, last_fix) if init_store is not None and last_fix is not None else 0.0
    for k, feats in enumerate(frames):
        # odometry runs from the start so that corrections can be spread later
        if k == 0:
            delta = Pose.identity()
        else:
            delta = _odometry_delta(local.cloud_in(odo_pose), feats, prior, cfg)
            prior = delta
        deltas.append(delta)
        odo_pose = odo_pose @ delta
        local.push(odo_pose.apply(feats.xyz))

        fix = _gps_position(gps[k])
        if fix is not None:
            last_fix = fix
        if first is None:
            pose = None
            if fix is not None and init_store is not None and len(init_store):
                sweep = initial_pose_estimate(feats, init_store, fix, cfg)
                before = Pose.from_xyz_yaw(fix[0], fix[1], z_prior)
                after = sweep.pose if sweep.pose is not None else (sweep.poses[int(np.argmin(sweep.scores))] if sweep.scores else before)
                if reloc:
                    # odometry-only runs still need the alignment, but it is not a relocation
                    events.append(RelocEvent(k, INITIAL, before, after, sweep.fitting_score, sweep.accepted))
                pose = sweep.pose
            if pose is None:
                xy = last_fix if last_fix is not None else np.zeros(2)
                trajectory.append(Pose.from_xyz_yaw(xy[0], xy[1], z_prior))
                continue
            first = k
            trajectory.append(pose)
            continue
        pose = trajectory[-1] @ delta
        if reloc and store is not None and (k - first) % cfg.reloc_every == 0:
            corrected, event = relocalize_step(feats, store, pose, cfg, k)
            events.append(event)
            if corrected is not None:
                pose = corrected
        trajectory.append(pose)
    return SessionResult(trajectory, events, deltas, first, method)


def run_method(method, full_frames, filtered_frames, full_map: MapStore, filtered_map: MapStore, gps, cfg: RelocConfig = RelocConfig()) -> SessionResult:
    """The three compared variants: odometry only, or relocalization against the full or filtered map."""
    method = Method(method)
    if method is Method.LEGO:
        return run_session(full_frames, full_map, gps, cfg, reloc=False, method=method.value)
    if method is Method.RELOC_FULL:
        return run_session(full_frames, full_map, gps, cfg, reloc=True, method=method.value)
    return run_session(filtered_frames, filtered_map, gps, cfg, reloc=True, method=method.value)


def odometry_only(res: SessionResult, method: str = Method.LEGO.value) -> SessionResult:
    """The odometry-only run over the same frames, map and GPS as ``res``.

    Up to the initial alignment both runs are identical, and odometry never
    depends on relocalization, so chaining ``res``'s deltas from its first
    pose reproduces ``run_session(..., reloc=False)`` exactly.
    """
    if res.first_reloc is None:
        return SessionResult(list(res.trajectory), [], list(res.odometry_deltas), None, method)
    traj = list(res.trajectory[: res.first_reloc + 1])
    for delta in res.odometry_deltas[res.first_reloc + 1 :]:
        traj.append(traj[-1] @ delta)
    return SessionResult(traj, [], list(res.odometry_deltas), res.first_reloc, method)


def run_methods(full_frames, filtered_frames, full_map: MapStore, filtered_map: MapStore, gps, cfg: RelocConfig = RelocConfig()) -> dict[str, SessionResult]:
    """All three variants; the odometry-only baseline is derived from the full-map run."""
    full = run_method(Method.RELOC_FULL, full_frames, filtered_frames, full_map, filtered_map, gps, cfg)
    return {
        Method.LEGO.value: odometry_only(full),
        Method.RELOC_FULL.value: full,
        Method.RELOC_FILTERED.value: run_method(Method.RELOC_FILTERED, full_frames, filtered_frames, full_map, filtered_map, gps, cfg),
    }


def write_events(path, events) -> None:
    """One line per event: frame, kind, accepted, fitting score, then the 12 pose-after values."""
    with open(path, "w") as fh:
        for e in events:
            vals = " ".join(f"{v:.9g}" for v in e.pose_after.row12())
            fh.write(f"{e.frame},{e.kind},{int(e.accepted)},{e.fitting_score:.9g},{vals}\n")


def read_events(path) -> list[tuple[int, str, bool, float, Pose]]:
    from .geometry import FormatError

    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(",")
            try:
                frame, kind, acc, score = int(parts[0]), parts[1], bool(int(parts[2])), float(parts[3])
                pose = Pose.from_row12([float(v) for v in parts[4].split()], fix_rotation=True)
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}:{n}: malformed event line") from exc
            if kind not in (INITIAL, CONTINUOUS):
                raise FormatError(f"{path}:{n}: unknown event kind {kind!r}")
            out.append((frame, kind, acc, score, pose))
    return out
