"""Extend an existing feature map with a new session anchored by its relocalizations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .features import FeatureSet
from .geometry import Pose
from .mapping import MapStore
from .relocalization import RelocConfig, SessionResult, run_session


@dataclass
class MergeResult:
    store: MapStore
    trajectory: list[Pose] | None
    anchored: bool
    session: SessionResult

    @property
    def anchors(self) -> dict[int, Pose]:
        return self.session.anchors


def odometry_chain(deltas) -> list[Pose]:
    poses = [Pose.identity()]
    for d in list(deltas)[1:]:
        poses.append(poses[-1] @ d)
    return poses


def _interpolate(c0: Pose, c1: Pose, w: np.ndarray) -> list[Pose]:
    rots = Rotation.from_matrix(np.stack([c0.rotation, c1.rotation]))
    slerp = Slerp([0.0, 1.0], rots)(np.clip(w, 0.0, 1.0)).as_matrix()
    out = []
    for R, a in zip(slerp, w):
        t = (1.0 - a) * c0.translation + a * c1.translation
        out.append(Pose(R, t))
    return out


def distribute_corrections(odometry: list[Pose], anchors: dict[int, Pose]) -> list[Pose]:
    """Correct an odometry chain so it passes through every anchor pose.

    The correction ``C_a = anchor_a @ odometry_a^-1`` is linearly (translation)
    and spherically (rotation) interpolated between anchors by frame index and
    held constant outside the anchored span.
    """
    if not anchors:
        raise ValueError("at least one anchor is required")
    keys = sorted(anchors)
    corr = {k: anchors[k] @ odometry[k].inverse() for k in keys}
    n = len(odometry)
    C: list[Pose | None] = [None] * n
    for k in range(0, keys[0] + 1):
        C[k] = corr[keys[0]]
    for k in range(keys[-1], n):
        C[k] = corr[keys[-1]]
    for a, b in zip(keys[:-1], keys[1:]):
        if b - a > 1:
            w = (np.arange(a + 1, b) - a) / (b - a)
            C[a + 1 : b] = _interpolate(corr[a], corr[b], w)
        C[a] = corr[a]
        C[b] = corr[b]
    out = [c @ o for c, o in zip(C, odometry)]
    # anchors are met exactly, not just up to round-off
    for k in keys:
        out[k] = anchors[k]
    return out


def extend_map(base: MapStore, frames, gps, cfg: RelocConfig = RelocConfig(), map_frames=None, voxel: float | None = 0.2) -> MergeResult:
    """Relocalize a new session against ``base`` and merge its features.

    ``frames`` are the per-frame feature sets used for localization;
    ``map_frames`` (default the same) are the ones appended to the map.
    """
    if len(base) == 0:
        raise ValueError("base map is empty")
    frames = list(frames)
    map_frames = list(map_frames) if map_frames is not None else frames
    if len(map_frames) != len(frames):
        raise ValueError("map_frames must align with frames")
    session = run_session(frames, base, gps, cfg, reloc=True)
    anchors = session.anchors
    if not anchors:
        return MergeResult(base.copy(), None, False, session)
    corrected = distribute_corrections(odometry_chain(session.odometry_deltas), anchors)
    offset = len(base.poses)
    pts = [base.points] + [p.apply(f.xyz).astype(np.float32) for f, p in zip(map_frames, corrected)]
    types = [base.types] + [f.types for f in map_frames]
    fids = [base.frame_ids] + [np.full(len(f), offset + i, np.uint32) for i, f in enumerate(map_frames)]
    merged = MapStore(np.vstack(pts), np.concatenate(types), np.concatenate(fids), list(base.poses) + corrected, base.filtered)
    if voxel:
        merged = merged.dedup(voxel)
    return MergeResult(merged, corrected, True, session)


def feature_count(frames: list[FeatureSet]) -> int:
    return sum(len(f) for f in frames)
