"""Feature map built from posed frames, with submap queries and a binary file format."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .features import FeatureConfig, FeatureSet, frame_features
from .fusion import FilterConfig, filter_movables
from .geometry import FormatError, KdTree, PointCloud, Pose

MAGIC = b"DMAP"
VERSION = 1
EDGE, PLANAR = 0, 1
_RECORD = np.dtype([("xyz", "<f4", (3,)), ("type", "u1"), ("frame", "<u4")])


class EmptySubmapError(LookupError):
    """No map point lies within the requested radius."""


@dataclass(frozen=True)
class Submap:
    cloud: PointCloud
    tree: KdTree
    types: np.ndarray

    def __len__(self) -> int:
        return len(self.cloud)


@dataclass
class MapStore:
    """World-frame feature points tagged with type and source frame.

    Positions are kept at float32 precision so that the file round trip is exact.
    """

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))
    types: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))
    frame_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))
    poses: list[Pose] = field(default_factory=list)
    filtered: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.types = np.asarray(self.types, dtype=np.uint8)
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.uint32)
        if not (len(self.points) == len(self.types) == len(self.frame_ids)):
            raise ValueError("points, types and frame ids must have equal length")
        self._xy_tree = None

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points.astype(np.float64)

    def append(self, features: FeatureSet, pose: Pose) -> int:
        """Add one frame's features at ``pose``; returns the frame's index in the pose table."""
        fid = len(self.poses)
        self.poses.append(pose)
        world = pose.apply(features.xyz).astype(np.float32)
        self.points = np.vstack([self.points, world])
        self.types = np.concatenate([self.types, features.types])
        self.frame_ids = np.concatenate([self.frame_ids, np.full(len(world), fid, np.uint32)])
        self._xy_tree = None
        return fid

    def dedup(self, voxel: float = 0.2) -> MapStore:
        """Keep the first point of every ``voxel``-sized cell."""
        if len(self) == 0:
            return self.copy()
        keys = np.floor(self.xyz / voxel).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        keep = np.sort(first)
        return MapStore(self.points[keep], self.types[keep], self.frame_ids[keep], list(self.poses), self.filtered)

    def copy(self) -> MapStore:
        return MapStore(self.points.copy(), self.types.copy(), self.frame_ids.copy(), list(self.poses), self.filtered)

    def _tree2d(self):
        if self._xy_tree is None and len(self):
            self._xy_tree = cKDTree(self.xyz[:, :2])
        return self._xy_tree

    def submap_indices(self, center, radius: float = 60.0) -> np.ndarray:
        if radius <= 0:
            raise ValueError("submap radius must be positive")
        if len(self) == 0:
            return np.zeros(0, dtype=np.int64)
        c = np.asarray(center, dtype=np.float64)[:2]
        return np.sort(np.asarray(self._tree2d().query_ball_point(c, radius), dtype=np.int64))

    def equals(self, other: MapStore) -> bool:
        return (
            self.filtered == other.filtered
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.types, other.types)
            and np.array_equal(self.frame_ids, other.frame_ids)
            and len(self.poses) == len(other.poses)
            and all(np.array_equal(a.row12(), b.row12()) for a, b in zip(self.poses, other.poses))
        )


def extract_submap(store: MapStore, center, radius: float = 60.0) -> Submap:
    """Map points within ``radius`` (horizontal) of ``center``, with a fresh index."""
    idx = store.submap_indices(center, radius)
    if len(idx) == 0:
        raise EmptySubmapError(f"no map points within {radius} m of {np.asarray(center)[:2]}")
    cloud = PointCloud(store.xyz[idx])
    return Submap(cloud, KdTree(cloud.xyz), store.types[idx])


def map_from_features(features, poses, filtered: bool = False, voxel: float | None = 0.2) -> MapStore:
    features, poses = list(features), list(poses)
    if len(features) != len(poses):
        raise ValueError(f"{len(features)} frames but {len(poses)} poses")
    store = MapStore(filtered=filtered)
    chunks = [p.apply(f.xyz).astype(np.float32) for f, p in zip(features, poses)]
    if chunks:
        store = MapStore(
            np.vstack(chunks),
            np.concatenate([f.types for f in features]),
            np.concatenate([np.full(len(c), i, np.uint32) for i, c in enumerate(chunks)]),
            poses,
            filtered,
        )
    return store.dedup(voxel) if voxel else store


def preprocess_frame(cloud: PointCloud, filter: bool = False, segmenter=None, boxes=None, filter_cfg: FilterConfig = FilterConfig(), feature_cfg: FeatureConfig = FeatureConfig()) -> FeatureSet:
    """Optional movable filtering, then ground removal and feature extraction."""
    if filter:
        if segmenter is None:
            raise ValueError("filtering needs a segmenter")
        cloud = filter_movables(cloud, segmenter, boxes, filter_cfg).cloud
    return frame_features(cloud, feature_cfg)


def build_gt_map(
    frames,
    poses,
    filter: bool = False,
    segmenter=None,
    boxes=None,
    filter_cfg: FilterConfig = FilterConfig(),
    feature_cfg: FeatureConfig = FeatureConfig(),
    voxel: float | None = 0.2,
) -> MapStore:
    """Feature map from scans posed by ground truth.

    ``boxes`` is an optional per-frame list of box lists (needed by the oracle segmenter).
    """
    frames, poses = list(frames), list(poses)
    if len(frames) != len(poses):
        raise ValueError(f"{len(frames)} frames but {len(poses)} poses")
    boxes = boxes if boxes is not None else [None] * len(frames)
    feats = [preprocess_frame(f, filter, segmenter, b, filter_cfg, feature_cfg) for f, b in zip(frames, boxes)]
    return map_from_features(feats, poses, filter, voxel)


# ---------------------------------------------------------------- map files


def save_map(path: str | os.PathLike, store: MapStore) -> None:
    rec = np.zeros(len(store), dtype=_RECORD)
    rec["xyz"] = store.points
    rec["type"] = store.types
    rec["frame"] = store.frame_ids
    poses = np.array([p.row12() for p in store.poses], dtype="<f4").reshape(-1, 12)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IBI", VERSION, int(store.filtered), len(store)))
        fh.write(rec.tobytes())
        fh.write(struct.pack("<I", len(poses)))
        fh.write(poses.tobytes())


def _pose_from_f32(row) -> Pose:
    # float32 rounding stays well inside the orthonormality tolerance; keeping the
    # exact stored values makes save(load(save(m))) byte-identical
    try:
        return Pose.from_row12(row.astype(np.float64))
    except ValueError:
        return Pose.from_row12(row.astype(np.float64), fix_rotation=True)


def load_map(path: str | os.PathLike) -> MapStore:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"map file not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    try:
        version, filtered, n = struct.unpack_from("<IBI", data, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported map version {version}")
        off = 13
        rec = np.frombuffer(data, dtype=_RECORD, count=n, offset=off)
        off += n * _RECORD.itemsize
        (m,) = struct.unpack_from("<I", data, off)
        off += 4
        rows = np.frombuffer(data, dtype="<f4", count=12 * m, offset=off).reshape(m, 12)
        off += 48 * m
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated map file") from exc
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    if filtered not in (0, 1):
        raise FormatError(f"{path}: filtered flag must be 0 or 1, got {filtered}")
    if len(rec) and np.any(rec["type"] > PLANAR):
        raise FormatError(f"{path}: unknown feature type tag")
    poses = [_pose_from_f32(r) for r in rows]
    return MapStore(rec["xyz"].copy(), rec["type"].copy(), rec["frame"].copy(), poses, bool(filtered))
