"""Point clouds, rigid poses and nearest-neighbour search.

Everything downstream works on these three types. Clouds are stored as an
``(N, 4)`` float64 array of ``x, y, z, reflectivity``; poses as a rotation
matrix plus translation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

_ORTHO_TOL = 1e-6


class EmptyTreeError(ValueError):
    pass


class FormatError(ValueError):
    """Raised when a file does not follow its binary/text layout."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] not in (3, 4):
            raise ValueError(f"points must be (N, 3) or (N, 4), got {pts.shape}")
        if pts.shape[1] == 3:
            pts = np.hstack([pts, np.zeros((len(pts), 1))])
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        r = pts[:, 3]
        if np.any((r < 0) | (r > 1)):
            raise ValueError("reflectivity must lie in [0, 1]")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "frame_id", int(self.frame_id))

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def reflectivity(self) -> np.ndarray:
        return self.points[:, 3]

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> PointCloud:
        return PointCloud(self.points[idx], self.frame_id)

    @classmethod
    def empty(cls, frame_id: int = 0) -> PointCloud:
        return cls(np.zeros((0, 4)), frame_id)


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormalize(R) -> np.ndarray:
    """Project a near-rotation onto SO(3)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t``.

    ``a @ b`` applies ``b`` first, then ``a``.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64, copy=True).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64, copy=True).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1) > _ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_xyz_yaw(cls, x=0.0, y=0.0, z=0.0, yaw=0.0) -> Pose:
        return cls(rot_z(yaw), [x, y, z])

    @classmethod
    def from_matrix(cls, M) -> Pose:
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_row12(cls, row, fix_rotation: bool = False) -> Pose:
        M = np.asarray(row, dtype=np.float64).reshape(3, 4)
        R = orthonormalize(M[:, :3]) if fix_rotation else M[:, :3]
        return cls(R, M[:, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def row12(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]]).ravel()

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation

    def __matmul__(self, other: Pose) -> Pose:
        return pose_compose(self, other)

    def angle_to(self, other: Pose) -> float:
        """Rotation angle (rad) of ``self^-1 @ other``."""
        return rotation_angle(self.rotation.T @ other.rotation)

    def distance_to(self, other: Pose) -> float:
        return float(np.linalg.norm(self.translation - other.translation))


def rotation_angle(R) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def pose_compose(a: Pose, b: Pose) -> Pose:
    R = a.rotation @ b.rotation
    # long chains (odometry) would otherwise accumulate round-off until validation fails
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-12:
        R = orthonormalize(R)
    return Pose(R, a.rotation @ b.translation + a.translation)


def pose_apply(p: Pose, cloud: PointCloud) -> PointCloud:
    pts = cloud.points.copy()
    pts[:, :3] = p.apply(cloud.xyz)
    return PointCloud(pts, cloud.frame_id)


class KdTree:
    """Immutable nearest-neighbour index over 3D points (scipy cKDTree)."""

    def __init__(self, xyz):
        xyz = np.asarray(getattr(xyz, "xyz", xyz), dtype=np.float64)
        self.data = _frozen(np.array(xyz[:, :3], copy=True)) if len(xyz) else np.zeros((0, 3))
        self._tree = cKDTree(self.data) if len(self.data) else None

    def __len__(self) -> int:
        return len(self.data)

    def nearest(self, q) -> tuple[int, float]:
        if self._tree is None:
            raise EmptyTreeError("nearest-neighbour query on an empty tree")
        d, i = self._tree.query(np.asarray(q, dtype=np.float64))
        return int(i), float(d) ** 2

    def query(self, xyz, max_dist: float = np.inf, eps: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Batched nearest neighbour; misses beyond ``max_dist`` get ``inf``.

        ``eps > 0`` allows answers up to ``1 + eps`` times the true distance.
        """
        if self._tree is None:
            raise EmptyTreeError("nearest-neighbour query on an empty tree")
        return self._tree.query(np.asarray(xyz, dtype=np.float64), eps=eps, distance_upper_bound=max_dist)

    def query_radius(self, xyz, r: float):
        if self._tree is None:
            raise EmptyTreeError("radius query on an empty tree")
        return self._tree.query_ball_point(np.asarray(xyz, dtype=np.float64), r)


# --- file formats --------------------------------------------------------------

def write_scan(path: str | os.PathLike, cloud: PointCloud) -> None:
    """KITTI-style binary: N records of 4 little-endian float32."""
    np.asarray(cloud.points, dtype="<f4").tofile(path)


def read_scan(path: str | os.PathLike, frame_id: int = 0) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scan file not found: {path}")
    size = path.stat().st_size
    if size % 16:
        raise FormatError(f"{path}: size {size} bytes is not a multiple of 16")
    raw = np.fromfile(path, dtype="<f4")
    pts = raw.reshape(-1, 4).astype(np.float64)
    pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    return PointCloud(pts, frame_id)


def write_poses(path: str | os.PathLike, poses) -> None:
    with open(path, "w") as fh:
        for p in poses:
            fh.write(" ".join(f"{v:.9e}" for v in p.row12()) + "\n")


def read_poses(path: str | os.PathLike) -> list[Pose]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"pose file not found: {path}")
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                vals = [float(v) for v in line.split()]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric pose entry") from exc
            if len(vals) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
            try:
                poses.append(Pose.from_row12(vals, fix_rotation=True))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return poses
