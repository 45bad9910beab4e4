"""Front-view and bird's-eye-view encodings of a LiDAR scan.

Both projections return an :class:`IndexMap` alongside the image so that
per-pixel predictions can be carried back to the 3D points.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import FormatError, PointCloud

# front view: HDL-64 approximated by uniform elevation bins
FRONT_H = 64
FRONT_W = 448
ELEV_MAX = 2.0
ELEV_MIN = -24.8
ELEV_STEP = (ELEV_MAX - ELEV_MIN) / FRONT_H
AZ_STEP = 0.18
AZ_MIN = -AZ_STEP * FRONT_W / 2  # -40.32 deg, symmetric crop to keep W = 448
AZ_MAX = -AZ_MIN

# bird's eye view
BEV_RES = 0.1
BEV_X = (0.0, 60.0)
BEV_Y = (-25.0, 25.0)
BEV_H = 600
BEV_W = 500
BEV_CHANNELS = ("binary", "count", "reflectivity", "mean_z", "min_z", "max_z")

_EPS = 1e-9


@dataclass(frozen=True)
class IndexMap:
    """Pixel membership of every source point.

    ``pixel_of[i]`` is the flat pixel index of point ``i`` or -1 when the point
    fell outside the view, so each point sits in at most one pixel.
    """

    shape: tuple[int, int]
    pixel_of: np.ndarray

    @property
    def projected(self) -> np.ndarray:
        return self.pixel_of >= 0

    def rows_cols(self) -> tuple[np.ndarray, np.ndarray]:
        ok = self.pixel_of >= 0
        r = np.full(len(self.pixel_of), -1)
        c = np.full(len(self.pixel_of), -1)
        r[ok], c[ok] = np.divmod(self.pixel_of[ok], self.shape[1])
        return r, c

    def indices_at(self, row: int, col: int) -> np.ndarray:
        return np.flatnonzero(self.pixel_of == row * self.shape[1] + col)

    def as_lists(self) -> dict[tuple[int, int], list[int]]:
        out: dict[tuple[int, int], list[int]] = {}
        for i, p in enumerate(self.pixel_of):
            if p >= 0:
                out.setdefault(divmod(int(p), self.shape[1]), []).append(i)
        return out

    def gather(self, raster: np.ndarray) -> np.ndarray:
        """Per-point value of ``raster``; NaN for unprojected points."""
        if raster.shape[:2] != self.shape:
            raise ValueError(f"raster shape {raster.shape[:2]} does not match view {self.shape}")
        out = np.full(len(self.pixel_of), np.nan)
        ok = self.pixel_of >= 0
        out[ok] = raster.reshape(-1)[self.pixel_of[ok]]
        return out


@dataclass(frozen=True)
class FrontImage:
    grid: np.ndarray  # (64, 448, 2): range, reflectivity
    validity: np.ndarray


@dataclass(frozen=True)
class BevImage:
    grid: np.ndarray  # (600, 500, 6), channels as BEV_CHANNELS


@dataclass(frozen=True)
class BBox3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    label: str = "Car"

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError(f"box sizes must be positive, got {self.size}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "yaw", float(self.yaw))

    def contains(self, xyz) -> np.ndarray:
        """Inclusive containment test in the box's yaw-rotated frame."""
        xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))[:, :3]
        d = xyz - np.asarray(self.center)
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        lx = c * d[:, 0] + s * d[:, 1]
        ly = -s * d[:, 0] + c * d[:, 1]
        hx, hy, hz = (0.5 * v + _EPS for v in self.size)
        return (np.abs(lx) <= hx) & (np.abs(ly) <= hy) & (np.abs(d[:, 2]) <= hz)

    def transformed(self, pose) -> BBox3D:
        """Box expressed in another frame; ``pose`` maps old to new coordinates."""
        center = pose.apply(np.asarray(self.center))
        return BBox3D(tuple(center), self.size, self.yaw + pose.yaw, self.label)

    def inflated(self, margin: float) -> BBox3D:
        return BBox3D(self.center, tuple(v + 2 * margin for v in self.size), self.yaw, self.label)

    def corners_xy(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        hx, hy = self.size[0] / 2, self.size[1] / 2
        local = np.array([[hx, hy], [hx, -hy], [-hx, -hy], [-hx, hy]])
        R = np.array([[c, -s], [s, c]])
        return local @ R.T + np.asarray(self.center[:2])


def spherical(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Range, elevation (deg) and azimuth (deg) of each point."""
    rho = np.linalg.norm(xyz, axis=1)
    horiz = np.hypot(xyz[:, 0], xyz[:, 1])
    elev = np.degrees(np.arctan2(xyz[:, 2], horiz))
    az = np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0]))
    return rho, elev, az


def elevation_row(elev: np.ndarray) -> np.ndarray:
    """Row index (0 = highest) or -1 outside the vertical field of view."""
    row = np.floor((ELEV_MAX - elev) / ELEV_STEP + _EPS).astype(np.int64)
    row = np.where(np.abs(elev - ELEV_MIN) <= _EPS, FRONT_H - 1, row)
    ok = (elev <= ELEV_MAX + _EPS) & (elev >= ELEV_MIN - _EPS)
    return np.where(ok, np.clip(row, 0, FRONT_H - 1), -1)


def front_pixels(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat front-view pixel index per point (-1 when dropped) and ranges."""
    rho, elev, az = spherical(xyz)
    row = elevation_row(elev)
    col = np.floor((az - AZ_MIN) / AZ_STEP + _EPS).astype(np.int64)
    col = np.where(np.abs(az - AZ_MAX) <= _EPS, FRONT_W - 1, col)
    ok = (row >= 0) & (az >= AZ_MIN - _EPS) & (az <= AZ_MAX + _EPS) & (rho > 0)
    ok &= (col >= 0) & (col < FRONT_W)
    return np.where(ok, row * FRONT_W + col, -1), rho


def project_front(cloud: PointCloud) -> tuple[FrontImage, IndexMap]:
    pix, rho = front_pixels(cloud.xyz)
    grid = np.zeros((FRONT_H * FRONT_W, 2))
    valid = np.zeros(FRONT_H * FRONT_W, dtype=bool)
    ok = np.flatnonzero(pix >= 0)
    if len(ok):
        # nearest return wins
        order = ok[np.lexsort((rho[ok], pix[ok]))]
        _, first = np.unique(pix[order], return_index=True)
        win = order[first]
        grid[pix[win], 0] = rho[win]
        grid[pix[win], 1] = cloud.reflectivity[win]
        valid[pix[win]] = True
    image = FrontImage(grid.reshape(FRONT_H, FRONT_W, 2), valid.reshape(FRONT_H, FRONT_W))
    return image, IndexMap((FRONT_H, FRONT_W), pix)


def bev_pixels(xyz: np.ndarray) -> np.ndarray:
    row = np.floor((xyz[:, 0] - BEV_X[0]) / BEV_RES).astype(np.int64)
    col = np.floor((xyz[:, 1] - BEV_Y[0]) / BEV_RES).astype(np.int64)
    ok = (xyz[:, 0] >= BEV_X[0]) & (xyz[:, 0] < BEV_X[1]) & (xyz[:, 1] >= BEV_Y[0]) & (xyz[:, 1] < BEV_Y[1])
    ok &= (row >= 0) & (row < BEV_H) & (col >= 0) & (col < BEV_W)
    return np.where(ok, row * BEV_W + col, -1)


def project_bev(cloud: PointCloud) -> tuple[BevImage, IndexMap]:
    pix = bev_pixels(cloud.xyz)
    ok = pix >= 0
    p, z, r = pix[ok], cloud.xyz[ok, 2], cloud.reflectivity[ok]
    n = BEV_H * BEV_W
    count = np.bincount(p, minlength=n).astype(np.float64)
    occ = count > 0
    grid = np.zeros((n, 6))
    grid[occ, 0] = 1.0
    grid[:, 1] = count
    grid[occ, 2] = np.bincount(p, r, minlength=n)[occ] / count[occ]
    grid[occ, 3] = np.bincount(p, z, minlength=n)[occ] / count[occ]
    mn = np.full(n, np.inf)
    mx = np.full(n, -np.inf)
    np.minimum.at(mn, p, z)
    np.maximum.at(mx, p, z)
    grid[occ, 4] = mn[occ]
    grid[occ, 5] = mx[occ]
    # guard float round-off in the mean so min <= mean <= max holds exactly
    grid[occ, 3] = np.clip(grid[occ, 3], grid[occ, 4], grid[occ, 5])
    return BevImage(grid.reshape(BEV_H, BEV_W, 6)), IndexMap((BEV_H, BEV_W), pix)


def points_in_boxes(xyz: np.ndarray, boxes) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)[:, :3]
    inside = np.zeros(len(xyz), dtype=bool)
    boxes = list(boxes)
    if not boxes or not len(xyz):
        return inside
    if len(boxes) * len(xyz) < 200000:
        for box in boxes:
            inside |= box.contains(xyz)
        return inside
    # only points inside each box's bounding square (found on x-sorted points) get the exact test
    order = np.argsort(xyz[:, 0], kind="stable")
    xs = xyz[order, 0]
    for box in boxes:
        reach = 0.5 * float(np.hypot(box.size[0], box.size[1])) + 1e-6
        lo = np.searchsorted(xs, box.center[0] - reach, side="left")
        hi = np.searchsorted(xs, box.center[0] + reach, side="right")
        near = order[lo:hi]
        near = near[np.abs(xyz[near, 1] - box.center[1]) <= reach]
        if len(near):
            inside[near[box.contains(xyz[near])]] = True
    return inside


def gen_gt_masks(cloud: PointCloud, boxes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Movable masks for both views plus per-point labels.

    A pixel is movable when any point that landed in it is inside a box.
    """
    labels = points_in_boxes(cloud.xyz, boxes)
    masks = []
    for pix, shape in ((front_pixels(cloud.xyz)[0], (FRONT_H, FRONT_W)), (bev_pixels(cloud.xyz), (BEV_H, BEV_W))):
        m = np.zeros(shape[0] * shape[1], dtype=bool)
        m[pix[(pix >= 0) & labels]] = True
        masks.append(m.reshape(shape))
    return masks[0], masks[1], labels


# --- raster and box files ------------------------------------------------------

def write_raster(path: str | os.PathLike, raster: np.ndarray) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ValueError("raster must be 2D")
    with open(path, "wb") as fh:
        fh.write(np.array(raster.shape, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(raster, dtype="<f4").tobytes())


def read_raster(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster file not found: {path}")
    data = path.read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated raster header")
    h, w = np.frombuffer(data[:8], dtype="<u4")
    if len(data) != 8 + 4 * int(h) * int(w):
        raise FormatError(f"{path}: expected {h}x{w} float32 values after header")
    return np.frombuffer(data[8:], dtype="<f4").reshape(int(h), int(w)).astype(np.float64)


def write_boxes(path: str | os.PathLike, boxes_by_frame) -> None:
    """One box per line: ``frame class cx cy cz sx sy sz yaw``."""
    with open(path, "w") as fh:
        for frame, boxes in boxes_by_frame:
            for b in boxes:
                vals = (*b.center, *b.size, b.yaw)
                fh.write(f"{frame} {b.label} " + " ".join(f"{v:.6f}" for v in vals) + "\n")


def read_boxes(path: str | os.PathLike) -> dict[int, list[BBox3D]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"box file not found: {path}")
    out: dict[int, list[BBox3D]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 9:
                raise FormatError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
            try:
                frame = int(parts[0])
                v = [float(x) for x in parts[2:]]
                box = BBox3D(tuple(v[:3]), tuple(v[3:6]), v[6], parts[1])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            out.setdefault(frame, []).append(box)
    return out
