"""Per-point movable probabilities behind one segmenter contract.

A segmenter is any callable ``seg(cloud, boxes=None) -> PointProbs``. Three
backends ship here: the ground-truth oracle, a raster-file loader and the
toy dual-view network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import PointCloud
from ..projection import bev_pixels, front_pixels, points_in_boxes, project_bev, project_front, read_raster
from .losses import LossConfig, downsample_mask, multiscale_loss, wce_loss
from .nets import NetConfig, View, init_weights, loss_and_grad, net_forward
from .nn import conv2d


@dataclass(frozen=True)
class PointProbs:
    """Movable probability per point and view; NaN where the view does not cover the point."""

    front: np.ndarray
    bev: np.ndarray

    def __len__(self):
        return len(self.front)

    @property
    def stacked(self) -> np.ndarray:
        return np.column_stack([self.front, self.bev])


@dataclass(frozen=True)
class FireModuleParams:
    squeeze_w: np.ndarray  # (C_sq, C_in, 1, 1)
    squeeze_b: np.ndarray
    local_w: np.ndarray  # (C_b, C_sq, 3, 3)
    local_b: np.ndarray
    context_w: np.ndarray  # (C_b, C_sq, 3, 3), dilation 2
    context_b: np.ndarray

    def __post_init__(self):
        for name in ("squeeze_w", "local_w", "context_w"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")
        if self.local_w.shape[0] != self.context_w.shape[0]:
            raise ValueError("fire branches must have equal width")

    @property
    def out_channels(self) -> int:
        return 2 * self.local_w.shape[0]


def fire_forward(x, params: FireModuleParams) -> np.ndarray:
    """Squeeze 1x1, then parallel 3x3 and dilated 3x3 branches, concatenated. Input ``(C, H, W)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != params.squeeze_w.shape[1]:
        raise ValueError(f"fire module expects {params.squeeze_w.shape[1]} input channels, got shape {x.shape}")
    relu = lambda a: np.maximum(a, 0.0)
    sq = relu(conv2d(x, params.squeeze_w, params.squeeze_b)[0])
    local = relu(conv2d(sq, params.local_w, params.local_b)[0])
    context = relu(conv2d(sq, params.context_w, params.context_b, dilation=2)[0])
    return np.concatenate([local, context], axis=0)


def _coverage(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return front_pixels(xyz)[0] >= 0, bev_pixels(xyz) >= 0


def oracle_segment(cloud: PointCloud, boxes, flip_prob: float = 0.0, seed=0, view_xyz=None) -> PointProbs:
    """0.95 inside a box, 0.05 elsewhere, each view value flipped with ``flip_prob``.

    ``view_xyz`` optionally gives the coordinates used for the crop test when
    they differ from the cloud's own (points seen from rotated copies).
    """
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError("flip_prob must lie in [0, 1]")
    inside = points_in_boxes(cloud.xyz, boxes or [])
    base = np.where(inside, 0.95, 0.05)
    flips = np.random.default_rng(seed).random((len(cloud), 2)) < flip_prob
    vals = np.where(flips, 1.0 - base[:, None], base[:, None])
    front_ok, bev_ok = _coverage(cloud.xyz if view_xyz is None else np.asarray(view_xyz, dtype=np.float64)[:, :3])
    return PointProbs(np.where(front_ok, vals[:, 0], np.nan), np.where(bev_ok, vals[:, 1], np.nan))


class OracleSegmenter:
    """Ground-truth box labels with optional symmetric label noise."""

    def __init__(self, flip_prob: float = 0.0, seed: int = 0):
        if not 0.0 <= flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        self.flip_prob = flip_prob
        self.seed = seed

    pointwise = True

    def __call__(self, cloud: PointCloud, boxes=None, salt: int = 0, view_xyz=None) -> PointProbs:
        if boxes is None:
            raise ValueError("oracle segmenter needs the frame's boxes")
        return oracle_segment(cloud, boxes, self.flip_prob, [self.seed, cloud.frame_id, salt], view_xyz)


class RasterSegmenter:
    """Reads per-frame probability rasters written by an external network."""

    def __init__(self, front_paths=None, bev_paths=None):
        self.front_paths = front_paths or {}
        self.bev_paths = bev_paths or {}

    def __call__(self, cloud: PointCloud, boxes=None, salt: int = 0) -> PointProbs:
        from ..fusion import fuse_to_3d

        fid = cloud.frame_id
        front = read_raster(self.front_paths[fid]) if fid in self.front_paths else None
        bev = read_raster(self.bev_paths[fid]) if fid in self.bev_paths else None
        return fuse_to_3d(front, bev, None, None, cloud)


class NetworkSegmenter:
    """Runs the dual-view networks and carries the finest maps back to the points."""

    def __init__(self, front_weights, bev_weights, front_cfg: NetConfig | None = None, bev_cfg: NetConfig | None = None):
        self.front_weights = front_weights
        self.bev_weights = bev_weights
        self.front_cfg = front_cfg or NetConfig.front()
        self.bev_cfg = bev_cfg or NetConfig.bev()

    def rasters(self, cloud: PointCloud):
        fimg, fidx = project_front(cloud)
        bimg, bidx = project_bev(cloud)
        front = net_forward(fimg, self.front_weights, self.front_cfg)[-1][1]
        bev = net_forward(bimg, self.bev_weights, self.bev_cfg)[-1][1]
        return front, bev, fidx, bidx

    def __call__(self, cloud: PointCloud, boxes=None, salt: int = 0) -> PointProbs:
        from ..fusion import fuse_to_3d

        front, bev, fidx, bidx = self.rasters(cloud)
        return fuse_to_3d(front, bev, fidx, bidx, cloud)


__all__ = [
    "FireModuleParams",
    "LossConfig",
    "NetConfig",
    "NetworkSegmenter",
    "OracleSegmenter",
    "PointProbs",
    "RasterSegmenter",
    "View",
    "downsample_mask",
    "fire_forward",
    "init_weights",
    "loss_and_grad",
    "multiscale_loss",
    "net_forward",
    "oracle_segment",
    "wce_loss",
]
