"""Carry view predictions back to 3D, cluster movable candidates and remove them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import DisjointSet
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .geometry import Pose, PointCloud, pose_apply
from .projection import (
    BEV_H,
    BEV_W,
    FRONT_H,
    FRONT_W,
    IndexMap,
    bev_pixels,
    front_pixels,
)
from .segmentation import PointProbs


@dataclass(frozen=True)
class FilterConfig:
    link_dist: float = 0.5
    min_points: int = 50
    score_threshold: float = 0.13
    bev_weight: float = 0.2
    front_weight: float = 0.1
    candidate_threshold: float = 0.5
    removal_radius: float = 0.10
    # yaw-rotated copies of both views tiling the full circle; 1 = forward crop only
    sectors: int = 8


@dataclass(frozen=True)
class Cluster:
    indices: np.ndarray
    centroid: np.ndarray
    mean_front: float
    mean_bev: float
    n_front: int
    n_bev: int

    @property
    def count(self) -> int:
        return len(self.indices)

    def score(self, bev_weight: float = 0.2, front_weight: float = 0.1) -> float:
        b = self.mean_bev if self.n_bev else 0.0
        f = self.mean_front if self.n_front else 0.0
        return bev_weight * b + front_weight * f


@dataclass(frozen=True)
class FilterResult:
    cloud: PointCloud
    removed: np.ndarray  # bool per input point
    probs: PointProbs
    clusters: list[Cluster]
    accepted: list[Cluster]


def fuse_to_3d(front_probs, bev_probs, front_index: IndexMap | None, bev_index: IndexMap | None, cloud: PointCloud) -> PointProbs:
    """Each point takes the value of the pixel/cell it projects to; NaN where unprojected."""
    n = len(cloud)
    if front_index is None:
        front_index = IndexMap((FRONT_H, FRONT_W), front_pixels(cloud.xyz)[0])
    if bev_index is None:
        bev_index = IndexMap((BEV_H, BEV_W), bev_pixels(cloud.xyz))
    front = front_index.gather(np.asarray(front_probs)) if front_probs is not None else np.full(n, np.nan)
    bev = bev_index.gather(np.asarray(bev_probs)) if bev_probs is not None else np.full(n, np.nan)
    return PointProbs(front, bev)


def candidate_indices(probs: PointProbs, threshold: float = 0.5) -> np.ndarray:
    s = probs.stacked
    best = np.where(np.isnan(s), -np.inf, s).max(axis=1)
    return np.flatnonzero(best >= threshold)


def _link_components(xyz: np.ndarray, r: float, reps: int = 2) -> np.ndarray:
    """Single-linkage components (link iff distance <= r), exact.

    Points sharing a grid cell of side r/sqrt(3) are always linked. Cells are
    first joined through close pairs among a few representative points per
    cell; any neighbouring cells still apart then get an exact closest-pair test.
    """
    n = len(xyz)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    side = r / math.sqrt(3.0) * (1.0 - 1e-9)
    keys = np.floor(xyz / side).astype(np.int64)
    keys -= keys.min(axis=0) - 2
    dims = keys.max(axis=0) + 3
    code = (keys[:, 0] * dims[1] + keys[:, 1]) * dims[2] + keys[:, 2]
    cells, cell_of = np.unique(code, return_inverse=True)
    cell_of = cell_of.ravel()
    m = len(cells)
    order = np.argsort(cell_of, kind="stable")
    starts = np.searchsorted(cell_of[order], np.arange(m + 1))

    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n) - starts[cell_of[order]]
    rep = np.flatnonzero(rank < reps)
    pairs = cKDTree(xyz[rep]).query_pairs(r, output_type="ndarray")
    a, b = cell_of[rep[pairs[:, 0]]], cell_of[rep[pairs[:, 1]]]
    keep = a != b
    graph = coo_matrix((np.ones(keep.sum()), (a[keep], b[keep])), shape=(m, m))
    _, comp = connected_components(graph, directed=False)

    lo = np.minimum.reduceat(xyz[order], starts[:-1])
    hi = np.maximum.reduceat(xyz[order], starts[:-1])
    offsets = [(dx, dy, dz) for dx in range(-2, 3) for dy in range(-2, 3) for dz in range(-2, 3) if (dx, dy, dz) > (0, 0, 0)]
    cand = []
    for dx, dy, dz in offsets:
        nb = cells + (dx * dims[1] + dy) * dims[2] + dz
        pos = np.minimum(np.searchsorted(cells, nb), m - 1)
        hit = cells[pos] == nb
        src = np.flatnonzero(hit)
        dst = pos[hit]
        keep = comp[src] != comp[dst]
        cand.append(np.column_stack([src[keep], dst[keep]]))
    cand = np.concatenate(cand)
    if len(cand):
        gap = np.maximum(0.0, np.maximum(lo[cand[:, 0]] - hi[cand[:, 1]], lo[cand[:, 1]] - hi[cand[:, 0]]))
        cand = cand[np.einsum("ij,ij->i", gap, gap) <= r * r]
    if len(cand):
        ds = DisjointSet(range(int(comp.max()) + 1))
        for ca, cb in cand:
            if ds.connected(comp[ca], comp[cb]):
                continue
            pa = xyz[order[starts[ca] : starts[ca + 1]]]
            pb = xyz[order[starts[cb] : starts[cb + 1]]]
            if cdist(pa, pb, "sqeuclidean").min() <= r * r:
                ds.merge(comp[ca], comp[cb])
        root = np.array([ds[c] for c in range(int(comp.max()) + 1)])
        comp = root[comp]
    return comp[cell_of]


def cluster_points(cloud: PointCloud, candidates, link_dist: float = 0.5, probs: PointProbs | None = None) -> list[Cluster]:
    """Euclidean single-linkage clusters over the candidate points, ordered by smallest member."""
    if link_dist <= 0:
        raise ValueError("link_dist must be positive")
    cand = np.unique(np.asarray(candidates, dtype=np.int64))
    if len(cand) == 0:
        return []
    xyz = cloud.xyz[cand]
    labels = _link_components(xyz, link_dist)
    _, labels = np.unique(labels, return_inverse=True)
    k = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=k)
    centroids = np.column_stack([np.bincount(labels, xyz[:, a], minlength=k) for a in range(3)]) / counts[:, None]
    stats = []
    for vals in (probs.front[cand], probs.bev[cand]) if probs is not None else ():
        have = ~np.isnan(vals)
        n_view = np.bincount(labels[have], minlength=k)
        total = np.bincount(labels[have], vals[have], minlength=k)
        stats.append((np.where(n_view > 0, total / np.maximum(n_view, 1), 0.0), n_view))
    if not stats:
        stats = [(np.zeros(k), np.zeros(k, dtype=np.int64))] * 2
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    clusters = []
    for members in np.split(order, bounds):
        c = labels[members[0]]
        clusters.append(
            Cluster(cand[members], centroids[c], float(stats[0][0][c]), float(stats[1][0][c]), int(stats[0][1][c]), int(stats[1][1][c]))
        )
    clusters.sort(key=lambda c: int(c.indices[0]))
    return clusters


def validate_clusters(clusters, cfg: FilterConfig = FilterConfig()) -> list[Cluster]:
    return [
        c
        for c in clusters
        if c.count >= cfg.min_points and c.score(cfg.bev_weight, cfg.front_weight) >= cfg.score_threshold
    ]


def radius_filter(cloud: PointCloud, accepted_points, radius: float = 0.10) -> tuple[PointCloud, np.ndarray]:
    """Drop every point within ``radius`` (inclusive) of an accepted point.

    Returns the surviving cloud (order preserved) and the removed mask.
    """
    idx = np.asarray(accepted_points, dtype=np.int64)
    removed = np.zeros(len(cloud), dtype=bool)
    if len(idx) == 0 or len(cloud) == 0:
        return cloud, removed
    removed[idx] = True
    rest = np.flatnonzero(~removed)
    # only points in 1 m columns touching an accepted point's neighbourhood can be in range
    cell = 1.0
    lo = cloud.xyz[idx, :2].min(axis=0) - 2 * cell
    near_idx = np.floor((cloud.xyz[idx, :2] - lo) / cell).astype(np.int64)
    shape = near_idx.max(axis=0) + 3
    grid = np.zeros(shape, dtype=bool)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            grid[near_idx[:, 0] + dx, near_idx[:, 1] + dy] = True
    c = np.floor((cloud.xyz[rest, :2] - lo) / cell).astype(np.int64)
    inside = np.all((c >= 0) & (c < shape), axis=1)
    rest = rest[inside]
    rest = rest[grid[c[inside, 0], c[inside, 1]]]
    if len(rest):
        # a small margin in the search bound, then the exact inclusive test
        d, _ = cKDTree(cloud.xyz[idx], balanced_tree=False, compact_nodes=False).query(cloud.xyz[rest], distance_upper_bound=radius * (1 + 1e-9) + 1e-12)
        removed[rest[d <= radius]] = True
    return cloud.subset(~removed), removed


def _sector_of(xyz: np.ndarray, sectors: int) -> np.ndarray:
    az = np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0]))
    step = 360.0 / sectors
    return np.mod(np.rint(az / step).astype(np.int64), sectors)


def segment_full_circle(cloud: PointCloud, segmenter, boxes=None, sectors: int = 8) -> PointProbs:
    """Run ``segmenter`` on yaw-rotated copies of the scan and keep, for each
    point, the prediction from the copy whose forward axis is nearest to it."""
    if sectors <= 1:
        return segmenter(cloud, boxes)
    which = _sector_of(cloud.xyz, sectors)
    if getattr(segmenter, "pointwise", False):
        # per-point predictors only need each point's coverage in its own copy
        yaw = -2 * np.pi * which / sectors
        c, s = np.cos(yaw), np.sin(yaw)
        x, y = cloud.xyz[:, 0], cloud.xyz[:, 1]
        view = np.column_stack([c * x - s * y, s * x + c * y, cloud.xyz[:, 2]])
        return segmenter(cloud, boxes, view_xyz=view)
    az = np.degrees(np.arctan2(cloud.xyz[:, 1], cloud.xyz[:, 0]))
    front = np.full(len(cloud), np.nan)
    bev = np.full(len(cloud), np.nan)
    for k in range(sectors):
        mine = which == k
        if not mine.any():
            continue
        # points outside both crops of this copy cannot change its images
        off = np.abs(np.mod(az - 360.0 * k / sectors + 180.0, 360.0) - 180.0)
        seen = np.flatnonzero(off <= 90.0)
        to_sector = Pose.from_xyz_yaw(yaw=-2 * np.pi * k / sectors)
        rotated = pose_apply(to_sector, cloud.subset(seen))
        rboxes = [b.transformed(to_sector) for b in boxes] if boxes is not None else None
        p = segmenter(rotated, rboxes, salt=k)
        local = mine[seen]
        front[seen[local]] = p.front[local]
        bev[seen[local]] = p.bev[local]
    return PointProbs(front, bev)


def filter_movables(cloud: PointCloud, segmenter, boxes=None, cfg: FilterConfig = FilterConfig()) -> FilterResult:
    probs = segment_full_circle(cloud, segmenter, boxes, cfg.sectors)
    cand = candidate_indices(probs, cfg.candidate_threshold)
    clusters = cluster_points(cloud, cand, cfg.link_dist, probs)
    accepted = validate_clusters(clusters, cfg)
    pts = np.concatenate([c.indices for c in accepted]) if accepted else np.zeros(0, dtype=np.int64)
    filtered, removed = radius_filter(cloud, pts, cfg.removal_radius)
    return FilterResult(filtered, removed, probs, clusters, accepted)


def write_labels(path, removed: np.ndarray) -> None:
    np.asarray(removed, dtype=np.uint8).tofile(path)
