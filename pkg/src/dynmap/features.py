"""LOAM-style edge/planar features with consensus ground removal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud
from .projection import elevation_row, spherical

HALF_WINDOW = 5


@dataclass(frozen=True)
class FeatureConfig:
    c_edge: float = 0.5
    c_plane: float = 0.05
    sectors: int = 6
    max_edge: int = 2
    max_planar: int = 4
    suppress: int = 5
    ground_threshold: float = 0.2
    ground_max_tilt_deg: float = 15.0
    ground_iterations: int = 100
    ground_min_fraction: float = 0.2


@dataclass(frozen=True)
class FeatureSet:
    edge: PointCloud
    planar: PointCloud
    frame_id: int = 0
    edge_index: np.ndarray | None = None  # rows of the source scan
    planar_index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.edge) + len(self.planar)

    @property
    def xyz(self) -> np.ndarray:
        return np.vstack([self.edge.xyz, self.planar.xyz])

    @property
    def types(self) -> np.ndarray:
        """0 for edge, 1 for planar, aligned with :attr:`xyz`."""
        return np.concatenate([np.zeros(len(self.edge), np.uint8), np.ones(len(self.planar), np.uint8)])


@dataclass(frozen=True)
class RowOrder:
    """Scan points grouped by laser row and sorted by azimuth.

    ``order`` lists point indices row by row; ``row_start[r]:row_start[r+1]``
    is row ``r``'s slice of it.
    """

    order: np.ndarray
    row_start: np.ndarray
    azimuth: np.ndarray  # degrees, per point


def organize_rows(cloud: PointCloud) -> RowOrder:
    """Full-circle organisation by elevation bin; points outside the vertical FoV are skipped."""
    _, elev, az = spherical(cloud.xyz)
    row = elevation_row(elev)
    keep = np.flatnonzero(row >= 0)
    order = keep[np.lexsort((az[keep], row[keep]))]
    row_start = np.searchsorted(row[order], np.arange(65))
    return RowOrder(order, row_start, az)


def compute_smoothness(cloud: PointCloud, rows: RowOrder | None = None, half_window: int = HALF_WINDOW) -> np.ndarray:
    """Curvature ``c = (sum_j (rho_j - rho_i))^2 / (n^2 rho_i^2)`` over the ``n = 2*half_window``
    row neighbours; ``inf`` where a side has fewer than ``half_window`` neighbours."""
    rows = rows or organize_rows(cloud)
    rho = np.linalg.norm(cloud.xyz, axis=1)
    c = np.full(len(cloud), np.inf)
    n = 2 * half_window
    for r in range(64):
        idx = rows.order[rows.row_start[r] : rows.row_start[r + 1]]
        if len(idx) < n + 1:
            continue
        p = rho[idx]
        cs = np.concatenate([[0.0], np.cumsum(p)])
        k = np.arange(half_window, len(idx) - half_window)
        window = cs[k + half_window + 1] - cs[k - half_window]
        diff = window - (n + 1) * p[k]
        c[idx[k]] = diff**2 / (n * n * p[k] ** 2)
    return c


def extract_features(cloud: PointCloud, smoothness: np.ndarray, rows: RowOrder | None = None, cfg: FeatureConfig = FeatureConfig()) -> FeatureSet:
    """Pick edges (largest c above ``c_edge``) and planars (smallest c below ``c_plane``)
    per row sector, suppressing ``suppress`` row neighbours after each pick."""
    rows = rows or organize_rows(cloud)
    edges, planars = [], []
    span = 360.0 / cfg.sectors
    for r in range(64):
        idx = rows.order[rows.row_start[r] : rows.row_start[r + 1]]
        if len(idx) == 0:
            continue
        c = smoothness[idx]
        taken = np.zeros(len(idx), dtype=bool)
        sector = np.minimum(((rows.azimuth[idx] + 180.0) // span).astype(np.int64), cfg.sectors - 1)
        bounds = np.searchsorted(sector, np.arange(cfg.sectors + 1))
        for s in range(cfg.sectors):
            lo, hi = bounds[s], bounds[s + 1]
            if hi <= lo:
                continue
            # the boundary sentinel (inf) is never a candidate
            pos = np.arange(lo, hi)[np.isfinite(c[lo:hi])]
            cs = c[pos]
            picked = 0
            for k in pos[np.lexsort((pos, -cs))]:
                if picked >= cfg.max_edge or not c[k] > cfg.c_edge:
                    break
                if taken[k]:
                    continue
                edges.append(idx[k])
                taken[max(k - cfg.suppress, 0) : k + cfg.suppress + 1] = True
                picked += 1
            picked = 0
            for k in pos[np.lexsort((pos, cs))]:
                if picked >= cfg.max_planar or not c[k] < cfg.c_plane:
                    break
                if taken[k]:
                    continue
                planars.append(idx[k])
                taken[max(k - cfg.suppress, 0) : k + cfg.suppress + 1] = True
                picked += 1
    e = np.array(edges, dtype=np.int64)
    p = np.array(planars, dtype=np.int64)
    return FeatureSet(cloud.subset(e), cloud.subset(p), cloud.frame_id, e, p)


def remove_ground(cloud: PointCloud, cfg: FeatureConfig = FeatureConfig()) -> tuple[PointCloud, np.ndarray]:
    """RANSAC plane with a near-vertical normal; returns (non-ground cloud, ground mask).

    When no plane collects ``ground_min_fraction`` of the points the input is
    returned unchanged with an empty mask.
    """
    n = len(cloud)
    empty = np.zeros(n, dtype=bool)
    if n < 3:
        return cloud, empty
    xyz = cloud.xyz
    rng = np.random.default_rng(cloud.frame_id)
    cos_tilt = np.cos(np.radians(cfg.ground_max_tilt_deg))
    # score hypotheses on a fixed subsample, then label the whole cloud
    probe = xyz if n <= 8000 else xyz[rng.choice(n, 8000, replace=False)]
    # all minimal samples drawn at once; samples that repeat a point are dropped
    tri = rng.integers(0, n, (cfg.ground_iterations, 3))
    tri = tri[(tri[:, 0] != tri[:, 1]) & (tri[:, 0] != tri[:, 2]) & (tri[:, 1] != tri[:, 2])]
    a, b, c = xyz[tri[:, 0]], xyz[tri[:, 1]], xyz[tri[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    keep = norms >= 1e-9
    normals = normals[keep] / norms[keep, None]
    a = a[keep]
    upright = np.abs(normals[:, 2]) >= cos_tilt
    normals, a = normals[upright], a[upright]
    if not len(normals):
        return cloud, empty
    offsets = -np.einsum("ij,ij->i", normals, a)
    # argmax keeps the first of equal counts
    counts = (np.abs(probe @ normals.T + offsets) <= cfg.ground_threshold).sum(axis=0)
    k = int(np.argmax(counts))
    normal, d = normals[k], offsets[k]
    mask = np.abs(xyz @ normal + d) <= cfg.ground_threshold
    if mask.sum() < cfg.ground_min_fraction * n:
        return cloud, empty
    # one least-squares refit on the inliers, kept only if it still passes the tilt gate
    pts = xyz[mask]
    centroid = pts.mean(axis=0)
    refit = np.linalg.svd(pts - centroid, full_matrices=False)[2][2]
    if abs(refit[2]) >= cos_tilt:
        refined = np.abs((xyz - centroid) @ refit) <= cfg.ground_threshold
        if refined.sum() >= cfg.ground_min_fraction * n:
            mask = refined
    return cloud.subset(~mask), mask


def frame_features(cloud: PointCloud, cfg: FeatureConfig = FeatureConfig()) -> FeatureSet:
    """Ground removal, smoothness and feature selection in one call."""
    nonground, _ = remove_ground(cloud, cfg)
    rows = organize_rows(nonground)
    c = compute_smoothness(nonground, rows)
    return extract_features(nonground, c, rows, cfg)
