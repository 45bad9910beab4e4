from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dynmap.fusion import (
    Cluster,
    FilterConfig,
    candidate_indices,
    cluster_points,
    filter_movables,
    fuse_to_3d,
    radius_filter,
    segment_full_circle,
    validate_clusters,
    write_labels,
)
from dynmap.geometry import PointCloud
from dynmap.projection import BEV_H, BEV_W, FRONT_H, FRONT_W, BBox3D, project_bev, project_front
from dynmap.segmentation import OracleSegmenter, PointProbs

seeds = st.integers(0, 2**31 - 1)


def union_find_components(xyz, r):
    """Brute-force oracle: union every pair within r over the full distance matrix."""
    n = len(xyz)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    d = np.linalg.norm(xyz[:, None] - xyz[None], axis=2)
    for i, j in zip(*np.nonzero(np.triu(d <= r, 1))):
        parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(sorted(g) for g in groups.values())


def test_fuse_examples():
    cloud = PointCloud([[10.0, 0.0, 0.0], [-10.0, 0.0, 0.0]])
    front = np.full((FRONT_H, FRONT_W), 0.8)
    p = fuse_to_3d(front, None, None, None, cloud)
    assert p.front[0] == pytest.approx(0.8) and np.isnan(p.front[1]) and np.isnan(p.bev).all()
    p = fuse_to_3d(np.full((FRONT_H, FRONT_W), 0.3), np.full((BEV_H, BEV_W), 0.3), None, None, cloud)
    assert p.bev[0] == pytest.approx(0.3) and np.isnan(p.bev[1])
    with pytest.raises(ValueError):
        fuse_to_3d(np.zeros((3, 3)), None, None, None, cloud)


@given(seeds)
def test_fuse_assigns_own_pixel(seed):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.uniform([-5, -30, -3], [65, 30, 2], (3000, 3)))
    fr, br = rng.random((FRONT_H, FRONT_W)), rng.random((BEV_H, BEV_W))
    _, fidx = project_front(cloud)
    _, bidx = project_bev(cloud)
    p = fuse_to_3d(fr, br, fidx, bidx, cloud)
    for raster, idx, vals in ((fr, fidx, p.front), (br, bidx, p.bev)):
        r, c = idx.rows_cols()
        ok = idx.projected
        assert np.array_equal(vals[ok], raster[r[ok], c[ok]])
        assert np.isnan(vals[~ok]).all()


def test_candidates_use_best_present_view():
    p = PointProbs(np.array([0.6, np.nan, 0.1, np.nan]), np.array([0.1, 0.5, np.nan, np.nan]))
    assert candidate_indices(p).tolist() == [0, 1]


def test_cluster_pair_examples():
    assert [c.count for c in cluster_points(PointCloud([[0, 0, 0], [0.3, 0, 0]]), [0, 1], 0.5)] == [2]
    assert [c.count for c in cluster_points(PointCloud([[0, 0, 0], [0.7, 0, 0]]), [0, 1], 0.5)] == [1, 1]
    assert [c.count for c in cluster_points(PointCloud([[0, 0, 0], [0.5, 0, 0]]), [0, 1], 0.5)] == [2]
    with pytest.raises(ValueError):
        cluster_points(PointCloud([[0, 0, 0]]), [0], 0.0)


@given(seeds, st.sampled_from([1.0, 3.0, 8.0]))
def test_clusters_match_union_find(seed, extent):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(0, extent, (200, 3))
    cloud = PointCloud(xyz)
    got = sorted(sorted(c.indices.tolist()) for c in cluster_points(cloud, np.arange(200), 0.5))
    assert got == union_find_components(xyz, 0.5)


def test_clusters_on_candidate_subset_keep_original_indices(rng):
    xyz = rng.uniform(0, 4, (300, 3))
    cand = rng.choice(300, 150, replace=False)
    got = sorted(sorted(c.indices.tolist()) for c in cluster_points(PointCloud(xyz), cand, 0.5))
    ref = sorted(sorted(cand[g].tolist()) for g in union_find_components(xyz[cand], 0.5))
    assert got == ref


def test_cluster_order_and_stats():
    xyz = [[5, 0, 0], [0, 0, 0], [0.2, 0, 0], [5.1, 0, 0]]
    probs = PointProbs(np.array([0.9, np.nan, 0.7, 0.5]), np.array([0.2, 0.4, 0.6, np.nan]))
    cl = cluster_points(PointCloud(xyz), [0, 1, 2, 3], 0.5, probs)
    assert [c.indices.tolist() for c in cl] == [[0, 3], [1, 2]]
    assert cl[0].mean_front == pytest.approx(0.7) and cl[0].n_bev == 1 and cl[0].mean_bev == pytest.approx(0.2)
    assert cl[1].n_front == 1 and cl[1].mean_bev == pytest.approx(0.5)
    assert np.allclose(cl[1].centroid, [0.1, 0, 0])


def _cluster(n, front, bev):
    return Cluster(np.arange(n), np.zeros(3), front, bev, n if front else 0, n if bev else 0)


def test_validate_examples():
    assert _cluster(60, 0.95, 0.95).score() == pytest.approx(0.285)
    assert validate_clusters([_cluster(60, 0.95, 0.95)])
    assert _cluster(60, 0.95, 0.0).score() == pytest.approx(0.095)
    assert not validate_clusters([_cluster(60, 0.95, 0.0)])
    assert not validate_clusters([_cluster(40, 0.95, 0.95)])
    # BEV alone is enough
    assert validate_clusters([_cluster(50, 0.0, 0.95)])


def test_radius_filter_examples():
    cloud = PointCloud([[0, 0, 0], [0.05, 0, 0]])
    out, removed = radius_filter(cloud, [])
    assert len(out) == 2 and not removed.any()
    out, removed = radius_filter(cloud, [0])
    assert len(out) == 0
    # the bound is inclusive
    out, _ = radius_filter(PointCloud([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0]]), [0])
    assert out.xyz[:, 0].tolist() == [0.2]


@given(seeds)
def test_radius_filter_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(0, 2, (1000, 3))
    acc = rng.choice(1000, rng.integers(1, 30), replace=False)
    out, removed = radius_filter(PointCloud(xyz), acc)
    d = np.linalg.norm(xyz[:, None] - xyz[acc][None], axis=2).min(axis=1)
    assert np.array_equal(removed, d <= 0.10)
    assert np.array_equal(out.xyz, xyz[d > 0.10])


def _scene_frame(lot_scene):
    return lot_scene[2], lot_scene[3]


def test_full_circle_pointwise_matches_per_sector(lot_scene):
    cloud, boxes = _scene_frame(lot_scene)
    seg = OracleSegmenter(0.0, 0)

    class Plain:
        # same oracle without the per-point shortcut
        def __call__(self, c, b=None, salt=0):
            return seg(c, b, salt)

    a = segment_full_circle(cloud, seg, boxes)
    b = segment_full_circle(cloud, Plain(), boxes)
    assert np.array_equal(np.isnan(a.front), np.isnan(b.front))
    assert np.array_equal(np.isnan(a.bev), np.isnan(b.bev))
    ok = ~np.isnan(a.bev)
    assert np.array_equal(a.bev[ok], b.bev[ok])
    # the 8 copies cover nearly the whole horizon in BEV
    assert ok.mean() > 0.9


def test_filter_removes_cars_keeps_statics(lot_scene):
    cloud, boxes = _scene_frame(lot_scene)
    res = filter_movables(cloud, OracleSegmenter(0.0, 0), boxes)
    inside = np.zeros(len(cloud), bool)
    for b in boxes:
        inside |= b.contains(cloud.xyz)
    assert inside.sum() > 500
    assert res.removed[inside].mean() > 0.97
    far = np.ones(len(cloud), bool)
    for b in boxes:
        far &= ~b.inflated(0.2).contains(cloud.xyz)
    assert res.removed[far].mean() < 0.01
    assert len(res.cloud) == (~res.removed).sum()


def test_filter_subset_and_idempotent(lot_scene):
    cloud, boxes = _scene_frame(lot_scene)
    res = filter_movables(cloud, OracleSegmenter(0.05, 3), boxes)
    kept = {tuple(p) for p in res.cloud.points}
    assert kept <= {tuple(p) for p in cloud.points}
    # the same predictions, carried to the survivors, accept nothing new
    probs = PointProbs(res.probs.front[~res.removed], res.probs.bev[~res.removed])

    class Fixed:
        def __call__(self, c, b=None, salt=0):
            return probs

    again = filter_movables(res.cloud, Fixed(), boxes, FilterConfig(sectors=1))
    assert not again.removed.any()


def test_label_sidecar(tmp_path):
    write_labels(tmp_path / "l.label", np.array([True, False, True]))
    assert (tmp_path / "l.label").read_bytes() == b"\x01\x00\x01"
