from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dynmap.geometry import FormatError, PointCloud, Pose
from dynmap.projection import (
    BEV_H,
    BEV_W,
    FRONT_H,
    FRONT_W,
    BBox3D,
    bev_pixels,
    front_pixels,
    gen_gt_masks,
    points_in_boxes,
    project_bev,
    project_front,
    read_boxes,
    read_raster,
    write_boxes,
    write_raster,
)

seeds = st.integers(0, 2**31 - 1)


def random_cloud(rng, n=2000):
    xyz = np.column_stack([rng.uniform(-5, 65, n), rng.uniform(-30, 30, n), rng.uniform(-4, 3, n)])
    return PointCloud(np.column_stack([xyz, rng.random(n)]))


def test_front_shape_and_center_pixel():
    img, idx = project_front(PointCloud([[10.0, 0.0, 0.0, 0.4]]))
    assert img.grid.shape == (FRONT_H, FRONT_W, 2) == (64, 448, 2)
    r, c = idx.rows_cols()
    # 2.0 deg / (26.8/64 deg per row) = 4.78 -> row 4; 40.32 / 0.18 = 224
    assert (r[0], c[0]) == (4, 224)
    assert img.grid[4, 224, 0] == pytest.approx(10.0)
    assert img.grid[4, 224, 1] == pytest.approx(0.4)


def test_front_drops_high_elevation_and_wide_azimuth():
    _, idx = project_front(PointCloud([[10.0, 0.0, 10.0], [0.0, 10.0, 0.0], [-10.0, 0.0, 0.0]]))
    assert not idx.projected.any()


def test_front_nearest_wins_and_both_indexed():
    pts = [[5.0, 0.0, 0.0, 0.1], [8.0, 0.0, 0.0, 0.9]]
    img, idx = project_front(PointCloud(pts))
    r, c = idx.rows_cols()
    assert (r[0], c[0]) == (r[1], c[1])
    assert img.grid[r[0], c[0], 0] == pytest.approx(5.0)
    assert img.grid[r[0], c[0], 1] == pytest.approx(0.1)
    assert sorted(idx.indices_at(r[0], c[0])) == [0, 1]


def test_front_validity_invariant(rng):
    img, _ = project_front(random_cloud(rng))
    assert np.all(img.grid[~img.validity] == 0)
    assert np.all(img.grid[img.validity, 0] > 0)


def test_bev_single_point():
    img, idx = project_bev(PointCloud([[10.05, 0.0, 1.3, 0.5]]))
    assert img.grid.shape == (BEV_H, BEV_W, 6) == (600, 500, 6)
    occ = np.argwhere(img.grid[..., 0] == 1)
    assert len(occ) == 1
    r, c = occ[0]
    assert (r, c) == (100, 250)
    assert np.allclose(img.grid[r, c], [1, 1, 0.5, 1.3, 1.3, 1.3])


def test_bev_crop():
    _, idx = project_bev(PointCloud([[61.0, 0.0, 0.0], [10.0, 25.0, 0.0], [-0.01, 0.0, 0.0]]))
    assert not idx.projected.any()


def test_bev_cell_statistics():
    img, _ = project_bev(PointCloud([[3.01, 1.01, z, 0.2] for z in (0.1, 0.5, 0.9)]))
    cell = img.grid[30, 260]
    assert cell[1] == 3
    assert cell[3] == pytest.approx(0.5) and cell[4] == pytest.approx(0.1) and cell[5] == pytest.approx(0.9)


@given(seeds)
def test_back_projection_consistency(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 3000)
    for project, pixels in ((project_front, lambda x: front_pixels(x)[0]), (project_bev, bev_pixels)):
        _, idx = project(cloud)
        ok = idx.projected
        # every indexed point lands on the pixel it is listed under
        assert np.array_equal(pixels(cloud.xyz)[ok], idx.pixel_of[ok])
        assert np.all(idx.pixel_of[ok] < idx.shape[0] * idx.shape[1])


@given(seeds)
def test_bev_channel_invariants(seed):
    rng = np.random.default_rng(seed)
    img, _ = project_bev(random_cloud(rng, 3000))
    g = img.grid
    occ = g[..., 1] > 0
    assert np.array_equal(occ, g[..., 0] == 1)
    assert np.all(g[occ, 4] <= g[occ, 3]) and np.all(g[occ, 3] <= g[occ, 5])
    assert np.all(g[~occ] == 0)


def test_box_containment_examples():
    box = BBox3D((10, 0, 0.8), (4, 2, 1.6))
    assert box.contains([10, 0, 0.8])[0]
    assert not box.contains([13, 0, 0.8])[0]
    assert box.contains([12, 1, 1.6])[0]  # inclusive faces
    turned = BBox3D((10, 0, 0.8), (4, 2, 1.6), yaw=np.pi / 2)
    assert turned.contains([10, 1.9, 0.8])[0]
    assert not box.contains([10, 1.9, 0.8])[0]


def test_box_rejects_bad_size():
    with pytest.raises(ValueError):
        BBox3D((0, 0, 0), (1, 0, 1))


def test_gt_masks_mark_pixels_of_movable_points():
    cloud = PointCloud([[10.0, 0.0, 0.0], [20.0, 5.0, 0.0]])
    front, bev, labels = gen_gt_masks(cloud, [BBox3D((10, 0, 0), (1, 1, 1))])
    assert labels.tolist() == [True, False]
    assert front.sum() == 1 and bev.sum() == 1
    assert bev[100, 250]


@given(seeds)
def test_masks_invariant_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-10, 10, (2000, 3))
    boxes = [BBox3D(tuple(rng.uniform(-8, 8, 3)), tuple(rng.uniform(1, 5, 3)), rng.uniform(-np.pi, np.pi)) for _ in range(4)]
    # boxes carry yaw only, so the motion is a yaw rotation plus translation
    T = Pose.from_xyz_yaw(*rng.uniform(-20, 20, 3), yaw=rng.uniform(-np.pi, np.pi))
    a = points_in_boxes(xyz, boxes)
    b = points_in_boxes(T.apply(xyz), [bx.transformed(T) for bx in boxes])
    assert np.array_equal(a, b)


def test_points_in_boxes_fast_path_matches_loop(rng):
    xyz = rng.uniform(-40, 40, (30000, 3))
    boxes = [BBox3D(tuple(rng.uniform(-35, 35, 3)), tuple(rng.uniform(1, 6, 3)), rng.uniform(-np.pi, np.pi)) for _ in range(20)]
    ref = np.zeros(len(xyz), bool)
    for b in boxes:
        ref |= b.contains(xyz)
    assert np.array_equal(points_in_boxes(xyz, boxes), ref)


def test_raster_round_trip(tmp_path, rng):
    r = rng.random((7, 5)).astype(np.float32)
    write_raster(tmp_path / "r.bin", r)
    assert (tmp_path / "r.bin").stat().st_size == 8 + 4 * 35
    assert np.array_equal(read_raster(tmp_path / "r.bin"), r)
    (tmp_path / "bad.bin").write_bytes((tmp_path / "r.bin").read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_raster(tmp_path / "bad.bin")


def test_box_file_round_trip(tmp_path):
    boxes = {0: [BBox3D((1, 2, 3), (4, 2, 1.5), 0.3)], 4: [BBox3D((5, 6, 0.7), (1, 1, 1), -1.0, "Pedestrian")]}
    write_boxes(tmp_path / "b.txt", boxes.items())
    back = read_boxes(tmp_path / "b.txt")
    assert sorted(back) == [0, 4]
    assert back[4][0].label == "Pedestrian"
    assert np.allclose(back[0][0].center, (1, 2, 3)) and back[0][0].yaw == pytest.approx(0.3)
    (tmp_path / "bad.txt").write_text("0 Car 1 2 3\n")
    with pytest.raises(FormatError, match="bad.txt:1"):
        read_boxes(tmp_path / "bad.txt")
