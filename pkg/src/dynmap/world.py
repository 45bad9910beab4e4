"""Deterministic parking-lot world, 64-beam LiDAR raycaster and GPS simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import PointCloud, Pose
from .projection import BBox3D

N_ROWS = 64
N_COLS = 2000
ELEV_TOP = 2.0
ELEV_STEP_DEG = 26.8 / N_ROWS
AZ_STEP_DEG = 360.0 / N_COLS
MAX_RANGE = 60.0
SENSOR_HEIGHT = 1.73

ROW_ELEV = ELEV_TOP - (np.arange(N_ROWS) + 0.5) * ELEV_STEP_DEG
COL_AZ = -180.0 + (np.arange(N_COLS) + 0.5) * AZ_STEP_DEG

# primitive kinds; hit ids encode kind * 100000 + index
GROUND, WALL, POST, STATIC_BOX, CAR = 0, 1, 2, 3, 4
REFLECTIVITY = {GROUND: 0.15, WALL: 0.35, POST: 0.7, STATIC_BOX: 0.5, CAR: 0.85}
_ID_BASE = 100000
_REFL_TABLE = np.array([REFLECTIVITY[k] for k in range(5)])
NO_HIT = -1


@dataclass(frozen=True)
class WorldConfig:
    lot_x: tuple[float, float] = (-6.0, 96.0)
    lot_y: tuple[float, float] = (-8.0, 64.0)
    aisle_y: tuple[float, ...] = (8.0, 28.0, 48.0)
    aisle_width: float = 6.0
    slot_depth: float = 5.0
    slot_width: float = 2.6
    slot_x: tuple[float, float] = (6.0, 84.0)
    car_size: tuple[float, float, float] = (1.8, 4.4, 1.5)  # across, along slot depth, height
    occupancy: float = 0.3
    position_jitter: float = 0.3
    yaw_jitter_deg: float = 5.0
    wall_height: float = 6.0
    wall_thickness: float = 0.5
    n_posts_per_island: int = 8
    post_radius: float = 0.2
    post_height: float = 5.0
    n_static_boxes: int = 10
    label_margin: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.occupancy <= 1.0:
            raise ValueError("occupancy must lie in [0, 1]")
        if self.car_size[0] + 2 * self.position_jitter > self.slot_width:
            raise ValueError("cars with jitter would overlap neighbouring slots")
        if self.car_size[1] + 2 * self.position_jitter > self.slot_depth:
            raise ValueError("cars with jitter would not fit the slot depth")


@dataclass(frozen=True)
class Cylinder:
    x: float
    y: float
    radius: float
    height: float


@dataclass(frozen=True)
class World:
    config: WorldConfig
    walls: tuple[BBox3D, ...]
    posts: tuple[Cylinder, ...]
    static_boxes: tuple[BBox3D, ...]
    slots: tuple[tuple[float, float, float], ...]  # (x, y, yaw) of every slot centre
    occupied: tuple[int, ...]
    cars: tuple[BBox3D, ...]
    world_seed: int
    session_seed: int
    ground: bool = True  # the z = 0 plane

    @property
    def movable_boxes(self) -> list[BBox3D]:
        return list(self.cars)

    def with_cars(self, occupied, cars) -> World:
        return replace(self, occupied=tuple(occupied), cars=tuple(cars))


@dataclass(frozen=True)
class GpsFix:
    position: np.ndarray
    timestamp: float
    valid: bool = True


def _slot_rows(cfg: WorldConfig) -> list[tuple[float, float]]:
    """(centre y, car yaw) of every slot row: one row on each side of each aisle."""
    rows = []
    half = cfg.aisle_width / 2
    for a in cfg.aisle_y:
        rows.append((a - half - cfg.slot_depth / 2, math.pi / 2))
        rows.append((a + half + cfg.slot_depth / 2, -math.pi / 2))
    return rows


def _slots(cfg: WorldConfig) -> list[tuple[float, float, float]]:
    n = int((cfg.slot_x[1] - cfg.slot_x[0]) // cfg.slot_width)
    xs = cfg.slot_x[0] + (np.arange(n) + 0.5) * cfg.slot_width
    return [(float(x), y, yaw) for y, yaw in _slot_rows(cfg) for x in xs]


def _islands(cfg: WorldConfig) -> list[float]:
    """Centre y of the strips between back-to-back slot rows."""
    half = cfg.aisle_width / 2 + cfg.slot_depth
    return [(a + half + b - half) / 2 for a, b in zip(cfg.aisle_y[:-1], cfg.aisle_y[1:])]


def _walls(cfg: WorldConfig, rng) -> list[BBox3D]:
    (x0, x1), (y0, y1) = cfg.lot_x, cfg.lot_y
    h, th = cfg.wall_height, cfg.wall_thickness
    walls = []

    def segmented(a0, a1, fixed, along_x):
        # a wall with two random gaps (entrances)
        gaps = sorted(rng.uniform(a0 + 8, a1 - 8, size=2))
        cuts = [a0, gaps[0] - 2.5, gaps[0] + 2.5, gaps[1] - 2.5, gaps[1] + 2.5, a1]
        for s, e in zip(cuts[::2], cuts[1::2]):
            if e - s < 0.5:
                continue
            mid, length = (s + e) / 2, e - s
            if along_x:
                walls.append(BBox3D((mid, fixed, h / 2), (length, th, h), 0.0, "wall"))
            else:
                walls.append(BBox3D((fixed, mid, h / 2), (th, length, h), 0.0, "wall"))

    segmented(x0, x1, y0, True)
    segmented(x0, x1, y1, True)
    segmented(y0, y1, x0, False)
    segmented(y0, y1, x1, False)
    return walls


def _posts(cfg: WorldConfig, rng) -> list[Cylinder]:
    posts = []
    for y in _islands(cfg):
        xs = np.sort(rng.uniform(cfg.slot_x[0], cfg.slot_x[1], cfg.n_posts_per_island))
        for x in xs:
            posts.append(Cylinder(float(x), float(y + rng.uniform(-0.8, 0.8)), cfg.post_radius, cfg.post_height))
    # posts along the outer edges give the end lanes some structure
    for x in (cfg.lot_x[0] + 2.0, cfg.lot_x[1] - 2.0):
        for y in np.linspace(cfg.lot_y[0] + 6, cfg.lot_y[1] - 6, 5):
            posts.append(Cylinder(float(x), float(y + rng.uniform(-1, 1)), cfg.post_radius, cfg.post_height))
    return posts


def _static_boxes(cfg: WorldConfig, rng) -> list[BBox3D]:
    """Kiosks and planters along the outer rim, clear of slots and lanes."""
    boxes = []
    (x0, x1), (y0, y1) = cfg.lot_x, cfg.lot_y
    rim_lo = cfg.aisle_y[0] - cfg.aisle_width / 2 - cfg.slot_depth
    rim_hi = cfg.aisle_y[-1] + cfg.aisle_width / 2 + cfg.slot_depth
    for k in range(cfg.n_static_boxes):
        sx, sy, sz = rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(0.8, 3.0)
        x = rng.uniform(x0 + 6, x1 - 6)
        if k % 2 == 0:
            y = rng.uniform(y0 + 1 + sy / 2, rim_lo - 0.5 - sy / 2)
        else:
            y = rng.uniform(rim_hi + 0.5 + sy / 2, y1 - 1 - sy / 2)
        boxes.append(BBox3D((x, y, sz / 2), (sx, sy, sz), float(rng.uniform(0, math.pi)), "static"))
    return boxes


def place_cars(cfg: WorldConfig, slots, session_seed: int, occupancy: float | None = None) -> tuple[list[int], list[BBox3D]]:
    occupancy = cfg.occupancy if occupancy is None else occupancy
    rng = np.random.default_rng([1, session_seed])
    draw = rng.random(len(slots))
    occupied = np.flatnonzero(draw < occupancy) if occupancy < 1 else np.arange(len(slots))
    jitter = rng.uniform(-1, 1, size=(len(slots), 3))
    across, along, height = cfg.car_size
    cars = []
    for i in occupied:
        x, y, yaw = slots[i]
        dx, dy = jitter[i, :2] * cfg.position_jitter
        dyaw = math.radians(cfg.yaw_jitter_deg) * jitter[i, 2]
        # yaw names the car's long axis; size is (length, width, height) along it
        cars.append(BBox3D((x + dx, y + dy, height / 2), (along, across, height), yaw + dyaw, "Car"))
    return [int(i) for i in occupied], cars


def generate_world(config: WorldConfig = WorldConfig(), world_seed: int = 0, session_seed: int = 0) -> World:
    """Static layout from ``world_seed``; parked cars from ``session_seed``."""
    rng = np.random.default_rng([0, world_seed])
    walls = _walls(config, rng)
    posts = _posts(config, rng)
    statics = _static_boxes(config, rng)
    slots = _slots(config)
    occupied, cars = place_cars(config, slots, session_seed)
    return World(config, tuple(walls), tuple(posts), tuple(statics), tuple(slots), tuple(occupied), tuple(cars), world_seed, session_seed)


def empty_world() -> World:
    return World(WorldConfig(occupancy=0.0), (), (), (), (), (), (), 0, 0, ground=False)


# ---------------------------------------------------------------- raycasting


def ray_directions() -> np.ndarray:
    """Unit directions (64, 2000, 3) in the sensor frame."""
    el = np.radians(ROW_ELEV)[:, None]
    az = np.radians(COL_AZ)[None, :]
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el) * np.ones_like(az)], axis=-1)


_DIRS = ray_directions()


def _columns_facing(corners_xy: np.ndarray, origin: np.ndarray, yaw: float) -> np.ndarray | None:
    """Sensor columns whose azimuth can see a footprint, or None for all of them."""
    rel = corners_xy - origin[:2]
    ang = np.arctan2(rel[:, 1], rel[:, 0]) - yaw
    a0 = ang[0]
    dev = np.mod(ang - a0 + np.pi, 2 * np.pi) - np.pi
    lo, hi = a0 + dev.min(), a0 + dev.max()
    if hi - lo >= np.pi:
        return None
    step = math.radians(AZ_STEP_DEG)
    start = math.floor((lo + math.pi) / step - 0.5) - 1
    stop = math.ceil((hi + math.pi) / step - 0.5) + 1
    return np.mod(np.arange(start, stop + 1), N_COLS)


def _slab(o: np.ndarray, d: tuple[np.ndarray, np.ndarray, np.ndarray], half: np.ndarray) -> np.ndarray:
    """Entry distance of rays ``o + s d`` into the centred box ``[-half, half]`` (inf on a miss)."""
    near = np.full(d[0].shape, -np.inf)
    far = np.full(d[0].shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            inv = 1.0 / d[a]
            t0 = (-half[a] - o[a]) * inv
            t1 = (half[a] - o[a]) * inv
            lo_t = np.fmin(t0, t1)  # fmin/fmax skip the NaN of a parallel ray on the slab plane
            hi_t = np.fmax(t0, t1)
            np.fmax(near, lo_t, out=near)
            np.fmin(far, hi_t, out=far)
    hit = (near <= far) & (near > 1e-9)
    return np.where(hit, near, np.inf)


def _rows_facing(o: np.ndarray, z0: float, z1: float, dmin: float, dmax: float) -> np.ndarray:
    """Rows of a level sensor whose elevation can meet heights [z0, z1] at horizontal distances [dmin, dmax]."""
    dmin = max(dmin, 1e-3)
    ends = [math.degrees(math.atan2(z - o[2], d)) for z in (z0, z1) for d in (dmin, dmax)]
    lo, hi = min(ends) - ELEV_STEP_DEG, max(ends) + ELEV_STEP_DEG
    return np.flatnonzero((ROW_ELEV >= lo) & (ROW_ELEV <= hi))


def raycast(world: World, pose: Pose, max_range: float = MAX_RANGE) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free range and hit id per ray, both shaped (64, 2000); misses get inf / -1."""
    o = pose.translation
    R = pose.rotation
    yaw = pose.yaw
    level = abs(R[2, 2] - 1.0) < 1e-9
    dirs = _DIRS @ R.T
    rng_img = np.full((N_ROWS, N_COLS), np.inf)
    ids = np.full((N_ROWS, N_COLS), NO_HIT, dtype=np.int64)

    if world.ground:
        dz = dirs[..., 2]
        with np.errstate(divide="ignore"):
            t = np.where(dz < -1e-12, -o[2] / dz, np.inf)
        take = t < rng_img
        rng_img[take] = t[take]
        ids[take] = GROUND * _ID_BASE

    def window(footprint: np.ndarray, centre: np.ndarray, radius: float, z0: float, z1: float):
        cols = _columns_facing(footprint, o, yaw)
        cols = np.arange(N_COLS) if cols is None else cols
        dist = float(np.linalg.norm(centre - o[:2]))
        if level:
            rows = _rows_facing(o, z0, z1, dist - radius, dist + radius)
        else:
            rows = np.arange(N_ROWS)
        return rows, cols

    def commit(rows, cols, s, hid):
        cur = rng_img[np.ix_(rows, cols)]
        better = s < cur
        if better.any():
            r_idx, c_idx = np.nonzero(better)
            rng_img[rows[r_idx], cols[c_idx]] = s[better]
            ids[rows[r_idx], cols[c_idx]] = hid

    def cast_box(b: BBox3D, kind: int, k: int):
        c = np.asarray(b.center)
        corners = b.corners_xy()
        radius = 0.5 * math.hypot(b.size[0], b.size[1])
        if np.linalg.norm(c[:2] - o[:2]) - radius > max_range:
            return
        rows, cols = window(corners, c[:2], radius, c[2] - b.size[2] / 2, c[2] + b.size[2] / 2)
        if not len(rows) or not len(cols):
            return
        sub = dirs[np.ix_(rows, cols)]
        cy, sy = math.cos(b.yaw), math.sin(b.yaw)
        rel = o - c
        lo_ = np.array([cy * rel[0] + sy * rel[1], -sy * rel[0] + cy * rel[1], rel[2]])  # world -> box
        dx, dy = sub[..., 0], sub[..., 1]
        ld = (cy * dx + sy * dy, -sy * dx + cy * dy, sub[..., 2])
        s = _slab(lo_, ld, np.asarray(b.size) / 2)
        commit(rows, cols, s, kind * _ID_BASE + k)

    def cast_post(p: Cylinder, k: int):
        cxy = np.array([p.x, p.y])
        dist = float(np.linalg.norm(cxy - o[:2]))
        if dist - p.radius > max_range or dist <= p.radius:
            return
        half = math.asin(min(1.0, p.radius / dist))
        a = math.atan2(p.y - o[1], p.x - o[0])
        edges = np.array([[math.cos(a + half), math.sin(a + half)], [math.cos(a - half), math.sin(a - half)]]) * dist + o[:2]
        rows, cols = window(np.vstack([edges, cxy]), cxy, p.radius, 0.0, p.height)
        if not len(rows) or not len(cols):
            return
        sub = dirs[np.ix_(rows, cols)]
        dxy = sub[..., :2]
        f = o[:2] - cxy
        A = np.einsum("...i,...i->...", dxy, dxy)
        B = 2 * np.einsum("...i,i->...", dxy, f)
        C = f @ f - p.radius**2
        disc = B * B - 4 * A * C
        with np.errstate(invalid="ignore", divide="ignore"):
            s = (-B - np.sqrt(disc)) / (2 * A)
        z = o[2] + s * sub[..., 2]
        valid = (disc >= 0) & (A > 1e-12) & (s > 1e-9) & (z >= 0) & (z <= p.height)
        commit(rows, cols, np.where(valid, s, np.inf), POST * _ID_BASE + k)

    for k, b in enumerate(world.walls):
        cast_box(b, WALL, k)
    for k, b in enumerate(world.static_boxes):
        cast_box(b, STATIC_BOX, k)
    for k, b in enumerate(world.cars):
        cast_box(b, CAR, k)
    for k, p in enumerate(world.posts):
        cast_post(p, k)

    miss = rng_img > max_range
    rng_img[miss] = np.inf
    ids[miss] = NO_HIT
    return rng_img, ids


def simulate_scan(
    world: World,
    pose: Pose,
    noise_sigma: float = 0.02,
    frame_id: int = 0,
    max_range: float = MAX_RANGE,
    label_margin: float | None = None,
) -> tuple[PointCloud, list[BBox3D]]:
    """Scan in the sensor frame plus the cars it sees, boxed in the sensor frame.

    Boxes are inflated by ``label_margin`` (default from the world config) so
    that noisy returns off a car body stay inside its label.
    """
    rng_img, ids = raycast(world, pose, max_range)
    hit = ids != NO_HIT
    noise = np.random.default_rng([world.session_seed, frame_id]).normal(0.0, 1.0, size=rng_img.shape)
    rho = rng_img[hit] + noise_sigma * noise[hit]
    d = _DIRS[hit]
    xyz = d * rho[:, None]
    kinds = ids[hit] // _ID_BASE
    refl = _REFL_TABLE[kinds]
    cloud = PointCloud(np.column_stack([xyz, refl]), frame_id)
    seen = np.unique(ids[hit][kinds == CAR] % _ID_BASE)
    margin = world.config.label_margin if label_margin is None else label_margin
    inv = pose.inverse()
    boxes = [world.cars[k].transformed(inv).inflated(margin) for k in seen]
    return cloud, boxes


def hit_ids(world: World, pose: Pose, max_range: float = MAX_RANGE) -> np.ndarray:
    """Hit id per returned point, aligned with :func:`simulate_scan` output."""
    _, ids = raycast(world, pose, max_range)
    return ids[ids != NO_HIT]


def simulate_gps(gt_pose: Pose, sigma: float = 3.0, rate_divisor: int = 10, frame: int = 0, seed: int = 0, dt: float = 0.1) -> GpsFix | None:
    """A noisy 2D fix on every ``rate_divisor``-th frame, ``None`` otherwise."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if rate_divisor < 1:
        raise ValueError("rate_divisor must be >= 1")
    if frame % rate_divisor:
        return None
    noise = np.random.default_rng([2, seed, frame]).normal(0.0, sigma, size=2)
    return GpsFix(gt_pose.translation[:2] + noise, frame * dt)


def gps_stream(poses, sigma: float = 3.0, rate_divisor: int = 10, seed: int = 0) -> list[GpsFix | None]:
    return [simulate_gps(p, sigma, rate_divisor, i, seed) for i, p in enumerate(poses)]


# ------------------------------------------------------------------- routes


@dataclass(frozen=True)
class Route:
    waypoints: np.ndarray  # (K, 2) polyline corners
    fillet: float = 5.0
    samples: np.ndarray = field(default=None, repr=False)  # (M, 3) x, y, yaw at fine spacing

    def length(self) -> float:
        s = self.samples
        return float(np.linalg.norm(np.diff(s[:, :2], axis=0), axis=1).sum())


def _fillet_path(wp: np.ndarray, radius: float, step: float = 0.05) -> np.ndarray:
    pts = [wp[0]]
    for k in range(1, len(wp) - 1):
        a, b, c = wp[k - 1], wp[k], wp[k + 1]
        u = (a - b) / np.linalg.norm(a - b)
        v = (c - b) / np.linalg.norm(c - b)
        theta = math.acos(np.clip(u @ v, -1, 1))
        cut = radius / math.tan(theta / 2)
        p0, p1 = b + u * cut, b + v * cut
        bis = (u + v) / np.linalg.norm(u + v)
        centre = b + bis * radius / math.sin(theta / 2)
        a0 = math.atan2(*(p0 - centre)[::-1])
        a1 = math.atan2(*(p1 - centre)[::-1])
        da = (a1 - a0 + math.pi) % (2 * math.pi) - math.pi
        pts.append(p0)
        n = max(2, int(abs(da) * radius / step))
        for s in np.linspace(0, 1, n)[1:-1]:
            ang = a0 + da * s
            pts.append(centre + radius * np.array([math.cos(ang), math.sin(ang)]))
        pts.append(p1)
    pts.append(wp[-1])
    pts = np.asarray(pts)
    # resample uniformly
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    keep = np.concatenate([[True], seg > 1e-12])
    pts, s = pts[keep], s[keep]
    u = np.arange(0.0, s[-1], step)
    xy = np.column_stack([np.interp(u, s, pts[:, 0]), np.interp(u, s, pts[:, 1])])
    d = np.gradient(xy, axis=0)
    yaw = np.arctan2(d[:, 1], d[:, 0])
    return np.column_stack([xy, yaw])


def snake_route(config: WorldConfig = WorldConfig(), fillet: float = 5.0) -> Route:
    """Drive every aisle, alternating direction, joined along the end lanes."""
    west = config.slot_x[0] - 3.0
    east = config.slot_x[1] + 3.0
    wp = []
    for k, y in enumerate(config.aisle_y):
        xs = (west, east) if k % 2 == 0 else (east, west)
        wp.append((xs[0], y))
        wp.append((xs[1], y))
    wp = np.array(wp, dtype=float)
    wp[0, 0] = west + 1.0
    return Route(wp, fillet, _fillet_path(wp, fillet))


def route_poses(route: Route, n_frames: int, start: float = 0.0, spacing: float = 0.5, height: float = SENSOR_HEIGHT) -> list[Pose]:
    """Sensor poses every ``spacing`` metres starting ``start`` metres along the route."""
    s = route.samples
    seg = np.linalg.norm(np.diff(s[:, :2], axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    u = start + spacing * np.arange(n_frames)
    if u[-1] > arc[-1] + 1e-9:
        raise ValueError(f"route is {arc[-1]:.1f} m long, session needs {u[-1]:.1f} m")
    x = np.interp(u, arc, s[:, 0])
    y = np.interp(u, arc, s[:, 1])
    yaw = np.interp(u, arc, np.unwrap(s[:, 2]))
    return [Pose.from_xyz_yaw(float(a), float(b), height, float(c)) for a, b, c in zip(x, y, yaw)]


def slot_jaccard_distance(a: World, b: World) -> float:
    """1 - |A & B| / |A | B| over occupied slot sets."""
    sa, sb = set(a.occupied), set(b.occupied)
    union = sa | sb
    return 0.0 if not union else 1.0 - len(sa & sb) / len(union)
