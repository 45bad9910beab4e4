"""Point-to-point ICP over feature clouds and the frame-to-frame odometry built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import KdTree, PointCloud, Pose

_COLLINEAR_TOL = 1e-6


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 30
    translation_tol: float = 1e-3  # m
    rotation_tol_deg: float = 0.01
    max_corr_dist: float = 1.0  # m
    # optional wider rejection stages run before the final one, coarse to fine
    coarse_dists: tuple[float, ...] = ()
    min_inlier_fraction: float = 0.0
    # coarse stages only: iteration cap (default max_iterations) and
    # approximate nearest-neighbour tolerance; the final stage is always exact
    coarse_iterations: int | None = None
    coarse_eps: float = 0.0

    def __post_init__(self):
        vals = (self.max_iterations, self.translation_tol, self.rotation_tol_deg, self.max_corr_dist, *self.coarse_dists)
        if any(not v > 0 for v in vals):
            raise ValueError("ICP parameters must be positive")
        if self.coarse_iterations is not None and self.coarse_iterations < 1:
            raise ValueError("coarse_iterations must be positive")
        if self.coarse_eps < 0:
            raise ValueError("coarse_eps must be non-negative")


@dataclass(frozen=True)
class IcpResult:
    transform: Pose
    fitting_score: float  # m^2
    iterations: int
    converged: bool
    inlier_fraction: float = 0.0
    degenerate: bool = False
    history: tuple[float, ...] = ()  # score before each update, final stage
    stage_histories: tuple[tuple[float, ...], ...] = field(default=(), repr=False)

    @property
    def ok(self) -> bool:
        return not self.degenerate and math.isfinite(self.fitting_score)


def kabsch(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping ``src`` onto ``dst``."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return Pose(R, cd - R @ cs)


def _collinear(pts: np.ndarray) -> bool:
    if len(pts) < 3:
        return True
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return s[1] <= _COLLINEAR_TOL * max(s[0], 1.0)


def _as_xyz(obj) -> np.ndarray:
    xyz = getattr(obj, "xyz", obj)
    return np.asarray(xyz, dtype=np.float64)[:, :3]


def truncated_score(d2: np.ndarray, max_dist: float) -> float:
    """Mean of ``min(d^2, max_dist^2)`` over all source points.

    Equal to the mean squared correspondence distance when every point finds
    a partner within ``max_dist``; unmatched points count at the cap.
    """
    return float(np.minimum(d2, max_dist * max_dist).mean())


def _failure(init: Pose, iterations: int, stages) -> IcpResult:
    return IcpResult(init, math.inf, iterations, False, 0.0, True, (), tuple(stages))


def icp_register(source, target, init: Pose | None = None, params: IcpParams = IcpParams(), tree: KdTree | None = None) -> IcpResult:
    """Align ``source`` onto ``target``; the returned transform maps source into the target frame."""
    src = _as_xyz(source)
    if len(src) == 0:
        raise ValueError("ICP source is empty")
    tree = tree if tree is not None else (target if isinstance(target, KdTree) else KdTree(_as_xyz(target)))
    if len(tree) < 10:
        raise ValueError(f"ICP target needs at least 10 points, got {len(tree)}")
    T = init if init is not None else Pose.identity()
    tgt = tree.data
    rot_tol = math.radians(params.rotation_tol_deg)
    stages = []
    total = 0
    converged = False
    history: list[float] = []
    n_coarse = len(params.coarse_dists)
    for stage, dist in enumerate((*params.coarse_dists, params.max_corr_dist)):
        history = []
        converged = False
        final = stage == n_coarse
        iters = params.max_iterations if final or params.coarse_iterations is None else params.coarse_iterations
        eps = 0.0 if final else params.coarse_eps
        for _ in range(iters):
            moved = T.apply(src)
            d, j = tree.query(moved, dist, eps)
            d2 = np.square(d)
            history.append(truncated_score(d2, dist))
            ok = np.isfinite(d)
            if ok.sum() < 3 or _collinear(src[ok]):
                stages.append(tuple(history))
                return _failure(T, total, stages)
            step = kabsch(moved[ok], tgt[j[ok]])
            T = step @ T
            total += 1
            if np.linalg.norm(step.translation) < params.translation_tol and step.angle_to(Pose.identity()) < rot_tol:
                converged = True
                break
        moved = T.apply(src)
        d, _ = tree.query(moved, dist, eps)
        history.append(truncated_score(np.square(d), dist))
        stages.append(tuple(history))
    ok = np.isfinite(d)
    if ok.sum() < 3 or _collinear(src[ok]):
        return _failure(T, total, stages)
    return IcpResult(T, history[-1], total, converged, float(ok.mean()), False, tuple(history), tuple(stages))


def estimate_motion(prev, curr, motion_prior: Pose | None = None, params: IcpParams = IcpParams(), tree: KdTree | None = None) -> IcpResult:
    """Transform taking ``curr`` scan coordinates into ``prev`` scan coordinates."""
    return icp_register(curr, prev, motion_prior or Pose.identity(), params, tree)


def odometry_step(prev, curr, prev_pose: Pose, motion_prior: Pose | None = None, params: IcpParams = IcpParams(), tree: KdTree | None = None) -> Pose:
    """Pose of ``curr``; falls back to ``prev_pose @ motion_prior`` when registration fails."""
    prior = motion_prior or Pose.identity()
    try:
        res = estimate_motion(prev, curr, prior, params, tree)
    except ValueError:
        return prev_pose @ prior
    if not res.ok or res.inlier_fraction < params.min_inlier_fraction:
        return prev_pose @ prior
    return prev_pose @ res.transform
