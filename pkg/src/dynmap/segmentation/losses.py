"""Class-weighted cross entropy and its multi-resolution sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FRONT_OMEGA = 25.0
BEV_OMEGA = 1000.0


@dataclass(frozen=True)
class LossConfig:
    omega: float = FRONT_OMEGA
    lambdas: tuple[float, ...] = field(default=(1.0, 1.0, 1.0))
    n_classes: int = 2

    def __post_init__(self):
        if self.omega < 1:
            raise ValueError("class weight omega must be >= 1")
        if len(self.lambdas) < 1 or any(l < 0 for l in self.lambdas):
            raise ValueError("need at least one non-negative resolution weight")

    @property
    def m(self) -> int:
        return len(self.lambdas)

    @classmethod
    def front(cls) -> LossConfig:
        return cls(FRONT_OMEGA, (1.0,) * 3)

    @classmethod
    def bev(cls) -> LossConfig:
        return cls(BEV_OMEGA, (1.0,) * 5)


def _movable_prob(pred) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    # (2, H, W) class maps or an (H, W) movable probability
    return pred[1] if pred.ndim == 3 else pred


def wce_loss(pred, gt, omega: float) -> float:
    """Mean over pixels of ``-w(y) * log p(y)``, ``w = omega`` on movable pixels."""
    p = _movable_prob(pred)
    gt = np.asarray(gt, dtype=bool)
    if p.shape != gt.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {gt.shape} differ in size")
    p_gt = np.where(gt, p, 1.0 - p)
    w = np.where(gt, omega, 1.0)
    return float(-(w * np.log(p_gt)).sum() / p_gt.size)


def downsample_mask(mask, shape: tuple[int, int]) -> np.ndarray:
    """A coarse cell is movable when any fine cell it covers is movable.

    The per-axis factor is the smallest power of two whose ceil-division of
    the fine size gives the coarse size, matching the network's halvings.
    """
    mask = np.asarray(mask, dtype=bool)
    factors = []
    for n, m in zip(mask.shape, shape):
        f = 1
        while -(-n // f) > m:
            f *= 2
        if -(-n // f) != m:
            raise ValueError(f"cannot pool {mask.shape} down to {shape}")
        factors.append(f)
    fy, fx = factors
    H, W = shape[0] * fy, shape[1] * fx
    padded = np.zeros((H, W), dtype=bool)
    padded[: mask.shape[0], : mask.shape[1]] = mask
    return padded.reshape(shape[0], fy, shape[1], fx).any(axis=(1, 3))


def multiscale_loss(preds, gts, cfg: LossConfig) -> float:
    if not (len(preds) == len(gts) == cfg.m):
        raise ValueError(f"expected {cfg.m} predictions and masks, got {len(preds)} and {len(gts)}")
    return float(sum(lam * wce_loss(p, g, cfg.omega) for lam, p, g in zip(cfg.lambdas, preds, gts)))


def multiscale_targets(gt_fine, preds) -> list[np.ndarray]:
    return [downsample_mask(gt_fine, _movable_prob(p).shape) for p in preds]
