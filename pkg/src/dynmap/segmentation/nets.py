"""Toy-scale dual-view segmentation networks.

Front view: a 7x15 stem with column stride 2, two further halvings and a
mirrored expansive path. Bird's eye view: five halvings and five upsamplings
with a fire module after every resolution change. Both concatenate encoder
skips and emit a two-class softmax at every decoder level (coarse to fine).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, multiscale_loss, multiscale_targets
from .nn import Tape, Var

FRONT_SHAPE = (64, 448, 2)
# raw channels are rescaled to order one before the first convolution:
# range over the 60 m sensor reach, cell counts over 10, the rest as is
FRONT_INPUT_SCALE = (1.0 / 60.0, 1.0)
BEV_INPUT_SCALE = (1.0, 0.1, 1.0, 1.0, 1.0, 1.0)
BEV_SHAPE = (600, 500, 6)


class View(enum.Enum):
    FRONT = "front"
    BEV = "bev"


def _widths(base: int, levels: int, cap: int) -> tuple[int, ...]:
    return tuple(min(base * 2**i, cap) for i in range(levels))


def _conv_shapes(name, cout, cin, k):
    kh, kw = (k, k) if isinstance(k, int) else k
    return [(name + ".w", (cout, cin, kh, kw)), (name + ".b", (cout,))]


def _fire_shapes(name, cin, cout):
    if cout % 2:
        raise ValueError("fire output channels must be even")
    sq = max(cin // 4, 1)
    return (
        _conv_shapes(name + ".squeeze", sq, cin, 1)
        + _conv_shapes(name + ".local", cout // 2, sq, 3)
        + _conv_shapes(name + ".context", cout // 2, sq, 3)
    )


@dataclass(frozen=True)
class NetConfig:
    view: View
    widths: tuple[int, ...]
    input_shape: tuple[int, int, int] | None = None

    @classmethod
    def front(cls, base: int = 8, cap: int = 64, input_shape=FRONT_SHAPE) -> NetConfig:
        return cls(View.FRONT, _widths(base, 3, cap), input_shape)

    @classmethod
    def bev(cls, base: int = 8, cap: int = 64, input_shape=BEV_SHAPE) -> NetConfig:
        return cls(View.BEV, _widths(base, 6, cap), input_shape)

    @property
    def in_channels(self) -> int:
        if self.input_shape is not None:
            return self.input_shape[2]
        return FRONT_SHAPE[2] if self.view is View.FRONT else BEV_SHAPE[2]

    @property
    def n_outputs(self) -> int:
        return 3 if self.view is View.FRONT else 5

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in the order they are serialized."""
        w, cin = self.widths, self.in_channels
        s = []
        if self.view is View.FRONT:
            s += _conv_shapes("enc1", w[0], cin, (7, 15))
            s += _conv_shapes("enc2", w[1], w[0], 3)
            s += _conv_shapes("enc3", w[2], w[1], 3)
            s += _conv_shapes("dec2.up", w[1], w[2], 3) + _conv_shapes("dec2.merge", w[1], 2 * w[1], 3)
            s += _conv_shapes("head2", 2, w[1], 1)
            s += _conv_shapes("dec1.up", w[0], w[1], 3) + _conv_shapes("dec1.merge", w[0], 2 * w[0], 3)
            s += _conv_shapes("head1", 2, w[0], 1)
            s += _conv_shapes("dec0.up", w[0], w[0], 3) + _conv_shapes("dec0.merge", w[0], w[0] + cin, 3)
            s += _conv_shapes("head0", 2, w[0], 1)
        else:
            s += _conv_shapes("stem", w[0], cin, 3)
            for l in range(1, 6):
                s += _conv_shapes(f"down{l}", w[l], w[l - 1], 3) + _fire_shapes(f"efire{l}", w[l], w[l])
            for l in range(4, -1, -1):
                s += _conv_shapes(f"up{l}", w[l], w[l + 1], 3) + _fire_shapes(f"dfire{l}", 2 * w[l], w[l])
                s += _conv_shapes(f"head{l}", 2, w[l], 1)
        return s


def init_weights(cfg: NetConfig, seed=0, dtype=np.float64) -> dict[str, np.ndarray]:
    """He-normal weights; small positive biases keep toy-width ReLUs off their kink."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in cfg.param_shapes():
        if name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype)
        else:
            params[name] = rng.uniform(0.05, 0.15, shape).astype(dtype)
    return params


def _as_chw(image, cfg: NetConfig) -> np.ndarray:
    grid = getattr(image, "grid", image)
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"image must be H x W x C, got shape {grid.shape}")
    if cfg.input_shape is not None and tuple(grid.shape) != tuple(cfg.input_shape):
        raise ValueError(f"{cfg.view.value} net expects input {cfg.input_shape}, got {grid.shape}")
    if grid.shape[2] != cfg.in_channels:
        raise ValueError(f"{cfg.view.value} net expects {cfg.in_channels} channels, got {grid.shape[2]}")
    scale = FRONT_INPUT_SCALE if cfg.view is View.FRONT else BEV_INPUT_SCALE
    chw = np.moveaxis(grid, 2, 0).astype(np.float64)
    if len(scale) == chw.shape[0]:
        chw = chw * np.asarray(scale)[:, None, None]
    return np.ascontiguousarray(chw)


def _check_params(cfg: NetConfig, params: dict):
    for name, shape in cfg.param_shapes():
        if name not in params:
            raise ValueError(f"missing weight tensor {name}")
        if tuple(params[name].shape) != shape:
            raise ValueError(f"weight {name} has shape {params[name].shape}, expected {shape}")


def _graph(tape: Tape, x: Var, cfg: NetConfig) -> list[Var]:
    t = tape
    if cfg.view is View.FRONT:
        x1 = t.relu(t.conv("enc1", x, stride=(1, 2)))
        x2 = t.relu(t.conv("enc2", x1, stride=(2, 2)))
        x3 = t.relu(t.conv("enc3", x2, stride=(2, 2)))
        outs = []
        y = x3
        for lvl, skip in ((2, x2), (1, x1), (0, x)):
            up = t.relu(t.conv(f"dec{lvl}.up", t.upsample(y, skip.value.shape[1:])))
            y = t.relu(t.conv(f"dec{lvl}.merge", t.concat(up, skip)))
            outs.append(t.softmax(t.conv(f"head{lvl}", y)))
        return outs
    skips = [t.relu(t.conv("stem", x))]
    for l in range(1, 6):
        d = t.relu(t.conv(f"down{l}", skips[-1], stride=(2, 2)))
        skips.append(t.fire(f"efire{l}", d))
    y = skips[5]
    outs = []
    for l in range(4, -1, -1):
        up = t.relu(t.conv(f"up{l}", t.upsample(y, skips[l].value.shape[1:])))
        y = t.fire(f"dfire{l}", t.concat(up, skips[l]))
        outs.append(t.softmax(t.conv(f"head{l}", y)))
    return outs


def net_forward(image, weights: dict, cfg: NetConfig) -> list[np.ndarray]:
    """Class probability maps ``(2, h, w)`` from coarse to fine; index 1 is movable."""
    _check_params(cfg, weights)
    tape = Tape(weights, record=False)
    x = _as_chw(image, cfg).astype(next(iter(weights.values())).dtype)
    return [o.value for o in _graph(tape, Var(x), cfg)]


def loss_and_grad(image, gt_mask, weights: dict, cfg: NetConfig, loss_cfg: LossConfig):
    """Multi-resolution loss and its gradient with respect to every weight."""
    _check_params(cfg, weights)
    if loss_cfg.m != cfg.n_outputs:
        raise ValueError(f"loss expects {loss_cfg.m} resolutions, network has {cfg.n_outputs}")
    tape = Tape(weights)
    x = Var(_as_chw(image, cfg).astype(np.float64))
    outs = _graph(tape, x, cfg)
    preds = [o.value for o in outs]
    gts = multiscale_targets(gt_mask, preds)
    loss = multiscale_loss(preds, gts, loss_cfg)
    for out, gt, lam in zip(outs, gts, loss_cfg.lambdas):
        p = out.value
        n = gt.size
        g = np.zeros_like(p)
        w = np.where(gt, loss_cfg.omega, 1.0)
        g[1] = np.where(gt, -lam * w / (n * p[1]), 0.0)
        g[0] = np.where(gt, 0.0, -lam * w / (n * p[0]))
        out.accumulate(g)
    return loss, tape.backward()
