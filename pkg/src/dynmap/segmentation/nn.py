"""Minimal numpy layers with hand-written backward passes.

Tensors are single images laid out ``(C, H, W)``. Operations record their
backward closures on a :class:`Tape`; ``Tape.backward`` walks them in reverse.
"""

from __future__ import annotations

import math

import numpy as np


class Var:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None

    def accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g


class Tape:
    def __init__(self, params: dict, record: bool = True):
        self.params = params
        self.record = record
        self.param_vars = {k: Var(v) for k, v in params.items()}
        self._ops = []

    def _push(self, fn):
        if self.record:
            self._ops.append(fn)

    def backward(self) -> dict:
        """Propagate gradients already seeded on output vars; return parameter grads."""
        for fn in reversed(self._ops):
            fn()
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in self.param_vars.items()}

    # --- ops ---------------------------------------------------------------

    def conv(self, name: str, x: Var, stride=(1, 1), dilation: int = 1) -> Var:
        w, b = self.param_vars[name + ".w"], self.param_vars[name + ".b"]
        y, cache = conv2d(x.value, w.value, b.value, stride, dilation)
        out = Var(y)

        def back():
            if out.grad is None:
                return
            dx, dw, db = conv2d_backward(out.grad, cache)
            x.accumulate(dx)
            w.accumulate(dw)
            b.accumulate(db)

        self._push(back)
        return out

    def relu(self, x: Var) -> Var:
        mask = x.value > 0
        out = Var(np.where(mask, x.value, 0.0))

        def back():
            if out.grad is not None:
                x.accumulate(out.grad * mask)

        self._push(back)
        return out

    def concat(self, *xs: Var) -> Var:
        out = Var(np.concatenate([x.value for x in xs], axis=0))
        splits = np.cumsum([x.value.shape[0] for x in xs])[:-1]

        def back():
            if out.grad is None:
                return
            for x, g in zip(xs, np.split(out.grad, splits, axis=0)):
                x.accumulate(g)

        self._push(back)
        return out

    def upsample(self, x: Var, size: tuple[int, int]) -> Var:
        c, h, w = x.value.shape
        fy, fx = math.ceil(size[0] / h), math.ceil(size[1] / w)
        y = x.value.repeat(fy, axis=1).repeat(fx, axis=2)[:, : size[0], : size[1]]
        out = Var(y)

        def back():
            if out.grad is None:
                return
            full = np.zeros((c, h * fy, w * fx), dtype=out.grad.dtype)
            full[:, : size[0], : size[1]] = out.grad
            x.accumulate(full.reshape(c, h, fy, w, fx).sum(axis=(2, 4)))

        self._push(back)
        return out

    def fire(self, name: str, x: Var) -> Var:
        sq = self.relu(self.conv(name + ".squeeze", x))
        local = self.relu(self.conv(name + ".local", sq))
        context = self.relu(self.conv(name + ".context", sq, dilation=2))
        return self.concat(local, context)

    def softmax(self, z: Var) -> Var:
        e = np.exp(z.value - z.value.max(axis=0, keepdims=True))
        p = e / e.sum(axis=0, keepdims=True)
        out = Var(p)

        def back():
            if out.grad is None:
                return
            g = out.grad
            z.accumulate(p * (g - (g * p).sum(axis=0, keepdims=True)))

        self._push(back)
        return out


def same_padding(n: int, k: int, stride: int, dilation: int) -> tuple[int, int, int]:
    out = math.ceil(n / stride)
    ke = dilation * (k - 1) + 1
    total = max((out - 1) * stride + ke - n, 0)
    return out, total // 2, total - total // 2


def conv2d(x, w, b, stride=(1, 1), dilation: int = 1):
    """'Same' convolution; output spatial size is ``ceil(in / stride)``."""
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv expects {cin_w} input channels, got {cin}")
    sh, sw = stride
    oh, pt, pb = same_padding(h, kh, sh, dilation)
    ow, pl, pr = same_padding(wd, kw, sw, dilation)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    y = np.empty((cout, oh * ow), dtype=np.result_type(x, w))
    y[:] = b[:, None]
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, i * dilation : i * dilation + (oh - 1) * sh + 1 : sh, j * dilation : j * dilation + (ow - 1) * sw + 1 : sw]
            y += w[:, :, i, j] @ sl.reshape(cin, -1)
    cache = (xp.shape, (pt, pl), (h, wd), w, xp, stride, dilation, (oh, ow))
    return y.reshape(cout, oh, ow), cache


def conv2d_backward(dy, cache):
    xp_shape, (pt, pl), (h, wd), w, xp, (sh, sw), dilation, (oh, ow) = cache
    cout, cin, kh, kw = w.shape
    dyf = dy.reshape(cout, -1)
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    dw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            rs = slice(i * dilation, i * dilation + (oh - 1) * sh + 1, sh)
            cs = slice(j * dilation, j * dilation + (ow - 1) * sw + 1, sw)
            dw[:, :, i, j] = dyf @ xp[:, rs, cs].reshape(cin, -1).T
            dxp[:, rs, cs] += (w[:, :, i, j].T @ dyf).reshape(cin, oh, ow)
    return dxp[:, pt : pt + h, pl : pl + wd], dw, dyf.sum(axis=1)
