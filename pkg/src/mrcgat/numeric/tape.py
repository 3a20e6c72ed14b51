"""Minimal reverse-mode differentiation tape.

Only the primitives the relational attention model needs are provided.
Every primitive works on float64 arrays with optional leading batch axes
(used for attention heads) and records a closure computing its
vector-Jacobian product.

>>> t = Tape()
>>> x = t.leaf(np.array([[1.0, -2.0]]))
>>> y = t.elu(x)
>>> t.backward(t.focal(t.segment_softmax(y, [0], axis=-1), 0, 0.0))
>>> t.grad(x).shape
(1, 2)
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mrcgat.errors import ShapeError

FOCAL_EPS = 1e-12


class Var:
    __slots__ = ("value", "index")

    def __init__(self, value: np.ndarray, index: int):
        self.value = value
        self.index = index

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.value.shape})"


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _segment_counts(offsets: np.ndarray, length: int) -> np.ndarray:
    counts = np.diff(np.append(offsets, length))
    if offsets.size == 0 or offsets[0] != 0 or np.any(counts <= 0):
        raise ShapeError("segments must start at 0 and be nonempty")
    return counts


class Tape:
    """Records primitive operations for one forward pass."""

    def __init__(self):
        self._nodes: list[Var] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._grads: list[np.ndarray | None] | None = None

    def __len__(self) -> int:
        return len(self._nodes)

    def _push(self, value: np.ndarray, parents: Sequence[Var], vjp: Callable | None) -> Var:
        v = Var(value, len(self._nodes))
        self._nodes.append(v)
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(vjp)
        return v

    def leaf(self, value) -> Var:
        return self._push(np.asarray(value, dtype=np.float64), (), None)

    # -- linear algebra -------------------------------------------------

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
            raise ShapeError(f"matmul shapes {av.shape} and {bv.shape} do not conform")

        def vjp(g):
            ga = g @ np.swapaxes(bv, -1, -2)
            gb = np.swapaxes(av, -1, -2) @ g
            return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

        return self._push(av @ bv, (a, b), vjp)

    def add(self, a: Var, b: Var) -> Var:
        try:
            out = a.value + b.value
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc
        sa, sb = a.shape, b.shape
        return self._push(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def scale(self, a: Var, c: float) -> Var:
        c = float(c)
        return self._push(a.value * c, (a,), lambda g: (g * c,))

    def concat(self, xs: Sequence[Var], axis: int = -1) -> Var:
        try:
            out = np.concatenate([x.value for x in xs], axis=axis)
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc
        bounds = np.cumsum([x.value.shape[axis] for x in xs])[:-1]
        return self._push(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))

    def reshape(self, a: Var, shape: tuple) -> Var:
        old = a.shape
        try:
            out = a.value.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc
        return self._push(out, (a,), lambda g: (g.reshape(old),))

    def merge_heads(self, a: Var, mode: str) -> Var:
        """Combine a ``(heads, N, w)`` stack into ``(N, heads*w)`` or ``(N, w)``."""
        k, n, w = a.shape
        if mode == "concat":
            out = np.moveaxis(a.value, 0, 1).reshape(n, k * w)
            return self._push(out, (a,), lambda g: (np.moveaxis(g.reshape(n, k, w), 1, 0),))
        if mode == "mean":
            out = a.value.mean(axis=0)
            return self._push(out, (a,), lambda g: (np.broadcast_to(g / k, (k, n, w)),))
        raise ValueError(f"unknown head combination {mode!r}")

    def gather_rows(self, a: Var, idx) -> Var:
        """Select rows (axis -2) by integer index, repeats allowed."""
        idx = np.asarray(idx, dtype=np.intp)
        av = a.value
        if av.ndim < 2:
            raise ShapeError("gather_rows needs at least a 2-D operand")

        def vjp(g):
            ga = np.zeros_like(av)
            np.add.at(np.moveaxis(ga, -2, 0), idx, np.moveaxis(g, -2, 0))
            return (ga,)

        return self._push(av[..., idx, :], (a,), vjp)

    # -- pointwise ------------------------------------------------------

    def leaky_relu(self, a: Var, slope: float = 0.2) -> Var:
        x = a.value
        d = np.where(x > 0, 1.0, slope)
        return self._push(x * d, (a,), lambda g: (g * d,))

    def relu(self, a: Var) -> Var:
        x = a.value
        d = (x > 0).astype(np.float64)
        return self._push(x * d, (a,), lambda g: (g * d,))

    def elu(self, a: Var) -> Var:
        x = a.value
        pos = x > 0
        ex = np.exp(np.where(pos, 0.0, x))
        out = np.where(pos, x, ex - 1.0)
        d = np.where(pos, 1.0, ex)
        return self._push(out, (a,), lambda g: (g * d,))

    def log(self, a: Var) -> Var:
        x = a.value
        return self._push(np.log(x), (a,), lambda g: (g / x,))

    def dropout(self, a: Var, mask: np.ndarray | None) -> Var:
        """Multiply by a pre-scaled keep mask; ``None`` is the identity."""
        if mask is None:
            return a
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != a.shape:
            raise ShapeError(f"dropout mask {mask.shape} does not match {a.shape}")
        return self._push(a.value * mask, (a,), lambda g: (g * mask,))

    # -- grouped ops ----------------------------------------------------

    def segment_softmax(self, a: Var, offsets, axis: int = -2) -> Var:
        """Softmax within contiguous segments along ``axis``.

        ``offsets`` lists the start index of each segment; segments must
        be nonempty and cover the axis.
        """
        offsets = np.asarray(offsets, dtype=np.intp)
        x = np.moveaxis(a.value, axis, 0)
        counts = _segment_counts(offsets, x.shape[0])
        m = np.repeat(np.maximum.reduceat(x, offsets, axis=0), counts, axis=0)
        e = np.exp(x - m)
        y = e / np.repeat(np.add.reduceat(e, offsets, axis=0), counts, axis=0)

        def vjp(g):
            gm = np.moveaxis(g, axis, 0)
            s = np.repeat(np.add.reduceat(gm * y, offsets, axis=0), counts, axis=0)
            return (np.moveaxis(y * (gm - s), 0, axis),)

        return self._push(np.moveaxis(y, 0, axis), (a,), vjp)

    def weighted_neighbor_sum(self, h: Var, alpha: Var, src, offsets) -> Var:
        """``out[i] = sum_{e in segment i} alpha[e] * h[src[e]]``.

        ``h`` is ``(..., M, w)``, ``alpha`` is ``(..., E, 1)`` and edges are
        grouped by destination into contiguous segments given by ``offsets``.
        """
        src = np.asarray(src, dtype=np.intp)
        offsets = np.asarray(offsets, dtype=np.intp)
        hv, av = h.value, alpha.value
        if av.shape[-2] != src.size or av.shape[-1] != 1:
            raise ShapeError(f"alpha shape {av.shape} does not match {src.size} edges")
        counts = _segment_counts(offsets, src.size)
        hs = hv[..., src, :]
        out = np.add.reduceat(av * hs, offsets, axis=-2)

        def vjp(g):
            ge = np.repeat(g, counts, axis=-2)
            galpha = (ge * hs).sum(axis=-1, keepdims=True)
            gh = np.zeros_like(hv)
            np.add.at(np.moveaxis(gh, -2, 0), src, np.moveaxis(av * ge, -2, 0))
            return _unbroadcast(gh, hv.shape), _unbroadcast(galpha, av.shape)

        return self._push(out, (h, alpha), vjp)

    def focal(self, p: Var, target: int, gamma: float) -> Var:
        """Scalar focal loss ``-(1 - p_c)^gamma * log(p_c)`` on a probability row."""
        pv = p.value.reshape(-1)
        pc_raw = pv[target]
        pc = max(pc_raw, FOCAL_EPS)
        one_minus = 1.0 - pc
        logp = np.log(pc)
        loss = -(one_minus ** gamma) * logp
        if pc_raw < FOCAL_EPS:
            d = 0.0
        elif gamma == 0.0:
            d = -1.0 / pc
        else:
            d = gamma * one_minus ** (gamma - 1.0) * logp - one_minus ** gamma / pc
        shape = p.shape

        def vjp(g):
            gp = np.zeros(pv.size)
            gp[target] = float(g) * d
            return (gp.reshape(shape),)

        return self._push(np.asarray(loss), (p,), vjp)

    # -- reverse pass ---------------------------------------------------

    def backward(self, out: Var, seed: np.ndarray | None = None) -> None:
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[out.index] = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for i in range(out.index, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for pidx, pg in zip(self._parents[i], vjp(g)):
                if grads[pidx] is None:
                    grads[pidx] = np.array(pg, dtype=np.float64)
                else:
                    grads[pidx] = grads[pidx] + pg
        self._grads = grads

    def grad(self, v: Var) -> np.ndarray:
        """Adjoint of ``v`` from the last backward pass (zeros if unreached)."""
        if self._grads is None:
            raise RuntimeError("backward() has not been run")
        g = self._grads[v.index]
        return np.zeros_like(v.value) if g is None else g
