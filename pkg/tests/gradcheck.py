"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from mrcgat.numeric import Tape

STEP = 1e-5


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return np.abs(a - b).max(initial=0.0) / denom


def check(fn, arrays, seed=0, step=STEP):
    """Compare tape gradients of ``sum(w * fn(...))`` with central differences.

    ``fn(tape, *vars)`` builds the graph; a fixed random cotangent ``w``
    turns the output into a scalar so every VJP entry is exercised.
    Returns the worst relative error across inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tape = Tape()
    vs = [tape.leaf(a) for a in arrays]
    out = fn(tape, *vs)
    w = np.random.default_rng(seed).normal(size=out.shape)
    tape.backward(out, seed=w)
    worst = 0.0
    for k, a in enumerate(arrays):
        num = np.zeros_like(a)
        for ix in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][ix] += step
            minus[k][ix] -= step
            tp, tm = Tape(), Tape()
            fp = fn(tp, *[tp.leaf(x) for x in plus]).value
            fm = fn(tm, *[tm.leaf(x) for x in minus]).value
            num[ix] = (np.sum(w * fp) - np.sum(w * fm)) / (2 * step)
        worst = max(worst, rel_err(tape.grad(vs[k]), num))
    return worst
