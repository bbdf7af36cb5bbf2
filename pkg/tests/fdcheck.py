"""Central finite-difference oracles for gradient checks.

Everything here works on float64 copies with h=1e-5; the analytic side is
whatever the tape produces. Relative error is measured against the analytic
value with a 1e-8 floor.
"""

import numpy as np

from pancraft import tensor as T


def rel_err(analytic: np.ndarray, fd: np.ndarray, atol: float = 0.0) -> float:
    """max |analytic - fd| / (|analytic| + 1e-8).

    `atol` guards structurally-zero gradients (e.g. key biases under softmax
    shift invariance): where both sides sit below it, only central-difference
    round-off (~1e-10 at h=1e-5) remains and the coordinate counts as exact.
    """
    err = np.abs(analytic - fd) / (np.abs(analytic) + 1e-8)
    if atol:
        err = np.where((np.abs(analytic) <= atol) & (np.abs(fd) <= atol), 0.0, err)
    return float(np.max(err))


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f() w.r.t. every element of arr (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def numeric_grad_at(f, arr: np.ndarray, idxs, h: float = 1e-5) -> np.ndarray:
    """Central differences at selected flat indices only."""
    flat = arr.reshape(-1)
    out = np.zeros(len(idxs))
    for j, i in enumerate(idxs):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def check_op(build, arrays, h: float = 1e-5, atol: float = 0.0) -> float:
    """Compare tape gradients of a scalar-producing `build(*tensors)` to FD.

    `arrays` are float64 ndarrays; each becomes a leaf tensor with a gradient
    buffer. Returns the worst relative error across all inputs.
    """
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = build(*leaves)
        tape.backward(loss)
    analytic = [lf.grad.copy() for lf in leaves]

    def f():
        vals = [T.Tensor(a) for a in arrays]
        return float(build(*vals).data.reshape(()))

    worst = 0.0
    for arr, ana in zip(arrays, analytic):
        fd = numeric_grad(f, arr, h=h)
        worst = max(worst, rel_err(ana, fd, atol=atol))
    return worst


def weighted_sum(out, seed: int = 7):
    """Random-projection scalar probe; harder to fool than a plain sum."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tsum(out * T.Tensor(r, dtype=out.dtype))
