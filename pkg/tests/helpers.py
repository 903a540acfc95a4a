"""Shared numeric oracles for the test suite."""

import numpy as np

from clearcomm.tensor import Tensor


def fd_grad(f, x, step=1e-5):
    """Central finite differences of a scalar function at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def rel_err(a, b):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) / scale


def check_grad(make_loss, arrays, tol=1e-4, step=1e-5):
    """Compare tape gradients of make_loss(*tensors) against central
    differences, one held-out argument at a time."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = make_loss(*tensors)
    loss.backward()
    for i, a in enumerate(arrays):
        def f(probe, i=i):
            args = [Tensor(x.copy()) for x in arrays]
            args[i] = Tensor(probe)
            return float(make_loss(*args).data)

        num = fd_grad(f, a, step)
        got = tensors[i].grad
        assert got is not None, f"argument {i} received no gradient"
        err = rel_err(got, num)
        assert err < tol, f"argument {i}: rel err {err:.3e} >= {tol}"


def conv_reference(x, w, stride, padding):
    """Direct nested-summation 2-D cross-correlation (the slow oracle)."""
    n, ci, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u,
                                          j * stride + v] * w[f, c, u, v]
                    out[b, f, i, j] = acc
    return out
