"""Shared test oracles: finite-difference gradients and a reference conv."""

from __future__ import annotations

import numpy as np

from shapegen.tensor import GradientTape, Tensor, backward


def fd_gradient(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x, elementwise."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def gradcheck(build, arrays: list[np.ndarray], tol: float = 1e-3, h: float = 1e-3):
    """Compare tape gradients of `build(tensors) -> scalar Tensor` against
    central differences for every input array.

    Error metric per element: |analytic - fd| / max(1, |fd|), i.e. relative
    with an absolute floor of 1 so near-zero gradients are judged absolutely.
    """
    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        loss = build(params)
    grads = backward(tape, loss)
    for k, (p, a) in enumerate(zip(params, arrays)):
        def f(x, k=k):
            probe = [Tensor(arr) for arr in arrays]
            probe[k] = Tensor(x)
            return float(build(probe).data.astype(np.float64).reshape(()))

        fd = fd_gradient(f, a.copy(), h=h)
        an = grads[p.uid].data.astype(np.float64)
        err = np.abs(an - fd) / np.maximum(1.0, np.abs(fd))
        assert err.max() <= tol, (
            f"gradient mismatch on input {k}: max rel err {err.max():.2e} "
            f"(analytic {an.reshape(-1)[err.argmax()]:.6f}, "
            f"fd {fd.reshape(-1)[err.argmax()]:.6f})"
        )


def conv2d_reference(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Direct nested-loop convolution; the independent oracle for conv2d."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, f, oh, ow), dtype=np.float64)
    for b in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for ki in range(kh):
                            ih = i * stride - pad + ki
                            if ih < 0 or ih >= h:
                                continue
                            for kj in range(kw):
                                iw = j * stride - pad + kj
                                if 0 <= iw < wd:
                                    acc += float(x[b, ch, ih, iw]) * float(w[o, ch, ki, kj])
                    y[b, o, i, j] = acc
    return y
