"""Hot numeric kernels with two interchangeable backends.

The convolution path is im2col -> GEMM -> col2im. The GEMM always goes
through BLAS; only the gather (im2col) and scatter (col2im) stages differ
between backends:

  * "numba": @njit loops compiled on first use, writing contiguous row
    segments per (channel, kernel-offset) slot.
  * "numpy": stride-trick / sliced-add implementations of the same layout.

Both backends accumulate in the same order, so results are bit-identical.
The column matrix is kept transposed, (C*KH*KW, N*OH*OW), which makes the
inner copies contiguous; BLAS consumes the transposed view for free.
Select with the SHAPEGEN_KERNELS environment variable ("numba" or "numpy");
the default is "numba" when numba imports cleanly. `benchmarks/bench_kernels.py`
compares the two.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _NUMBA_OK = True
except ImportError:  # pragma: no cover - exercised only without numba
    _NUMBA_OK = False


_VALID_BACKENDS = ("numba", "numpy")


def _default_backend() -> str:
    env = os.environ.get("SHAPEGEN_KERNELS", "").strip().lower()
    if env:
        if env not in _VALID_BACKENDS:
            raise ValueError(
                f"SHAPEGEN_KERNELS={env!r}: expected one of {_VALID_BACKENDS}"
            )
        if env == "numba" and not _NUMBA_OK:
            raise ValueError("SHAPEGEN_KERNELS=numba but numba is not importable")
        return env
    return "numba" if _NUMBA_OK else "numpy"


_backend = _default_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime (used by tests and the benchmark)."""
    global _backend
    if name not in _VALID_BACKENDS:
        raise ValueError(f"unknown backend {name!r}: expected one of {_VALID_BACKENDS}")
    if name == "numba" and not _NUMBA_OK:
        raise ValueError("numba backend requested but numba is not importable")
    _backend = name


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy backend: cols_t is (C*KH*KW, N*OH*OW)
# ---------------------------------------------------------------------------


def _im2col_np(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        (c, kh, kw, n, oh, ow),
        (s[1], s[2], s[3], s[0], s[2] * stride, s[3] * stride),
    )
    return np.ascontiguousarray(windows).reshape(c * kh * kw, n * oh * ow)


def _col2im_np(gcols_t, n, c, h, w, kh, kw, stride, pad):
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    g = gcols_t.reshape(c, kh, kw, n, oh, ow)
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                g[:, i, j].transpose(1, 0, 2, 3)
            )
    return gx[:, :, pad : pad + h, pad : pad + w] if pad else gx


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if _NUMBA_OK:

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad):
        n, c, h, w = x.shape
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        cols = np.zeros((c * kh * kw, n * oh * ow), dtype=np.float32)
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    k = (ch * kh + i) * kw + j
                    for b in range(n):
                        for y in range(oh):
                            ih = y * stride - pad + i
                            if ih < 0 or ih >= h:
                                continue
                            row0 = (b * oh + y) * ow
                            for z in range(ow):
                                iw = z * stride - pad + j
                                if 0 <= iw < w:
                                    cols[k, row0 + z] = x[b, ch, ih, iw]
        return cols

    @njit(cache=True)
    def _col2im_nb(gcols_t, n, c, h, w, kh, kw, stride, pad):
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        gx = np.zeros((n, c, h, w), dtype=np.float32)
        # same (kh, kw)-major accumulation order as the numpy backend
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    for ch in range(c):
                        k = (ch * kh + i) * kw + j
                        for y in range(oh):
                            ih = y * stride - pad + i
                            if ih < 0 or ih >= h:
                                continue
                            row0 = (b * oh + y) * ow
                            for z in range(ow):
                                iw = z * stride - pad + j
                                if 0 <= iw < w:
                                    gx[b, ch, ih, iw] += gcols_t[k, row0 + z]
        return gx


def warmup() -> None:
    """Trigger numba compilation so timings and training steps are not skewed."""
    if _backend != "numba":
        return
    x = np.ones((1, 2, 4, 4), dtype=np.float32)
    w = np.ones((2, 2, 3, 3), dtype=np.float32)
    for stride in (1, 2):
        y = conv2d_forward(x, w, stride, 1)
        conv2d_backward(np.zeros_like(y), x, w, stride, 1)


def _im2col(x, kh, kw, stride, pad):
    if _backend == "numba":
        return _im2col_nb(x, kh, kw, stride, pad)
    return _im2col_np(x, kh, kw, stride, pad)


# ---------------------------------------------------------------------------
# public conv ops (backend-independent GEMM in the middle)
# ---------------------------------------------------------------------------


def _is_pointwise(w: np.ndarray, stride: int, pad: int) -> bool:
    return w.shape[2] == 1 and w.shape[3] == 1 and stride == 1 and pad == 0


def conv2d_forward_with_cols(
    x: np.ndarray, w: np.ndarray, stride: int, pad: int
) -> tuple[np.ndarray, np.ndarray]:
    """Conv plus the transposed im2col matrix, so backward can reuse it."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(wd, kw, stride, pad)
    if _is_pointwise(w, stride, pad):
        cols_t = x.reshape(n, c, h * wd).transpose(1, 0, 2).reshape(c, n * h * wd)
    else:
        cols_t = _im2col(x, kh, kw, stride, pad)
    out = w.reshape(f, -1) @ cols_t  # (F, N*OH*OW)
    out = out.reshape(f, n, oh, ow).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols_t


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """NCHW conv. x (N,C,H,W) float32, w (F,C,KH,KW) float32 -> (N,F,OH,OW)."""
    return conv2d_forward_with_cols(x, w, stride, pad)[0]


def conv2d_backward(
    g: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    stride: int,
    pad: int,
    cols_t: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dX, dW) of conv2d_forward given upstream gradient g (N,F,OH,OW)."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    pointwise = _is_pointwise(w, stride, pad)
    if cols_t is None:
        if pointwise:
            cols_t = x.reshape(n, c, h * wd).transpose(1, 0, 2).reshape(c, n * h * wd)
        else:
            cols_t = _im2col(x, kh, kw, stride, pad)
    oh, ow = g.shape[2], g.shape[3]
    grows_t = g.transpose(1, 0, 2, 3).reshape(f, n * oh * ow)  # (F, rows)
    gw = (grows_t @ cols_t.T).reshape(w.shape)
    gcols_t = w.reshape(f, -1).T @ grows_t  # (K, rows)
    if pointwise:
        gx = gcols_t.reshape(c, n, h, wd).transpose(1, 0, 2, 3)
        gx = np.ascontiguousarray(gx)
    elif _backend == "numba":
        gx = _col2im_nb(np.ascontiguousarray(gcols_t), n, c, h, wd, kh, kw, stride, pad)
    else:
        gx = _col2im_np(np.ascontiguousarray(gcols_t), n, c, h, wd, kh, kw, stride, pad)
    return gx, gw
