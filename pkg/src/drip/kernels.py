"""Hot numeric kernels: convolution, max pooling and the sliding-window std scan.

Every kernel exists twice, as explicit numba loops (``*_nb``) and as a
vectorised numpy formulation (``*_np``). The module-level names dispatch to
whichever backend :mod:`drip._accel` selected. Both produce float64 output;
results agree to rounding, not bit-for-bit, so determinism holds per backend.

Layouts: activations are ``(N, C, H, W)``, conv weights ``(F, C, k, k)``.
Max pooling records the flat in-window offset of the first maximum in
row-major order; the backward pass routes gradient only there.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import BACKEND, HAS_NUMBA, njit


def out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------- numba loops


@njit
def _pad_nb(x, padding):
    n, c, h, w = x.shape
    if padding == 0:
        return x
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for a in range(n):
        for b in range(c):
            for i in range(h):
                for j in range(w):
                    out[a, b, i + padding, j + padding] = x[a, b, i, j]
    return out


@njit
def conv2d_forward_nb(x, weight, bias, stride, padding):
    n, c, h, w = x.shape
    f, _, k, _ = weight.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = _pad_nb(x, padding)
    out = np.empty((n, f, ho, wo))
    for a in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = bias[o]
                    r0 = i * stride
                    c0 = j * stride
                    for ch in range(c):
                        for p in range(k):
                            for q in range(k):
                                acc += weight[o, ch, p, q] * xp[a, ch, r0 + p, c0 + q]
                    out[a, o, i, j] = acc
    return out


@njit
def conv2d_backward_nb(x, weight, grad_out, stride, padding):
    n, c, h, w = x.shape
    f, _, k, _ = weight.shape
    _, _, ho, wo = grad_out.shape
    xp = _pad_nb(x, padding)
    dxp = np.zeros(xp.shape)
    dw = np.zeros(weight.shape)
    db = np.zeros(f)
    for a in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    g = grad_out[a, o, i, j]
                    if g == 0.0:
                        continue
                    db[o] += g
                    r0 = i * stride
                    c0 = j * stride
                    for ch in range(c):
                        for p in range(k):
                            for q in range(k):
                                dw[o, ch, p, q] += g * xp[a, ch, r0 + p, c0 + q]
                                dxp[a, ch, r0 + p, c0 + q] += g * weight[o, ch, p, q]
    dx = np.empty((n, c, h, w))
    for a in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    dx[a, ch, i, j] = dxp[a, ch, i + padding, j + padding]
    return dx, dw, db


@njit
def maxpool_forward_nb(x, window, stride):
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.empty((n, c, ho, wo))
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for a in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[a, ch, i * stride, j * stride]
                    best_at = 0
                    for p in range(window):
                        for q in range(window):
                            v = x[a, ch, i * stride + p, j * stride + q]
                            if v > best:
                                best = v
                                best_at = p * window + q
                    out[a, ch, i, j] = best
                    arg[a, ch, i, j] = best_at
    return out, arg


@njit
def maxpool_backward_nb(grad_out, arg, in_shape, window, stride):
    n, c, ho, wo = grad_out.shape
    dx = np.zeros((in_shape[0], in_shape[1], in_shape[2], in_shape[3]))
    for a in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    off = arg[a, ch, i, j]
                    p = off // window
                    q = off - p * window
                    dx[a, ch, i * stride + p, j * stride + q] += grad_out[a, ch, i, j]
    return dx


@njit
def window_std_scan_nb(values, length):
    count = values.shape[0] - length + 1
    out = np.empty(count)
    for start in range(count):
        total = 0.0
        for t in range(start, start + length):
            total += values[t]
        mean = total / length
        sq = 0.0
        for t in range(start, start + length):
            d = values[t] - mean
            sq += d * d
        out[start] = np.sqrt(sq / length)
    return out


# ---------------------------------------------------------------- numpy paths


def _windows(xp, k, stride):
    # (N, C, Ho, Wo, k, k) strided view
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward_np(x, weight, bias, stride, padding):
    k = weight.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, stride)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, F
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward_np(x, weight, grad_out, stride, padding):
    k = weight.shape[2]
    n, c, h, w = x.shape
    ho, wo = grad_out.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, stride)
    dw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # F, C, k, k
    db = grad_out.sum(axis=(0, 2, 3))
    dxp = np.zeros(xp.shape)
    for p in range(k):
        for q in range(k):
            contrib = np.tensordot(weight[:, :, p, q], grad_out, axes=([0], [1]))  # C, N, Ho, Wo
            dxp[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride] += contrib.transpose(1, 0, 2, 3)
    dx = np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w])
    return dx, dw, db


def maxpool_forward_np(x, window, stride):
    win = _windows(x, window, stride)
    flat = win.reshape(win.shape[:4] + (window * window,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward_np(grad_out, arg, in_shape, window, stride):
    dx = np.zeros(tuple(in_shape))
    ho, wo = grad_out.shape[2:]
    for off in range(window * window):
        p, q = divmod(off, window)
        dx[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride] += np.where(arg == off, grad_out, 0.0)
    return dx


def window_std_scan_np(values, length):
    win = sliding_window_view(values, length)
    mean = win.sum(axis=1) / length
    dev = win - mean[:, None]
    return np.sqrt((dev * dev).sum(axis=1) / length)


# ---------------------------------------------------------------- dispatch

NUMBA = {
    "conv2d_forward": conv2d_forward_nb,
    "conv2d_backward": conv2d_backward_nb,
    "maxpool_forward": maxpool_forward_nb,
    "maxpool_backward": maxpool_backward_nb,
    "window_std_scan": window_std_scan_nb,
}
NUMPY = {
    "conv2d_forward": conv2d_forward_np,
    "conv2d_backward": conv2d_backward_np,
    "maxpool_forward": maxpool_forward_np,
    "maxpool_backward": maxpool_backward_np,
    "window_std_scan": window_std_scan_np,
}
ACTIVE = NUMBA if (BACKEND == "numba" and HAS_NUMBA) else NUMPY


def conv2d_forward(x, weight, bias, stride, padding):
    return ACTIVE["conv2d_forward"](x, weight, bias, stride, padding)


def conv2d_backward(x, weight, grad_out, stride, padding):
    """Return ``(dx, dweight, dbias)`` for a zero-padded strided convolution."""
    return ACTIVE["conv2d_backward"](x, weight, grad_out, stride, padding)


def maxpool_forward(x, window, stride):
    return ACTIVE["maxpool_forward"](x, window, stride)


def maxpool_backward(grad_out, arg, in_shape, window, stride):
    return ACTIVE["maxpool_backward"](grad_out, arg, np.asarray(in_shape, dtype=np.int64), window, stride)


def window_std_scan(values, length):
    """Population std of every contiguous ``length``-window of ``values``."""
    return ACTIVE["window_std_scan"](np.ascontiguousarray(values, dtype=np.float64), int(length))
