"""Compiled inner loops.

The forward convolution accumulates every output element over
(in_channel, kernel_row, kernel_col) in that order, starting from 0.0, so it
reproduces a naive direct-convolution loop bit for bit. numba does not
contract the multiply-add into an FMA unless fastmath is enabled.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def _conv_s1(x, w):
    b, ci, hp, wp = x.shape
    co, _, k, _ = w.shape
    ho = hp - k + 1
    wo = wp - k + 1
    span = (ho - 1) * wp + wo
    out = np.zeros((b, co, ho * wp))
    xf = x.reshape(b, ci, hp * wp)
    for n in range(b):
        for c in range(ci):
            for ki in range(k):
                for kj in range(k):
                    off = ki * wp + kj
                    src = xf[n, c, off:off + span]
                    for o in range(co):
                        wv = w[o, c, ki, kj]
                        dst = out[n, o]
                        for p in range(span):
                            dst[p] += wv * src[p]
    return out.reshape(b, co, ho, wp)[:, :, :, :wo].copy()


@numba.njit(cache=True)
def _conv_strided(x, w, stride):
    b, ci, hp, wp = x.shape
    co, _, k, _ = w.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    out = np.zeros((b, co, ho, wo))
    for n in range(b):
        for c in range(ci):
            for ki in range(k):
                for kj in range(k):
                    for o in range(co):
                        wv = w[o, c, ki, kj]
                        for i in range(ho):
                            row = x[n, c, i * stride + ki]
                            for j in range(wo):
                                out[n, o, i, j] += wv * row[j * stride + kj]
    return out


def conv2d_forward(xpad, w, stride):
    xpad = np.ascontiguousarray(xpad, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if stride == 1:
        return _conv_s1(xpad, w)
    return _conv_strided(xpad, w, stride)
