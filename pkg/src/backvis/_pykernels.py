"""Pure-numpy kernels, used when the compiled extension is unavailable.

Signatures and accumulation order mirror ``_ckernels.pyx``.
"""
from functools import lru_cache

import numpy as np


def _with_sentinel(index, d):
    return np.where(index < 0, d, index)


def gather_patches(x, index):
    B, d = x.shape
    padded = np.concatenate([x, np.zeros((B, 1))], axis=1)
    return padded[:, _with_sentinel(index, d)]


def scatter_patches(rows, index, d):
    B = rows.shape[0]
    target = _with_sentinel(index, d).ravel()
    flat = (np.arange(B)[:, None] * (d + 1) + target[None, :]).ravel()
    acc = np.bincount(flat, weights=rows.reshape(-1), minlength=B * (d + 1))
    return acc.reshape(B, d + 1)[:, :d]


@lru_cache(maxsize=64)
def _window_index(H, W, wh, ww, sh, sw):
    Ho = (H - wh) // sh + 1
    Wo = (W - ww) // sw + 1
    oh, ow, a, e = np.meshgrid(np.arange(Ho), np.arange(Wo), np.arange(wh),
                               np.arange(ww), indexing="ij")
    spatial = (oh * sh + a) * W + (ow * sw + e)
    return spatial.reshape(Ho * Wo, wh * ww), Ho, Wo


def maxpool_forward(x, wh, ww, sh, sw):
    B, H, W, C = x.shape
    win, Ho, Wo = _window_index(H, W, wh, ww, sh, sw)
    # [B, Ho*Wo, window, C]; np.argmax returns the first maximum in row-major
    # window order, which is also the lowest flat index
    cells = x.reshape(B, H * W, C)[:, win, :]
    pos = np.argmax(cells, axis=2)
    out = np.take_along_axis(cells, pos[:, :, None, :], axis=2)[:, :, 0, :]
    spatial = np.take_along_axis(np.broadcast_to(win[None, :, :, None], cells.shape),
                                 pos[:, :, None, :], axis=2)[:, :, 0, :]
    arg = spatial * C + np.arange(C)[None, None, :]
    return out.reshape(B, Ho, Wo, C), arg.reshape(B, Ho, Wo, C).astype(np.intp)


def maxpool_backward(grad, arg, H, W, C):
    B = grad.shape[0]
    d = H * W * C
    flat = (np.arange(B)[:, None] * d + arg.reshape(B, -1)).ravel()
    acc = np.bincount(flat, weights=grad.reshape(-1), minlength=B * d)
    return acc.reshape(B, H, W, C)
