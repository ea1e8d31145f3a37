"""Patch extraction and scatter for 2-D convolution.

Images are NCHW; conv weights are HWIO (fh, fw, cin, cout). ``im2col``
flattens each receptive field to a row ordered (fh, fw, cin), so a patch
matrix multiplied by ``weights.reshape(fh*fw*cin, cout)`` is the
convolution. Both the float trainer and the integer engine go through these
helpers, which keeps their summation layouts identical.
"""

from __future__ import annotations

import numpy as np


def conv_output_hw(ih: int, iw: int, fh: int, fw: int, stride: int = 1, pad: int = 0):
    """Output spatial size of a conv; raises if the kernel does not fit."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    oh = (ih + 2 * pad - fh) // stride + 1
    ow = (iw + 2 * pad - fw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"kernel {fh}x{fw} does not fit a {ih}x{iw} input with pad {pad}"
        )
    return oh, ow


def im2col(x: np.ndarray, fh: int, fw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """(N, C, H, W) -> (N*oh*ow, fh*fw*C) patch matrix."""
    n, c, h, w = x.shape
    oh, ow = conv_output_hw(h, w, fh, fw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, fh, fw, oh, ow), dtype=x.dtype)
    for i in range(fh):
        for j in range(fw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride,
                                 j : j + stride * ow : stride]
    return cols.transpose(0, 4, 5, 2, 3, 1).reshape(n * oh * ow, fh * fw * c)


def col2im(cols: np.ndarray, x_shape, fh: int, fw: int,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch rows back onto an (N, C, H, W) grid."""
    n, c, h, w = x_shape
    oh, ow = conv_output_hw(h, w, fh, fw, stride, pad)
    cols = cols.reshape(n, oh, ow, fh, fw, c).transpose(0, 5, 3, 4, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(fh):
        for j in range(fw):
            out[:, :, i : i + stride * oh : stride,
                j : j + stride * ow : stride] += cols[:, :, i, j]
    return out[:, :, pad : pad + h, pad : pad + w]


def conv2d_gemm(x: np.ndarray, weights: np.ndarray,
                stride: int = 1, pad: int = 0) -> np.ndarray:
    """Convolve NCHW input with HWIO weights via one matrix product."""
    fh, fw, cin, cout = weights.shape
    n, c, h, w = x.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, weights expect {cin}")
    cols = im2col(x, fh, fw, stride, pad)
    out = cols @ weights.reshape(fh * fw * cin, cout)
    oh, ow = conv_output_hw(h, w, fh, fw, stride, pad)
    return out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
