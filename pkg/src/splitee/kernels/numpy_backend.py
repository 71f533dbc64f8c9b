"""Vectorized numpy kernels: im2col convolution and strided-window pooling."""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _window_view(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """View of padded input with shape (B, C, Ho, Wo, k, k); no copy."""
    b, c, h, w = xp.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, ho, wo, k, k),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(B, C, H, W) -> (B*Ho*Wo, C*k*k) patch matrix."""
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _window_view(x, k, stride)  # B,C,Ho,Wo,k,k
    b, c, ho, wo = win.shape[:4]
    return (
        win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k),
        (b, c, ho, wo),
    )


# Cap on the per-chunk im2col buffer; keeps peak memory bounded at large
# batch sizes without changing per-element accumulation order.
_COL_BUDGET_BYTES = 128 * 1024 * 1024


def _batch_chunks(b: int, c: int, k: int, ho: int, wo: int):
    per_sample = c * k * k * ho * wo * 8
    step = max(1, _COL_BUDGET_BYTES // max(per_sample, 1))
    for lo in range(0, b, step):
        yield lo, min(lo + step, b)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlation of (B,C,H,W) with (Cout,C,k,k); no bias."""
    cout, cin, k, _ = w.shape
    b, _, h, wd = x.shape
    ho = _out_size(h, k, stride, padding)
    wo = _out_size(wd, k, stride, padding)
    wmat = w.reshape(cout, cin * k * k).T
    out = np.empty((b, cout, ho, wo))
    for lo, hi in _batch_chunks(b, cin, k, ho, wo):
        cols, (nb, _, _, _) = _im2col(x[lo:hi], k, stride, padding)
        out[lo:hi] = (cols @ wmat).reshape(nb, ho, wo, cout).transpose(0, 3, 1, 2)
    return out


def conv2d_backward_weight(
    x: np.ndarray, dout: np.ndarray, w_shape: tuple, stride: int, padding: int
) -> np.ndarray:
    cout, cin, k, _ = w_shape
    b, _, _, _ = x.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dw = np.zeros((cout, cin * k * k))
    for lo, hi in _batch_chunks(b, cin, k, ho, wo):
        cols, (nb, _, _, _) = _im2col(x[lo:hi], k, stride, padding)
        dmat = dout[lo:hi].transpose(0, 2, 3, 1).reshape(nb * ho * wo, cout)
        dw += dmat.T @ cols
    return dw.reshape(w_shape)


def conv2d_backward_input(
    w: np.ndarray, dout: np.ndarray, x_shape: tuple, stride: int, padding: int
) -> np.ndarray:
    b, cin, h, wd = x_shape
    cout, _, k, _ = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    if padding <= k - 1:
        # Input gradient as a stride-1 cross-correlation of the (dilated)
        # output gradient with the flipped, channel-swapped weights.
        dh, dw_ = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
        if stride > 1 or (dh, dw_) != (ho, wo):
            # Trailing rows/cols cut off by the stride still receive
            # gradient, so size the dilated map to span the full input.
            dil = np.zeros((b, cout, dh, dw_))
            dil[:, :, ::stride, ::stride] = dout
        else:
            dil = dout
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return conv2d_forward(dil, wt, 1, k - 1 - padding)
    # rare geometry (padding > k-1): explicit col2im scatter
    wmat = w.reshape(cout, cin * k * k)
    dxp = np.zeros((b, cin, h + 2 * padding, wd + 2 * padding))
    for lo, hi in _batch_chunks(b, cin, k, ho, wo):
        nb = hi - lo
        dmat = dout[lo:hi].transpose(0, 2, 3, 1).reshape(nb * ho * wo, cout)
        dcols = (dmat @ wmat).reshape(nb, ho, wo, cin, k, k).transpose(0, 3, 4, 5, 1, 2)
        for i in range(k):
            for j in range(k):
                dxp[lo:hi, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    dcols[:, :, i, j]
                )
    if padding > 0:
        return dxp[:, :, padding : padding + h, padding : padding + wd].copy()
    return dxp


def maxpool_forward(
    x: np.ndarray, k: int, stride: int, padding: int
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (output, argmax) where argmax holds flat in-window indices.

    Padding uses -inf so padded positions never win; ties break toward the
    first (row-major) maximum.
    """
    if padding > 0:
        x = np.pad(
            x,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=-np.inf,
        )
    win = _window_view(x, k, stride)
    b, c, ho, wo = win.shape[:4]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward(
    dout: np.ndarray, arg: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int
) -> np.ndarray:
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros(b * c * hp * wp)
    ii, jj = np.divmod(arg, k)  # in-window offsets
    rows = ii + stride * np.arange(ho)[None, None, :, None]
    cols = jj + stride * np.arange(wo)[None, None, None, :]
    base = (np.arange(b)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (
        hp * wp
    )
    np.add.at(dxp, (base + rows * wp + cols).ravel(), dout.ravel())
    dxp = dxp.reshape(b, c, hp, wp)
    if padding > 0:
        return dxp[:, :, padding : padding + h, padding : padding + w].copy()
    return dxp
