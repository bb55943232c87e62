"""Differentiable operations used by the segmentation networks.

Every operation takes and returns :class:`Tensor` values, checks its inputs and
output for non-finite values, and appends a record to the active tape (if any).
Convolutions are cross-correlations, as in every deep learning framework.
"""

from __future__ import annotations

from typing import Optional, Tuple, Union

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, check_finite, record

Padding = Union[str, Tuple[int, int, int, int]]

LOG_CLAMP = 1e-12


def dilation_rate(d: int) -> int:
    """Tap spacing for dilation factor ``d``: 1, 2, 4, 8, ..."""
    if d < 1:
        raise ValueError(f"dilation factor must be >= 1, got {d}")
    return 2 ** (d - 1)


def same_padding(k: int, rate: int) -> Tuple[int, int]:
    """Zero padding (before, after) that keeps the spatial extent.

    The output unit is anchored on the kernel's center tap ``(k - 1) // 2``, so
    odd kernels pad symmetrically and even kernels pad less in front.
    """
    total = (k - 1) * rate
    before = ((k - 1) // 2) * rate
    return before, total - before


def _out(data: np.ndarray, inputs, op: str, backward_fn) -> Tensor:
    check_finite(data, f"output of {op}")
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    return record(op, inputs, out, backward_fn)


def _pad_or_crop(x: np.ndarray, pads: Tuple[int, int, int, int]) -> np.ndarray:
    """Zero-pad the two spatial axes; negative amounts crop instead."""
    t, b, l, r = pads
    h, w = x.shape[2], x.shape[3]
    x = x[:, :, max(0, -t): h - max(0, -b), max(0, -l): w - max(0, -r)]
    if t > 0 or b > 0 or l > 0 or r > 0:
        x = np.pad(x, ((0, 0), (0, 0), (max(t, 0), max(b, 0)), (max(l, 0), max(r, 0))))
    return x


def _unpad_grad(g: np.ndarray, pads, in_shape) -> np.ndarray:
    """Adjoint of :func:`_pad_or_crop`."""
    t, b, l, r = pads
    H, W = in_shape[2], in_shape[3]
    g = g[:, :, max(t, 0): g.shape[2] - max(b, 0), max(l, 0): g.shape[3] - max(r, 0)]
    if t < 0 or b < 0 or l < 0 or r < 0:
        full = np.zeros(in_shape, dtype=g.dtype)
        full[:, :, max(0, -t): H - max(0, -b), max(0, -l): W - max(0, -r)] = g
        g = full
    return g


def _resolve_padding(padding: Padding, k: int, rate: int) -> Tuple[int, int, int, int]:
    if padding == "same":
        before, after = same_padding(k, rate)
        return before, after, before, after
    if padding == "valid":
        return 0, 0, 0, 0
    if isinstance(padding, tuple) and len(padding) == 4:
        return tuple(int(p) for p in padding)
    raise ValueError(f"padding must be 'same', 'valid' or a 4-tuple, got {padding!r}")


def _im2col(xp: np.ndarray, k: int, rate: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = xp[:, :, ky * rate: ky * rate + ho, kx * rate: kx * rate + wo]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    rate: int = 1,
    padding: Padding = "same",
) -> Tensor:
    """Dilated 2-D cross-correlation with stride 1.

    ``weight`` has shape (out_channels, in_channels, k, k). ``rate`` is the tap
    spacing; the effective kernel span is ``(k - 1) * rate + 1``. ``padding`` is
    ``"same"`` (zero padding, output extent equals input), ``"valid"``, or an
    explicit (top, bottom, left, right) tuple whose negative entries crop.
    """
    if rate < 1:
        raise ValueError(f"dilation rate must be >= 1, got {rate}")
    xd, wd = x.data, weight.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be N x C x H x W, got shape {xd.shape}")
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ShapeError(f"conv2d weight must be O x C x k x k, got shape {wd.shape}")
    n, c, h, w = xd.shape
    o, cw, k, _ = wd.shape
    if c != cw:
        raise ShapeError(f"channel axis mismatch: input has {c} channels, weight expects {cw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias axis mismatch: bias has shape {bias.shape}, weight has {o} output channels")
    check_finite(xd, "conv2d input")

    pads = _resolve_padding(padding, k, rate)
    xp = _pad_or_crop(xd, pads)
    span = (k - 1) * rate + 1
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < span or wp < span:
        raise ShapeError(
            f"spatial axes ({hp}x{wp} after padding) smaller than effective kernel span {span}"
        )
    ho, wo = hp - span + 1, wp - span + 1
    wm = wd.reshape(o, c * k * k)

    if k == 1:
        cols = xp.reshape(n, c, ho * wo)
    else:
        cols = _im2col(xp, k, rate, ho, wo)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)
    del cols

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g: np.ndarray):
        g2 = g.reshape(n, o, ho * wo)
        cols_b = xp.reshape(n, c, ho * wo) if k == 1 else _im2col(xp, k, rate, ho, wo)
        gw = np.matmul(g2, cols_b.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        del cols_b
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, g2)
            if k == 1:
                gxp = dcols.reshape(n, c, hp, wp)
            else:
                dcols = dcols.reshape(n, c, k, k, ho, wo)
                gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
                for ky in range(k):
                    for kx in range(k):
                        gxp[:, :, ky * rate: ky * rate + ho, kx * rate: kx * rate + wo] += dcols[:, :, ky, kx]
            gx = _unpad_grad(gxp, pads, xd.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    return _out(out, inputs, "conv2d", backward_fn)


def zero_insert_kernel(weight, rate: int) -> np.ndarray:
    """Dense kernel equivalent to ``weight`` dilated by ``rate``.

    Original taps land at stride ``rate`` in a kernel of extent
    ``(k - 1) * rate + 1``; every other entry is zero.
    """
    if rate < 1:
        raise ValueError(f"rate must be >= 1, got {rate}")
    wd = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    k = wd.shape[-1]
    span = (k - 1) * rate + 1
    dense = np.zeros(wd.shape[:-2] + (span, span), dtype=wd.dtype)
    dense[..., ::rate, ::rate] = wd
    return dense


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    Odd extents are padded at the bottom/right with -inf, so the output extent is
    ``ceil(h / 2)``. Gradients go to the first (row-major) maximum of each block.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2 input must be N x C x H x W, got shape {xd.shape}")
    check_finite(xd, "maxpool2 input")
    n, c, h, w = xd.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    H2, W2 = xd.shape[2] // 2, xd.shape[3] // 2
    blocks = xd.reshape(n, c, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, H2, W2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray):
        gb = np.zeros((n, c, H2, W2, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * H2, 2 * W2)
        return [gx[:, :, :h, :w]]

    return _out(np.ascontiguousarray(out), (x,), "maxpool2", backward_fn)


def transposed_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution upsampling by ``stride``.

    ``weight`` has shape (in_channels, out_channels, k, k). The full output of
    extent ``(h - 1) * stride + k`` is cropped symmetrically to ``h * stride``.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"transposed_conv expects 4-D input and weight, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    cw, o, k, k2 = wd.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got {k}x{k2}")
    if c != cw:
        raise ShapeError(f"channel axis mismatch: input has {c} channels, weight expects {cw}")
    if k < stride:
        raise ShapeError(f"kernel extent {k} smaller than stride {stride}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias axis mismatch: bias has shape {bias.shape}, expected ({o},)")
    check_finite(xd, "transposed_conv input")

    crop = (k - stride) // 2
    fh, fw = (h - 1) * stride + k, (w - 1) * stride + k
    wm = wd.reshape(c, o * k * k)
    xm = xd.reshape(n, c, h * w)
    # contributions (n, o, k, k, h, w): each input pixel scatters a k x k block
    contrib = np.matmul(wm.T, xm).reshape(n, o, k, k, h, w)
    full = np.zeros((n, o, fh, fw), dtype=contrib.dtype)
    span_h, span_w = (h - 1) * stride + 1, (w - 1) * stride + 1
    for ty in range(k):
        for tx in range(k):
            full[:, :, ty: ty + span_h: stride, tx: tx + span_w: stride] += contrib[:, :, ty, tx]
    del contrib
    out = full[:, :, crop: crop + h * stride, crop: crop + w * stride]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g: np.ndarray):
        gfull = np.zeros((n, o, fh, fw), dtype=g.dtype)
        gfull[:, :, crop: crop + h * stride, crop: crop + w * stride] = g
        gathered = np.empty((n, o, k, k, h, w), dtype=g.dtype)
        for ty in range(k):
            for tx in range(k):
                gathered[:, :, ty, tx] = gfull[:, :, ty: ty + span_h: stride, tx: tx + span_w: stride]
        gathered = gathered.reshape(n, o * k * k, h * w)
        gw = np.matmul(xm, gathered.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        gx = np.matmul(wm, gathered).reshape(xd.shape) if x.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _out(out, inputs, "transposed_conv", backward_fn)


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    xd = x.data
    if top < 0 or left < 0 or top + height > xd.shape[2] or left + width > xd.shape[3]:
        raise ShapeError(f"crop window ({top},{left},{height},{width}) outside spatial axes {xd.shape[2:]}")
    out = np.ascontiguousarray(xd[:, :, top: top + height, left: left + width])

    def backward_fn(g: np.ndarray):
        gx = np.zeros_like(xd, dtype=g.dtype)
        gx[:, :, top: top + height, left: left + width] = g
        return [gx]

    return _out(out, (x,), "crop2d", backward_fn)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    check_finite(xd, "relu input")
    mask = xd > 0
    out = np.where(mask, xd, 0).astype(xd.dtype, copy=False)
    return _out(out, (x,), "relu", lambda g: [g * mask])


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1, stabilized by max subtraction."""
    xd = x.data
    if xd.ndim != 4 or xd.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs N x C x H x W with C >= 2, got {xd.shape}")
    check_finite(xd, "softmax input")
    e = np.exp(xd - xd.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g: np.ndarray):
        return [p * (g - (g * p).sum(axis=1, keepdims=True))]

    return _out(p, (x,), "softmax_channels", backward_fn)


def cross_entropy(prob: Tensor, target, region_mask=None) -> Tensor:
    """Mean of ``-log p(target class)`` over the pixels selected by ``region_mask``.

    ``target`` is one-hot along axis 1 with the shape of ``prob``; ``region_mask``
    broadcasts against (N, H, W) and defaults to every pixel. Probabilities are
    clamped at 1e-12 before the log.
    """
    pd = prob.data
    td = target.data if isinstance(target, Tensor) else np.asarray(target)
    if td.shape != pd.shape:
        raise ShapeError(f"target shape {td.shape} does not match probability shape {pd.shape}")
    n, c, h, w = pd.shape
    if region_mask is None:
        mask = np.ones((n, h, w), dtype=bool)
    else:
        md = region_mask.data if isinstance(region_mask, Tensor) else np.asarray(region_mask)
        mask = np.broadcast_to(md.astype(bool), (n, h, w))
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy region mask selects no pixels")
    check_finite(pd, "cross_entropy input")
    p_t = (pd * td).sum(axis=1)
    clamped = np.maximum(p_t, LOG_CLAMP)
    loss = float(-(np.log(clamped) * mask).sum() / count)
    out = np.asarray(loss, dtype=pd.dtype)

    def backward_fn(g: np.ndarray):
        live = mask & (p_t > LOG_CLAMP)
        coeff = np.where(live, -1.0 / np.where(live, p_t, 1.0), 0.0) * (float(g) / count)
        return [(td * coeff[:, None]).astype(pd.dtype, copy=False)]

    return _out(out, (prob,), "cross_entropy", backward_fn)


__all__ = [
    "LOG_CLAMP",
    "NonFiniteError",
    "ShapeError",
    "conv2d",
    "crop2d",
    "cross_entropy",
    "dilation_rate",
    "maxpool2",
    "relu",
    "same_padding",
    "softmax_channels",
    "transposed_conv",
    "zero_insert_kernel",
]
