"""Parameter initialization and forward passes for :class:`NetworkSpec` networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.ops import same_padding
from .autodiff.tensor import ShapeError, Tape, Tensor
from .netspec import LayerSpec, NetworkSpec


@dataclass
class Model:
    spec: NetworkSpec
    params: Dict[str, Tensor]
    seed: int = 0

    def astype(self, dtype) -> "Model":
        """Copy with every parameter cast, e.g. to float64 for gradient checks."""
        params = {k: Tensor(v.data.astype(dtype), name=k) for k, v in self.params.items()}
        return Model(self.spec, params, self.seed)

    def copy(self) -> "Model":
        return self.astype(next(iter(self.params.values())).dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def bilinear_kernel(k: int, stride: int) -> np.ndarray:
    """k x k tent of half-width ``stride``; its stride-shifted copies sum to one."""
    center = (k - 1) / 2.0
    taps = np.maximum(0.0, 1.0 - np.abs(np.arange(k) - center) / stride)
    return np.outer(taps, taps)


def deconv_strides(spec: NetworkSpec) -> Dict[Tuple[str, int], int]:
    """Each deconv upsamples by the pooling factor accumulated before it."""
    out = {}
    factor = 1
    for section, i, layer in spec.sections():
        if layer.kind == "maxpool":
            factor *= 2
        elif layer.kind == "deconv":
            out[(section, i)] = factor
            factor = 1
    return out


def init_model(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Glorot-uniform convolution weights, zero biases, bilinear deconv kernels.

    A deconv weight is a Glorot-uniform channel-mixing matrix times the bilinear
    spatial kernel, so it starts as a plain upsampler of a random projection.
    """
    rng = np.random.default_rng(seed)
    strides = deconv_strides(spec)
    shapes = spec.parameter_shapes()
    params: Dict[str, Tensor] = {}
    for section, i, layer in spec.sections():
        if layer.kind == "maxpool":
            continue
        key = f"{section}.{i}"
        wshape = shapes[f"{key}.weight"]
        if layer.kind == "conv":
            o, c, k, _ = wshape
            bound = glorot_bound(c * k * k, o * k * k)
            w = rng.uniform(-bound, bound, size=wshape)
        else:
            c, o, k, _ = wshape
            bound = glorot_bound(c, o)
            mix = rng.uniform(-bound, bound, size=(c, o))
            w = mix[:, :, None, None] * bilinear_kernel(k, strides[(section, i)])[None, None]
        params[f"{key}.weight"] = Tensor(w.astype(dtype), name=f"{key}.weight")
        params[f"{key}.bias"] = Tensor(np.zeros(wshape[0] if layer.kind == "conv" else wshape[1], dtype=dtype),
                                       name=f"{key}.bias")
    return Model(spec, params, seed)


def _activate(y: Tensor, layer: LayerSpec) -> Tensor:
    if layer.activation == "relu":
        return ops.relu(y)
    if layer.activation == "softmax":
        return ops.softmax_channels(y)
    return y


def _windows(layers: List[LayerSpec], extent: int, lo: int, hi: int) -> List[Tuple[int, int]]:
    """Input interval each conv layer must see so the last layer yields [lo, hi).

    Returned list has one entry per layer input plus the final output interval.
    """
    out = [(lo, hi)]
    for layer in reversed(layers):
        before, after = same_padding(layer.kernel, layer.rate)
        a, b = out[0]
        out.insert(0, (max(0, a - before), min(extent, b + after)))
    return out


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False, name="input")


def forward(
    model: Model,
    x,
    record: bool = False,
    center: Optional[int] = None,
    padding: str = "same",
) -> Tuple[Tensor, Optional[Tape]]:
    """Probability map (N x 2 x H x W) for a batch of 3-channel images.

    ``center`` restricts the output to the central ``center x center`` window;
    for dilated networks only the units that window depends on are computed,
    with exactly the values a full same-padded pass would give. ``padding="valid"``
    is a diagnostic mode for pooling-free networks that shrinks the map by each
    layer's span. The tape is returned when ``record`` is set.
    """
    spec = model.spec
    inp = _as_input(x, model.dtype)
    if inp.data.ndim != 4:
        raise ShapeError(f"input must be N x 3 x H x W, got {inp.shape}")
    if inp.shape[1] != 3:
        raise ShapeError(f"channel axis mismatch: expected 3 input channels, got {inp.shape[1]}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if padding == "valid" and spec.has_pooling:
        raise ValueError("valid-padding mode applies to pooling-free networks only")
    h, w = inp.shape[2], inp.shape[3]
    if center is not None and (center > min(h, w) or center < 1):
        raise ShapeError(f"center window {center} does not fit input {h}x{w}")

    tape = Tape() if record else None
    if tape is not None:
        tape.__enter__()
    try:
        if spec.has_pooling:
            prob = _forward_pooled(model, inp, center)
        elif padding == "valid":
            prob = _forward_valid(model, inp)
        else:
            prob = _forward_windowed(model, inp, center)
    finally:
        if tape is not None:
            tape.__exit__(None, None, None)
    return prob, tape


def _layer_params(model: Model, section: str, i: int) -> Tuple[Tensor, Tensor]:
    return model.params[f"{section}.{i}.weight"], model.params[f"{section}.{i}.bias"]


def _forward_valid(model: Model, inp: Tensor) -> Tensor:
    y = inp
    for section, i, layer in model.spec.sections():
        wt, b = _layer_params(model, section, i)
        y = _activate(ops.conv2d(y, wt, b, layer.rate, padding="valid"), layer)
    return y


def _forward_windowed(model: Model, inp: Tensor, center: Optional[int]) -> Tensor:
    h, w = inp.shape[2], inp.shape[3]
    entries = model.spec.sections()
    layers = [e[2] for e in entries]
    if center is None:
        wy = [(0, h)] * (len(layers) + 1)
        wx = [(0, w)] * (len(layers) + 1)
    else:
        cy, cx = (h - center) // 2, (w - center) // 2
        wy = _windows(layers, h, cy, cy + center)
        wx = _windows(layers, w, cx, cx + center)
    y = inp
    if wy[0] != (0, h) or wx[0] != (0, w):
        y = ops.crop2d(inp, wy[0][0], wx[0][0], wy[0][1] - wy[0][0], wx[0][1] - wx[0][0])
    for idx, (section, i, layer) in enumerate(entries):
        before, after = same_padding(layer.kernel, layer.rate)
        (ia, ib), (oa, ob) = wy[idx], wy[idx + 1]
        (ja, jb), (pa, pb) = wx[idx], wx[idx + 1]
        pads = (ia - (oa - before), (ob + after) - ib, ja - (pa - before), (pb + after) - jb)
        wt, b = _layer_params(model, section, i)
        y = _activate(ops.conv2d(y, wt, b, layer.rate, padding=pads), layer)
    return y


def _forward_pooled(model: Model, inp: Tensor, center: Optional[int]) -> Tensor:
    h, w = inp.shape[2], inp.shape[3]
    strides = deconv_strides(model.spec)
    entries = model.spec.sections()
    y = inp
    for section, i, layer in entries:
        if layer.kind == "maxpool":
            y = ops.maxpool2(y)
            continue
        wt, b = _layer_params(model, section, i)
        if layer.kind == "conv":
            y = ops.conv2d(y, wt, b, layer.rate, padding="same")
        else:
            y = ops.transposed_conv(y, wt, b, stride=strides[(section, i)])
        if layer.activation == "softmax":
            break
        y = _activate(y, layer)
    # pooling of odd extents rounds up, so the upsampled map may overhang
    if y.shape[2] != h or y.shape[3] != w:
        y = ops.crop2d(y, 0, 0, h, w)
    if center is not None:
        y = ops.crop2d(y, (h - center) // 2, (w - center) // 2, center, center)
    return ops.softmax_channels(y)


def output_shape(spec: NetworkSpec, n: int, h: int, w: int, padding: str = "same") -> Tuple[int, int, int, int]:
    """Forward output shape computed symbolically from the layer list."""
    if padding == "valid":
        shrink = sum(l.span - 1 for l in spec.layers)
        return (n, 2, h - shrink, w - shrink)
    return (n, 2, h, w)
