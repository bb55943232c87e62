"""Receptive-field arithmetic, connection footprints and effective receptive fields."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .autodiff import backward
from .autodiff.ops import same_padding
from .autodiff.tensor import Tensor
from .model import Model, deconv_strides, forward
from .netspec import LayerSpec, NetworkSpec

Layers = Union[NetworkSpec, Sequence[LayerSpec]]


def _layers(spec: Layers) -> List[LayerSpec]:
    return list(spec.layers) if isinstance(spec, NetworkSpec) else list(spec)


def _strides(layers: Sequence[LayerSpec]) -> List[int]:
    """Per-layer stride: 2 for pooling, the accumulated pool factor for a deconv, else 1."""
    out, factor = [], 1
    for layer in layers:
        if layer.kind == "maxpool":
            out.append(2)
            factor *= 2
        elif layer.kind == "deconv":
            out.append(factor)
            factor = 1
        else:
            out.append(1)
    return out


@dataclass
class LayerRF:
    index: int
    layer: str
    rf: int
    jump: int
    span: int


@dataclass
class RFReport:
    name: str
    layers: List[LayerRF] = field(default_factory=list)
    final_rf: int = 1
    grid_period: int = 1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": [vars(l) for l in self.layers],
            "final_rf": self.final_rf,
            "grid_period": self.grid_period,
        }

    def format_table(self) -> str:
        lines = [f"{'idx':>3}  {'layer':<20} {'span':>5} {'jump':>5} {'rf':>5}"]
        for l in self.layers:
            lines.append(f"{l.index:>3}  {l.layer:<20} {l.span:>5} {l.jump:>5} {l.rf:>5}")
        lines.append(f"grid period: {self.grid_period}")
        lines.append(f"final RF: {self.final_rf}")
        return "\n".join(lines)


def theoretical_rf(spec: Layers) -> RFReport:
    """Layer-by-layer receptive field, in input pixels.

    A conv adds ``(k - 1) * rate * jump``; a 2x2 pool adds ``jump`` and doubles
    the jump; a deconv of stride ``s`` reads ``ceil(k / s)`` input units, adding
    ``(ceil(k / s) - 1) * jump`` before dividing the jump by ``s``.
    """
    layers = _layers(spec)
    name = spec.name if isinstance(spec, NetworkSpec) else "layers"
    report = RFReport(name)
    rf, jump = 1, 1
    for idx, (layer, stride) in enumerate(zip(layers, _strides(layers))):
        if layer.kind == "conv":
            rf += (layer.kernel - 1) * layer.rate * jump
            span = layer.span
        elif layer.kind == "maxpool":
            rf += jump
            jump *= 2
            span = 2
        else:
            rf += (math.ceil(layer.kernel / stride) - 1) * jump
            jump //= stride
            span = layer.kernel
        report.layers.append(LayerRF(idx, layer.render(), rf, jump, span))
    report.final_rf = rf
    report.grid_period = max((l.rate for l in layers if l.kind == "conv"), default=1)
    return report


def footprint_1d(
    spec: Layers,
    unit: int,
    extent: Optional[int] = None,
    padding: str = "same",
) -> Set[int]:
    """Input positions with a connection path to output ``unit`` along one axis.

    Pure integer propagation from the top layer down. With ``extent`` set, units
    outside ``[0, extent)`` at any level are zero padding and carry nothing.
    """
    layers = _layers(spec)
    strides = _strides(layers)
    extents: List[Optional[int]] = [extent]
    for layer, s in zip(layers, strides):
        e = extents[-1]
        if e is None:
            extents.append(None)
        elif layer.kind == "maxpool":
            extents.append(-(-e // 2))
        elif layer.kind == "deconv":
            extents.append(e * s)
        elif padding == "valid":
            extents.append(e - (layer.span - 1))
        else:
            extents.append(e)

    def clip(units, e):
        return {u for u in units if e is None or 0 <= u < e}

    current = clip({unit}, extents[-1])
    for idx in range(len(layers) - 1, -1, -1):
        layer, s, e_in = layers[idx], strides[idx], extents[idx]
        if layer.kind == "conv":
            before = 0 if padding == "valid" else same_padding(layer.kernel, layer.rate)[0]
            offsets = [i * layer.rate - before for i in range(layer.kernel)]
            nxt = {u + off for u in current for off in offsets}
        elif layer.kind == "maxpool":
            nxt = {2 * u + j for u in current for j in (0, 1)}
        else:
            crop = (layer.kernel - s) // 2
            nxt = set()
            for u in current:
                full = u + crop
                lo = -((layer.kernel - 1 - full) // s)  # ceil((full - k + 1) / s)
                hi = full // s
                nxt.update(range(lo, hi + 1))
        current = clip(nxt, e_in)
    return current


def input_footprint(spec: Layers, output_coordinate: Tuple[int, int], extent: Optional[int] = None) -> Set[Tuple[int, int]]:
    """Exact set of input pixels connected to one output unit of a square map."""
    if extent is None:
        extent = spec.input_patch if isinstance(spec, NetworkSpec) else None
    y, x = output_coordinate
    if extent is not None and not (0 <= y < extent and 0 <= x < extent):
        raise ValueError(f"output coordinate {output_coordinate} outside the {extent}x{extent} output map")
    fy = footprint_1d(spec, y, extent)
    fx = footprint_1d(spec, x, extent)
    return {(a, b) for a in fy for b in fx}


def pyramid_overlap(spec: Layers) -> float:
    """IoU of the input footprints of two horizontally adjacent output units.

    Square kernels make footprints separable, so the vertical factor cancels
    and the IoU equals that of the 1-D footprints.
    """
    layers = _layers(spec)
    if any(l.kind != "conv" for l in layers):
        raise ValueError("pyramid_overlap expects a stride-1 stack of convolutions")
    a = footprint_1d(layers, 0)
    b = footprint_1d(layers, 1)
    return len(a & b) / len(a | b)


def rf_box(spec: Layers, coordinate: Tuple[int, int], extent: int) -> Tuple[int, int, int, int]:
    """Bounding box (y0, y1, x0, x1), inclusive, of the footprint of one unit."""
    fy = footprint_1d(spec, coordinate[0], extent)
    fx = footprint_1d(spec, coordinate[1], extent)
    return min(fy), max(fy), min(fx), max(fx)


@dataclass
class ERFMap:
    values: np.ndarray
    patches: int
    peak: float

    @property
    def normalized(self) -> np.ndarray:
        return self.values / self.peak if self.peak > 0 else np.zeros_like(self.values)

    def support_box(self) -> Optional[Tuple[int, int, int, int]]:
        ys, xs = np.nonzero(self.values)
        if ys.size == 0:
            return None
        return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


def _patch_array(patches) -> np.ndarray:
    arr = patches.inputs if hasattr(patches, "inputs") else patches
    return np.asarray(arr)


def input_gradients(model: Model, x: np.ndarray, channel: int = 1, restrict: bool = True) -> np.ndarray:
    """|d p_channel(center) / d input|, summed over input channels, per sample.

    With ``restrict`` the forward pass computes only the centre output unit.
    """
    h, w = x.shape[2], x.shape[3]
    inp = Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True, name="input")
    center = 1 if restrict and h % 2 == 1 else (2 if restrict else None)
    prob, tape = forward(model, inp, record=True, center=center)
    seed = np.zeros(prob.shape, dtype=prob.dtype)
    if center is None:
        seed[:, channel, h // 2, w // 2] = 1.0
    else:
        # the (h // 2, w // 2) unit sits at this offset inside the centre window
        off = h // 2 - (h - center) // 2
        seed[:, channel, off, off] = 1.0
    grads = backward(tape, seed)
    return np.abs(grads[inp].data).sum(axis=1)


def erf_map(model: Model, patches, batch: int = 32, restrict: bool = True) -> ERFMap:
    """Average absolute input gradient for a unit gradient at the output centre."""
    x = _patch_array(patches)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError("erf_map needs at least one patch")
    total = np.zeros(x.shape[2:], dtype=np.float64)
    for start in range(0, x.shape[0], batch):
        g = input_gradients(model, x[start: start + batch], restrict=restrict)
        for sample in g:  # fixed summation order
            total += sample
    values = total / x.shape[0]
    return ERFMap(values, int(x.shape[0]), float(values.max()))


def grid_score(erf, period: int) -> float:
    """1 - mean(off-lattice) / mean(on-lattice), clamped to [0, 1].

    The lattice has spacing ``period`` and passes through the map centre.
    """
    if period < 2:
        raise ValueError(f"grid period must be >= 2, got {period}")
    values = np.asarray(erf.values if isinstance(erf, ERFMap) else erf, dtype=np.float64)
    if not np.any(values):
        raise ValueError("grid_score of an all-zero map is undefined")
    h, w = values.shape
    cy, cx = h // 2, w // 2
    on_y = (np.arange(h) - cy) % period == 0
    on_x = (np.arange(w) - cx) % period == 0
    lattice = on_y[:, None] & on_x[None, :]
    on, off = values[lattice].mean(), values[~lattice].mean()
    if on <= 0:
        return 0.0
    return float(min(1.0, max(0.0, 1.0 - off / on)))


def positive_model(model: Model, seed: int = 0) -> Model:
    """Float64 copy with strictly positive weights, for footprint measurement.

    Weights are drawn around 1/fan_in so activations stay O(1); the final layer
    feeds only the foreground class so the two softmax branches cannot cancel.
    """
    rng = np.random.default_rng(seed)
    strides = deconv_strides(model.spec)
    deconvs = {f"{s}.{i}.weight": strides[(s, i)] for s, i, l in model.spec.sections() if l.kind == "deconv"}
    last_weight = [n for n in model.params if n.endswith(".weight")][-1]
    params = {}
    for name, t in model.params.items():
        data = t.data
        if name.endswith(".bias"):
            params[name] = Tensor(np.zeros(data.shape), name=name)
            continue
        if name in deconvs:
            fan_in = data.shape[0] * max(1, data.shape[2] // deconvs[name]) ** 2
        else:
            fan_in = int(np.prod(data.shape[1:]))
        w = rng.uniform(0.5, 1.5, size=data.shape) / fan_in
        if name == last_weight:
            if name in deconvs:
                w[:, 0] = 0.0
            else:
                w[0] = 0.0
        params[name] = Tensor(w, name=name)
    return Model(model.spec, params, model.seed)


def gradient_footprint_box(
    model: Model, extent: int, samples: int = 8, seed: int = 0, restrict: Optional[bool] = None
) -> Tuple[int, int, int, int]:
    """Bounding box of input pixels whose gradient reaches the centre output unit.

    Uses positive weights and positive inputs so no path can cancel. Pooling
    nets take the union over several random inputs, so max pooling's
    data-dependent routing reaches every side of the field. ``restrict``
    (default: on for pooling-free nets) computes only the centre unit's cone,
    which keeps memory bounded for wide stacks.
    """
    if restrict is None:
        restrict = not model.spec.has_pooling
    pos = positive_model(model, seed)
    rng = np.random.default_rng(seed + 1)
    support = np.zeros((extent, extent), dtype=bool)
    n = 1 if not model.spec.has_pooling else samples
    for _ in range(n):
        x = rng.uniform(0.5, 1.5, size=(1, 3, extent, extent))
        g = input_gradients(pos, x, restrict=restrict)[0]
        support |= g > 0
    ys, xs = np.nonzero(support)
    return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())
