"""Layer notation ``conv-n64-k3-d1`` and the named front-end / LFE / head architectures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .autodiff.ops import dilation_rate

KINDS = ("conv", "maxpool", "deconv")
ACTIVATIONS = ("relu", "softmax", "none")
SCALES = ("paper", "micro")
MICRO_DIVISOR = 8
NUM_CLASSES = 2


class SpecError(ValueError):
    pass


class ParseError(SpecError):
    def __init__(self, text: str, position: int, message: str):
        super().__init__(f"{message} at position {position} in {text!r}")
        self.text = text
        self.position = position


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: Optional[int] = None
    kernel: int = 2
    dilation_factor: int = 1
    # assigned by network assembly, so it does not take part in equality
    activation: str = field(default="relu", compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.kind == "maxpool":
            if self.kernel != 2 or self.out_channels is not None:
                raise SpecError("maxpool is always 2x2 with stride 2 and carries no channel count")
        else:
            if not self.out_channels or self.out_channels < 1:
                raise SpecError(f"{self.kind} needs a positive channel count")
            if self.kernel < 1 or self.dilation_factor < 1:
                raise SpecError("kernel and dilation factor must be positive")

    @property
    def rate(self) -> int:
        return dilation_rate(self.dilation_factor) if self.kind == "conv" else 1

    @property
    def span(self) -> int:
        return (self.kernel - 1) * self.rate + 1

    def render(self) -> str:
        if self.kind == "maxpool":
            return "maxpooling"
        return f"{self.kind}-n{self.out_channels}-k{self.kernel}-d{self.dilation_factor}"

    def __str__(self) -> str:
        return self.render()


def _read_field(text: str, pos: int, letter: str) -> Tuple[int, int]:
    if pos >= len(text) or text[pos] != "-":
        raise ParseError(text, pos, f"expected '-{letter}'")
    pos += 1
    if pos >= len(text) or text[pos] != letter:
        found = text[pos] if pos < len(text) else "end of input"
        raise ParseError(text, pos, f"expected field '{letter}', found {found!r}")
    pos += 1
    start = pos
    while pos < len(text) and text[pos].isdigit():
        pos += 1
    if pos == start:
        raise ParseError(text, start, f"expected digits after '{letter}'")
    value = int(text[start:pos])
    if value < 1:
        raise ParseError(text, start, f"field '{letter}' must be positive")
    return value, pos


def parse_layer(text: str, activation: str = "relu") -> LayerSpec:
    """Parse one layer token; fields are fixed in the order n, k, d."""
    s = text.strip()
    if s in ("maxpooling", "max pooling", "maxpool"):
        return LayerSpec("maxpool", None, 2, 1, activation)
    for kind in ("deconv", "conv"):
        if s.startswith(kind):
            pos = len(kind)
            n, pos = _read_field(s, pos, "n")
            k, pos = _read_field(s, pos, "k")
            d, pos = _read_field(s, pos, "d")
            if pos != len(s):
                raise ParseError(s, pos, "unexpected trailing characters")
            return LayerSpec(kind, n, k, d, activation)
    raise ParseError(s, 0, "expected 'conv', 'deconv' or 'maxpooling'")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    front: Tuple[LayerSpec, ...]
    lfe: Tuple[LayerSpec, ...]
    head: Tuple[LayerSpec, ...]
    input_patch: int = 76
    supervised_center: int = 16

    def __post_init__(self):
        layers = self.layers
        if not layers:
            raise SpecError("network has no layers")
        if layers[-1].kind == "maxpool":
            raise SpecError("final layer cannot be a pooling layer")
        lfe_d = [l.dilation_factor for l in self.lfe if l.kind == "conv"]
        if any(b > a for a, b in zip(lfe_d, lfe_d[1:])):
            raise SpecError(f"LFE dilation factors must be non-increasing, got {lfe_d}")

    @property
    def layers(self) -> Tuple[LayerSpec, ...]:
        return self.front + self.lfe + self.head

    @property
    def has_pooling(self) -> bool:
        return any(l.kind == "maxpool" for l in self.layers)

    @property
    def pool_factor(self) -> int:
        return 2 ** sum(l.kind == "maxpool" for l in self.layers)

    def sections(self) -> List[Tuple[str, int, LayerSpec]]:
        out = []
        for section, layers in (("front", self.front), ("lfe", self.lfe), ("head", self.head)):
            for i, layer in enumerate(layers):
                out.append((section, i, layer))
        return out

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Weight and bias shapes per layer, derived from the spec alone."""
        shapes: Dict[str, Tuple[int, ...]] = {}
        channels = 3
        for section, i, layer in self.sections():
            if layer.kind == "maxpool":
                continue
            key = f"{section}.{i}"
            if layer.kind == "conv":
                shapes[f"{key}.weight"] = (layer.out_channels, channels, layer.kernel, layer.kernel)
            else:
                shapes[f"{key}.weight"] = (channels, layer.out_channels, layer.kernel, layer.kernel)
            shapes[f"{key}.bias"] = (layer.out_channels,)
            channels = layer.out_channels
        return shapes

    def parameter_count(self) -> int:
        total = 0
        for shape in self.parameter_shapes().values():
            n = 1
            for s in shape:
                n *= s
            total += n
        return total

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "front": [l.render() for l in self.front],
            "lfe": [l.render() for l in self.lfe],
            "head": [l.render() for l in self.head],
            "input_patch": self.input_patch,
            "supervised_center": self.supervised_center,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return build_spec(
            d["name"],
            d.get("front", []),
            d.get("lfe", []),
            d.get("head", []),
            input_patch=d.get("input_patch", 76),
            supervised_center=d.get("supervised_center", 16),
        )

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


def build_spec(
    name: str,
    front: Sequence,
    lfe: Sequence = (),
    head: Sequence = (),
    input_patch: int = 76,
    supervised_center: int = 16,
) -> NetworkSpec:
    """Assemble a network from layer strings or LayerSpecs, assigning activations.

    Every conv/deconv gets ReLU except the final layer, which gets softmax.
    """
    parts = []
    for seq in (front, lfe, head):
        parts.append([l if isinstance(l, LayerSpec) else parse_layer(l) for l in seq])
    flat = parts[0] + parts[1] + parts[2]
    if not flat:
        raise SpecError("network has no layers")
    last = len(flat) - 1
    assigned = []
    for i, layer in enumerate(flat):
        act = "none" if layer.kind == "maxpool" else ("softmax" if i == last else "relu")
        assigned.append(replace(layer, activation=act))
    a, b = len(parts[0]), len(parts[0]) + len(parts[1])
    return NetworkSpec(
        name, tuple(assigned[:a]), tuple(assigned[a:b]), tuple(assigned[b:]), input_patch, supervised_center
    )


def _conv(n: int, d: int = 1, k: int = 3) -> str:
    return f"conv-n{n}-k{k}-d{d}"


_FRONT_S = [_conv(64), _conv(64), "maxpooling", _conv(128), _conv(128), "maxpooling"] + [_conv(256)] * 3
_FRONT_S_D = [_conv(64, 1), _conv(64, 1), _conv(128, 2), _conv(128, 2)] + [_conv(256, 3)] * 3
_FRONT_L = _FRONT_S + ["maxpooling"] + [_conv(512)] * 3
_FRONT_L_D = _FRONT_S_D + [_conv(512, 4)] * 3

_HEAD_S = ["conv-n1024-k9-d1", "conv-n1024-k1-d1", "deconv-n2-k16-d1"]
_HEAD_S_D = ["conv-n1024-k7-d3", "conv-n1024-k1-d1", "conv-n2-k1-d1"]
_HEAD_L = ["conv-n1024-k7-d1", "conv-n1024-k1-d1", "deconv-n2-k16-d1"]
_HEAD_L_D = ["conv-n1024-k7-d4", "conv-n1024-k1-d1", "conv-n2-k1-d1"]


def _lfe_s() -> List[str]:
    return [_conv(256, d) for d in (3, 3, 3, 2, 2, 1, 1)]


def _lfe_l() -> List[str]:
    return [_conv(512, d) for d in (4, 4, 4, 3, 3, 3, 2, 2, 1, 1)]


_PRESETS: Dict[str, Tuple[List[str], List[str], List[str]]] = {
    "front-s": (_FRONT_S, [], _HEAD_S),
    "front-s-d": (_FRONT_S_D, [], _HEAD_S_D),
    "front-s-d-lfe": (_FRONT_S_D, _lfe_s(), _HEAD_S_D),
    "front-s-d-large": (_FRONT_S_D, [_conv(256, 3)] * 7, _HEAD_S_D),
    "front-s-d-lfe4": (_FRONT_S_D, [_conv(256, 2), _conv(256, 2), _conv(256, 1), _conv(256, 1)], _HEAD_S_D),
    "front-l": (_FRONT_L, [], _HEAD_L),
    "front-l-d": (_FRONT_L_D, [], _HEAD_L_D),
    "front-l-d-lfe": (_FRONT_L_D, _lfe_l(), _HEAD_L_D),
    "front-l-d-large": (_FRONT_L_D, [_conv(512, 4)] * 10, _HEAD_L_D),
    "front-l-d-lfe4": (_FRONT_L_D, [_conv(512, 2), _conv(512, 2), _conv(512, 1), _conv(512, 1)], _HEAD_L_D),
}

# the eight architectures compared in the experiments; "-lfe4" variants are extras
MAIN_PRESETS = (
    "front-s",
    "front-l",
    "front-s-d",
    "front-l-d",
    "front-s-d-lfe",
    "front-l-d-lfe",
    "front-s-d-large",
    "front-l-d-large",
)


def preset_names() -> List[str]:
    return list(_PRESETS)


def _scale_layer(text: str, divisor: int) -> str:
    layer = parse_layer(text)
    if layer.kind == "maxpool" or layer.out_channels == NUM_CLASSES:
        return text
    return replace(layer, out_channels=max(1, layer.out_channels // divisor)).render()


def preset(name: str, scale: str = "paper") -> NetworkSpec:
    """Named architecture; ``micro`` divides every hidden channel count by 8."""
    if name not in _PRESETS:
        raise SpecError(f"unknown preset {name!r}; valid names: {', '.join(_PRESETS)}")
    if scale not in SCALES:
        raise SpecError(f"unknown scale {scale!r}; valid scales: {', '.join(SCALES)}")
    front, lfe, head = _PRESETS[name]
    if scale == "micro":
        front, lfe, head = ([_scale_layer(t, MICRO_DIVISOR) for t in seq] for seq in (front, lfe, head))
    label = name if scale == "paper" else f"{name}@micro"
    return build_spec(label, front, lfe, head)
