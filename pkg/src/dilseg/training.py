"""Adam training on centre-supervised patches, plus bit-exact checkpoints."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .autodiff import backward, cross_entropy
from .autodiff.tensor import NonFiniteError, Tensor
from .io import FormatError, pack_ntsr, read_ntsr_from
from .model import Model, forward
from .netspec import NetworkSpec

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"DCKP"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 32
    steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 0
    region: int = 16

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.batch < 1:
            raise ValueError("batch size must be >= 1")
        if self.steps < 0:
            raise ValueError("step count must be >= 0")


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_model(cls, model: Model) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(t.data) for k, t in model.params.items()},
            {k: np.zeros_like(t.data) for k, t in model.params.items()},
            0,
        )


def adam_step(model: Model, grads: Mapping[str, np.ndarray], state: OptimizerState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, applied in place to every parameter."""
    missing = set(model.params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for parameters: {sorted(missing)}")
    if not state.m:
        fresh = OptimizerState.for_model(model)
        state.m, state.v = fresh.m, fresh.v
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in model.params.items():
        g = np.asarray(grads[name].data if isinstance(grads[name], Tensor) else grads[name])
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        g = g.astype(p.data.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.data.dtype, copy=False)


def batch_indices(n: int, batch: int, step: int, seed: int) -> np.ndarray:
    """Patch indices for ``step``: consecutive slices of per-epoch permutations.

    Depends only on (n, batch, step, seed), so a resumed run sees the same data.
    """
    start = step * batch
    out = np.empty(batch, dtype=np.int64)
    filled = 0
    while filled < batch:
        epoch, pos = divmod(start + filled, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch - filled, n - pos)
        out[filled: filled + take] = perm[pos: pos + take]
        filled += take
    return out


def loss_and_grads(model: Model, x: np.ndarray, y: np.ndarray, region: int) -> Tuple[float, Dict[str, np.ndarray]]:
    prob, tape = forward(model, x, record=True, center=region)
    with tape:
        loss = cross_entropy(prob, y)
    grads = backward(tape, np.ones((), dtype=loss.dtype))
    return float(loss.data), {name: grads[t].data for name, t in model.params.items()}


def parameter_norms(model: Model) -> Dict[str, float]:
    return {k: float(np.linalg.norm(t.data.astype(np.float64))) for k, t in model.params.items()}


def train(
    model: Model,
    patches,
    config: TrainConfig,
    state: Optional[OptimizerState] = None,
    on_step: Optional[Callable[[int, float, Model, OptimizerState], None]] = None,
    stop_below: Optional[float] = None,
) -> Tuple[Model, List[float], OptimizerState]:
    """Minibatch Adam on the centre ``region`` of each patch, up to ``config.steps``.

    Training resumes from ``state.step`` when a state is given. ``stop_below``
    ends the run early once a step's loss falls under it.
    """
    if patches.center != config.region:
        raise ValueError(f"patch labels cover {patches.center}px but the loss region is {config.region}px")
    if patches.patch < model.spec.input_patch:
        raise ValueError(f"patches of {patches.patch}px are smaller than the model input {model.spec.input_patch}px")
    state = state if state is not None else OptimizerState.for_model(model)
    losses: List[float] = []
    n = len(patches)
    while state.step < config.steps:
        step = state.step
        x, y = patches.batch(batch_indices(n, config.batch, step, config.seed))
        try:
            loss, grads = loss_and_grads(model, x, y, config.region)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at step {step}: {exc}; parameter norms {parameter_norms(model)}")
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}; parameter norms {parameter_norms(model)}")
        adam_step(model, grads, state, config)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss, model, state)
        if step % 100 == 0:
            logger.info("step %d loss %.5f", step, loss)
        if stop_below is not None and loss < stop_below:
            break
    return model, losses, state


# -- checkpoints -------------------------------------------------------------


def _pack_record(name: str, array) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw + pack_ntsr(array)


def checkpoint_bytes(model: Model, state: Optional[OptimizerState] = None) -> bytes:
    spec = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    records = [("model.seed", np.array([model.seed], dtype=np.float32))]
    records += [(f"param/{k}", t.data) for k, t in model.params.items()]
    if state is not None:
        records.append(("adam.step", np.array([state.step], dtype=np.float32)))
        records += [(f"adam.m/{k}", a) for k, a in state.m.items()]
        records += [(f"adam.v/{k}", a) for k, a in state.v.items()]
    body = b"".join(_pack_record(n, a) for n, a in records)
    header = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(spec)) + spec + struct.pack("<I", len(records))
    return header + body


def save_checkpoint(model: Model, state: Optional[OptimizerState], path) -> None:
    if any(t.dtype != np.float32 for t in model.params.values()):
        raise ValueError("checkpoints store single-precision parameters only")
    Path(path).write_bytes(checkpoint_bytes(model, state))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Tuple[Model, Optional[OptimizerState]]:
    """Inverse of :func:`save_checkpoint`; raises FormatError before building anything."""
    fh = io.BytesIO(Path(path).read_bytes())
    magic = _read_exact(fh, 4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}")
    version, spec_len = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    spec = NetworkSpec.from_dict(json.loads(_read_exact(fh, spec_len, "spec").decode("utf-8")))
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
    records = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "record name length"))
        name = _read_exact(fh, name_len, "record name").decode("utf-8")
        records[name] = read_ntsr_from(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after checkpoint records")

    shapes = spec.parameter_shapes()
    params = {}
    for key, shape in shapes.items():
        arr = records.get(f"param/{key}")
        if arr is None or arr.shape != shape:
            raise FormatError(f"checkpoint parameter {key} missing or misshapen")
        params[key] = Tensor(arr.copy(), name=key)
    model = Model(spec, params, int(records["model.seed"][0]))
    state = None
    if "adam.step" in records:
        state = OptimizerState(
            {k: records[f"adam.m/{k}"].copy() for k in shapes},
            {k: records[f"adam.v/{k}"].copy() for k in shapes},
            int(records["adam.step"][0]),
        )
    return model, state


def write_loss_log(path, losses: List[float], first_step: int = 0) -> None:
    lines = ["step,loss"] + [f"{first_step + i},{loss:.8g}" for i, loss in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n")


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
