"""Tensor values and the tape that records operations for reverse-mode differentiation."""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

_uid = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf enters or leaves an operation."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float array in batch x channel x height x width layout.

    Single precision unless built from a float64 array or with ``dtype=np.float64``;
    the double path exists for gradient verification.
    """

    __slots__ = ("data", "requires_grad", "name", "uid", "__weakref__")

    def __init__(self, data, requires_grad: bool = True, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"tensor order {arr.ndim} exceeds 4")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.uid = next(_uid)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


@dataclass
class Record:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    # maps output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered log of operations, replayed in reverse by :func:`backward`.

    Used as a context manager: operations executed inside the ``with`` block
    append themselves. A tape belongs to the thread that records it.
    """

    records: List[Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def append(self, record: Record) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that was already replayed")
        self.records.append(record)

    def reset(self) -> None:
        """Allow one more backward replay over the same records."""
        self.consumed = False

    @property
    def output(self) -> Optional[Tensor]:
        return self.records[-1].output if self.records else None

    def leaves(self) -> List[Tensor]:
        produced = {r.output.uid for r in self.records}
        seen: Dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.uid not in produced and t.uid not in seen:
                    seen[t.uid] = t
        return list(seen.values())


def _stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.append(Record(op, tuple(inputs), output, backward_fn))
    return output


class Gradients(dict):
    """Mapping from tensor (by identity) to its gradient tensor."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.uid
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.uid
        return super().__contains__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.uid
        return super().get(key, default)


def backward(tape: Tape, seed_gradient, output: Optional[Tensor] = None) -> Gradients:
    """Reverse-mode sweep over ``tape`` starting from ``seed_gradient``.

    Returns gradients, keyed by tensor identity, for every leaf of the tape that
    has ``requires_grad`` set. Leaves with no path to the output get zeros.
    """
    if tape.consumed:
        raise TapeError("tape already replayed; call reset() before a second backward")
    if not tape.records:
        raise TapeError("empty tape")
    out = output if output is not None else tape.output
    seed = seed_gradient.data if isinstance(seed_gradient, Tensor) else np.asarray(seed_gradient)
    if seed.shape != out.shape:
        raise ShapeError(f"seed gradient shape {seed.shape} does not match output shape {out.shape}")
    tape.consumed = True

    grads: Dict[int, np.ndarray] = {out.uid: seed.astype(out.dtype, copy=False)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.uid, None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.uid)
            grads[t.uid] = gi if prev is None else prev + gi

    result = Gradients()
    for leaf in tape.leaves():
        if not leaf.requires_grad:
            continue
        g = grads.get(leaf.uid)
        if g is None:
            g = np.zeros_like(leaf.data)
        result[leaf.uid] = Tensor(g, requires_grad=False, name=leaf.name)
    return result
