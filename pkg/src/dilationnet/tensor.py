"""Dense float tensors plus a recorded-operation reverse-mode backward pass.

The execution model is a tape.  While a ComputationRecord is active (used as
a context manager), every primitive op appends itself in execution order,
which is automatically a topological order of the data flow.  backward()
walks the tape once in reverse, accumulating chain-rule contributions into a
per-tensor gradient map.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

FloatArray = np.ndarray


class Tensor:
    """Dense n-d array of 32-bit floats.

    float64 is admitted for verification runs (finite-difference checks);
    networks, training and persistence stay float32.  Values are treated as
    immutable once produced by an op; only the optimizer rewrites parameter
    data, between graph executions.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float32):
        self.data: FloatArray = np.ascontiguousarray(data, dtype=dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


@dataclass
class OpRecord:
    """One executed primitive: its tensors and the closure for its backward pass."""

    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[FloatArray], Sequence[FloatArray | None]]


class ComputationRecord:
    """Execution-ordered tape of the primitive ops of one forward pass."""

    def __init__(self):
        self.ops: list[OpRecord] = []

    def __enter__(self) -> "ComputationRecord":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _ACTIVE.pop()
        return False

    def __len__(self) -> int:
        return len(self.ops)


_ACTIVE: list[ComputationRecord | None] = []


def active_record() -> ComputationRecord | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextmanager
def suspend_recording():
    """Hide the ops inside this block from any enclosing record.

    Frozen submodels run their forward passes under this guard, which is what
    makes their parameters structurally absent from the gradient map rather
    than merely ignored.
    """
    _ACTIVE.append(None)
    try:
        yield
    finally:
        _ACTIVE.pop()


def record_op(name: str, inputs: Sequence[Tensor], output: Tensor,
              grad_fn: Callable[[FloatArray], Sequence[FloatArray | None]]) -> None:
    """Append one executed op to the active record, if any.

    With no active record the forward value stands alone (inference mode).
    """
    rec = active_record()
    if rec is not None:
        rec.ops.append(OpRecord(name, tuple(inputs), output, grad_fn))


def backward(loss: Tensor, record: ComputationRecord,
             targets: Iterable[Tensor] | None = None) -> dict[Tensor, FloatArray]:
    """Reverse-accumulate d(loss)/d(tensor) over one recorded forward pass.

    The seed gradient is 1.0 at the loss.  Returns a map from tensor to its
    gradient array (same shape as the tensor).  When ``targets`` is given,
    only those tensors are retained in the map and intermediate gradients
    are freed as soon as they have been consumed, which bounds memory to
    roughly one layer's activations.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not any(op.output is loss for op in record.ops):
        raise ValueError("loss tensor was not produced under this record")

    keep: set[int] | None = None if targets is None else {id(t) for t in targets}
    grads: dict[int, FloatArray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for op in reversed(record.ops):
        out_id = id(op.output)
        gout = grads.get(out_id)
        if gout is None:
            continue  # op does not feed the loss
        if keep is not None and out_id not in keep:
            del grads[out_id]
            holders.pop(out_id, None)
        gins = op.grad_fn(gout)
        if len(gins) != len(op.inputs):
            raise RuntimeError(f"{op.name}: backward returned {len(gins)} gradients "
                               f"for {len(op.inputs)} inputs")
        for t, g in zip(op.inputs, gins):
            if g is None:
                continue
            if g.shape != t.data.shape:
                raise RuntimeError(f"{op.name}: gradient shape {g.shape} does not match "
                                   f"input shape {t.data.shape}")
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + g
            else:
                grads[tid] = g
                holders[tid] = t

    if keep is not None:
        return {holders[tid]: g for tid, g in grads.items() if tid in keep}
    return {holders[tid]: g for tid, g in grads.items()}
