"""Dense 4D tensor values and the reverse-mode tape they record onto.

Every value in the engine is an (N, C, H, W) array of float32 or float64
scalars.  Vector-like parameters (biases, norm affines) are stored as
(C, 1, 1, 1); scalars as (1, 1, 1, 1).  Operations are pure functions; when
any operand is attached to a Tape, the result is recorded so `backward` can
replay vector-Jacobian products in reverse append order.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

PRECISION_DTYPES = {"single": np.float32, "double": np.float64}

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the post-op scan that rejects NaN/Inf outputs."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class PrecisionError(ValueError):
    """Operands of one operation mix single and double precision."""


class Tensor:
    """A dense N,C,H,W value, optionally linked to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None,
                 node_id: int | None = None):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ShapeError(f"tensors are 4D (N,C,H,W); got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            raise PrecisionError(f"unsupported dtype {data.dtype}; use single or double")
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "single" if self.data.dtype == np.float32 else "double"

    def detach(self) -> "Tensor":
        """The same value with no tape attachment."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"


def tensor(values, precision: str = "single") -> Tensor:
    """Build an untaped tensor from array-like values."""
    return Tensor(np.ascontiguousarray(values, dtype=PRECISION_DTYPES[precision]))


def scalar(value: float, precision: str = "single") -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=PRECISION_DTYPES[precision]))


class _Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple[int, ...],
                 vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only record of operations; append order is topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._watched: list[tuple[int, tuple[int, ...], np.dtype]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, t: Tensor) -> Tensor:
        """Register a leaf (parameter) and return its taped handle."""
        node_id = len(self._nodes)
        self._nodes.append(_Node("leaf", (), None))
        self._watched.append((node_id, t.shape, t.dtype))
        return Tensor(t.data, self, node_id)

    @property
    def watched_ids(self) -> list[int]:
        return [node_id for node_id, _, _ in self._watched]


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]) -> Tensor:
    """Wrap an op result, appending a tape node when any input is taped."""
    if _debug_checks and not np.isfinite(out_data).all():
        raise FloatingPointError(f"{op}: produced non-finite values")
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError(f"{op}: operands recorded on different tapes")
    if tape is None:
        return Tensor(out_data)
    ids = tuple(t.node_id if t.tape is tape else -1 for t in inputs)
    node_id = len(tape._nodes)
    tape._nodes.append(_Node(op, ids, vjp))
    return Tensor(out_data, tape, node_id)


def check_same_dtype(op: str, *tensors: Tensor) -> np.dtype:
    dtype = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dtype:
            raise PrecisionError(
                f"{op}: mixed precision operands ({dtype} vs {t.dtype})")
    return dtype


def backward(root: Tensor) -> dict[int, Tensor]:
    """Reverse-accumulate gradients of a scalar root over its tape.

    Returns a map from watched-leaf node id to gradient tensor; leaves the
    root does not reach get zero gradients.
    """
    if root.tape is None:
        raise ValueError("backward: root tensor is not attached to a tape")
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    tape = root.tape
    grads: list[Optional[np.ndarray]] = [None] * len(tape._nodes)
    grads[root.node_id] = np.ones_like(root.data)
    for node_id in range(root.node_id, -1, -1):
        g = grads[node_id]
        node = tape._nodes[node_id]
        if g is None or node.vjp is None:
            continue
        cots = node.vjp(g)
        for input_id, cot in zip(node.inputs, cots):
            if input_id < 0 or cot is None:
                continue
            if grads[input_id] is None:
                grads[input_id] = cot
            else:
                grads[input_id] = grads[input_id] + cot
        grads[node_id] = None  # free as we go
    out: dict[int, Tensor] = {}
    for node_id, shape, dtype in tape._watched:
        g = grads[node_id]
        if g is None:
            g = np.zeros(shape, dtype=dtype)
        out[node_id] = Tensor(np.ascontiguousarray(g, dtype=dtype))
    return out
