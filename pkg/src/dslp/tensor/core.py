"""Tensor container and the tape that records operations for reverse-mode AD.

Every differentiable op executed while gradient recording is enabled appends
one record to the active :class:`Tape`. :func:`backward` walks the records of
the loss's tape in exact reverse execution order and then marks the tape as
consumed, so a second backward over the same graph raises :class:`TapeError`.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from dslp.errors import ContractError, NonFiniteError, TapeError

_DEFAULT_DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Select float64 (default, for verification) or float32 (for benchmarks)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ContractError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DEFAULT_DTYPE = dtype


class Tensor:
    """Dense n-dimensional array with an optional gradient accumulator.

    Leaf tensors created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` of the same shape. Results of recorded ops receive their ``grad``
    during :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_acc")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape: Optional[Tape] = None
        self._acc: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; implementations live in ``ops``.
    def __add__(self, other):
        from dslp.tensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from dslp.tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from dslp.tensor import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from dslp.tensor import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from dslp.tensor import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from dslp.tensor import ops
        return ops.matmul(self, other)


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class _Record:
    __slots__ = ("out", "parents", "backward", "name")

    def __init__(self, out, parents, backward, name):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.name = name


class Tape:
    """Ordered log of executed differentiable ops."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        for rec in self.records:
            rec.out._tape = None
        self.records = []
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        if self.consumed:
            raise TapeError("backward already ran on this tape; reset it or record a new graph")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        loss._acc = np.ones_like(loss.data)
        for rec in reversed(self.records):
            out = rec.out
            g = out._acc
            if g is None:
                continue
            out.grad = g
            out._acc = None
            grads = rec.backward(g)
            for parent, pg in zip(rec.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is None:
                    parent.grad = parent.grad + pg if parent.grad is not None else pg
                elif parent._acc is None:
                    parent._acc = pg
                else:
                    parent._acc = parent._acc + pg


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    if _state.tape.consumed:
        _state.tape = Tape()
    return _state.tape


def grad_enabled() -> bool:
    return _state.enabled


@contextlib.contextmanager
def no_grad():
    """Run ops without recording (inference)."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def fresh_tape():
    """Record onto a new tape for the duration of the block."""
    prev = _state.tape
    tape = Tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def check_finite(data: np.ndarray, name: str) -> None:
    if not _CHECK_FINITE or data.dtype.kind != "f":
        return
    # A finite sum implies finite entries; only scan element-wise on overflow.
    if not math.isfinite(float(np.sum(data))) and not np.isfinite(data).all():
        raise NonFiniteError(f"op '{name}' produced non-finite values")


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, name: str) -> Tensor:
    """Wrap ``data`` as the output of an op and record it when needed.

    ``backward`` maps the upstream gradient to one gradient (or ``None``) per
    parent, each already reduced to that parent's shape.
    """
    # The scan guards training; no_grad inference skips it for speed.
    if _state.enabled:
        check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._acc = None
    needs = _state.enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._tape = None
    if needs:
        tape = current_tape()
        for p in parents:
            if p.requires_grad and p._tape is not None and p._tape is not tape:
                raise TapeError(f"op '{name}' mixes operands from different tapes")
        out._tape = tape
        tape.records.append(_Record(out, tuple(parents), backward, name))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf that ``loss`` depends on."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad:
            loss.grad = loss.grad + np.ones_like(loss.data)
        return
    loss._tape.backward(loss)
