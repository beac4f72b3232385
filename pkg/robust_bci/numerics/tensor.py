"""Immutable tensors and a reverse-mode gradient tape"""
from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from robust_bci.errors import TapeUsageError, ValidationError

logger = logging.getLogger(__name__)

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Dense row-major array of 32-bit (or 64-bit) floats that is never mutated.

    Construction from external data copies and validates finiteness; results of
    primitive operations are wrapped without re-validation. Identity (not value)
    is used for hashing so tensors can key gradient maps.
    """

    __slots__ = ("_data", "__weakref__")

    def __init__(self, data, dtype=np.float32):
        dtype = np.dtype(dtype)
        if dtype not in SUPPORTED_DTYPES:
            raise ValidationError(f"Unsupported tensor dtype {dtype}; expected float32 or float64")
        array = np.array(data, dtype=dtype, copy=True)
        if not np.all(np.isfinite(array)):
            raise ValidationError("Tensor values must be finite (NaN/Inf rejected)")
        array.setflags(write=False)
        self._data = array

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Wrap an array produced internally, without copying or validation."""
        array = np.asarray(array)
        if array.dtype not in SUPPORTED_DTYPES:
            array = array.astype(np.float32)
        if array.flags.writeable:
            array.setflags(write=False)
        obj = cls.__new__(cls)
        obj._data = array
        return obj

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float("nan")

    def astype(self, dtype) -> "Tensor":
        if np.dtype(dtype) == self.dtype:
            return self
        return Tensor.wrap(self._data.astype(dtype))

    def __len__(self) -> int:
        return self._data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


@dataclass(frozen=True)
class TapeRecord:
    """One primitive application: enough context to replay its adjoint."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_ACTIVE_TAPE: contextvars.ContextVar[Optional["GradTape"]] = contextvars.ContextVar(
    "robust_bci_active_tape", default=None
)


class GradTape:
    """Records primitive operations executed inside ``with tape:`` for one backward pass.

    Tapes are single-threaded and single-use: after ``grad`` has been taken the tape
    is consumed. Entering the same tape again (nested) is allowed.
    """

    def __init__(self):
        self._records: List[TapeRecord] = []
        self._tokens: List[contextvars.Token] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        if self._consumed:
            raise TapeUsageError("GradTape already differentiated; create a new tape per forward/backward pair")
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _ACTIVE_TAPE.reset(self._tokens.pop())
        return False

    @property
    def records(self) -> Tuple[TapeRecord, ...]:
        return tuple(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward) -> None:
        self._records.append(TapeRecord(op=op, inputs=inputs, output=output, backward=backward))

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> List[Tensor]:
        """Gradients of ``loss`` with respect to ``wrt``, in the same order."""
        grads = grad(self, loss, wrt)
        return [grads[t] for t in wrt]


def current_tape() -> Optional[GradTape]:
    return _ACTIVE_TAPE.get()


def record(op: str, inputs: Iterable[Tensor], output: np.ndarray, backward) -> Tensor:
    """Wrap a primitive's output and log it on the active tape, if any."""
    out = Tensor.wrap(output)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(op, tuple(inputs), out, backward)
    return out


def grad(tape: GradTape, loss: Tensor, wrt: Iterable[Tensor]) -> Dict[Tensor, Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` recorded on ``tape``.

    Replays the adjoints in exact reverse order of the forward pass. Tensors that
    never touched the tape are a usage error; tensors on the tape that the loss
    does not depend on get zero gradients.
    """
    wrt = list(wrt)
    if tape.consumed:
        raise TapeUsageError("GradTape already differentiated")
    if loss.size != 1:
        raise TapeUsageError(f"loss must be a scalar, got shape {loss.shape}")

    records = tape.records
    produced = {id(r.output) for r in records}
    if id(loss) not in produced:
        raise TapeUsageError("loss was not produced on this tape")
    on_tape = produced | {id(t) for r in records for t in r.inputs}
    for t in wrt:
        if id(t) not in on_tape:
            raise TapeUsageError(f"requested gradient of {t!r}, which is not on the tape")

    adjoints: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for rec in reversed(records):
        g_out = adjoints.get(id(rec.output))
        if g_out is None:
            continue
        for inp, g_in in zip(rec.inputs, rec.backward(g_out)):
            if g_in is None:
                continue
            key = id(inp)
            adjoints[key] = adjoints[key] + g_in if key in adjoints else g_in

    tape._consumed = True
    tape._records.clear()
    logger.debug(f"Backward pass over {len(records)} recorded operations")

    result: Dict[Tensor, Tensor] = {}
    for t in wrt:
        g = adjoints.get(id(t))
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        result[t] = Tensor.wrap(np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return result
