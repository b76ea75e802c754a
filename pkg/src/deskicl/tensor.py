"""Dense tensors with a reverse-mode autodiff tape.

Small on purpose: float32 numpy arrays plus the dozen-ish primitives a
compact decoder-style transformer needs (matmul with leading-batch
broadcast, elementwise arithmetic, softmax, RMS normalization, SiLU,
reshape/transpose/concat/narrow, row gather for embedding lookup, and
reductions). Ops record backward rules only while a `Tape` context is
open, so inference runs tape-free at plain numpy speed.

Broadcasting is restricted to leading batch dimensions: the smaller
operand's shape must equal the trailing dims of the larger one, e.g.
(T, d) + (d,) or (H, T, p) * (T, p). Anything else raises ShapeError.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_nan_checks = False


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class GradError(RuntimeError):
    """Backward pass misuse (non-scalar loss, detached loss, missing grad)."""


def set_nan_checks(enabled: bool) -> None:
    """Toggle per-op finiteness checks (slow; meant for tests/debugging)."""
    global _nan_checks
    _nan_checks = enabled


class Tensor:
    """A dense array plus autodiff bookkeeping.

    `data` is always a contiguous numpy array (float32 unless a dtype is
    forced, which only the gradient-check oracle does). `grad`, when
    populated, matches `data`'s shape and dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            np.add(self.grad, g, out=self.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeEntry:
    """One recorded op: the output it produced and how to push grads back."""

    __slots__ = ("output", "backward")

    def __init__(self, output: Tensor, backward: Callable[[np.ndarray], None]):
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of ops for one forward pass.

    Entries are appended in execution order, which is a valid topological
    order, so the backward sweep is a single reverse iteration that visits
    each recorded node exactly once.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("nested Tape contexts are not supported")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = None

    def __len__(self) -> int:
        return len(self.entries)


_active_tape: Tape | None = None


def _finish(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    if _nan_checks and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{op}: non-finite values in output")
    tape = _active_tape
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.entries.append(TapeEntry(out, backward))
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every tensor the scalar `loss` depends on."""
    if loss.data.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise GradError("loss is not attached to a tape; run the forward inside `with Tape():`")
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        g = entry.output.grad
        if g is not None:
            entry.backward(g)


# ---------------------------------------------------------------------------
# broadcast helpers
# ---------------------------------------------------------------------------


def _check_leading_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if len(small) > 0 and big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {a} and {b} differ beyond a leading batch broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape, "add")
    out = Tensor(a.data + b.data, dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _finish(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape, "sub")
    out = Tensor(a.data - b.data, dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(g, b.shape))

    return _finish(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape, "mul")
    out = Tensor(a.data * b.data, dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _finish(out, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _finish(out, (a,), bwd, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    _check_leading_broadcast(la, lb, "matmul")
    out = Tensor(np.matmul(a.data, b.data), dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _finish(out, (a, b), bwd, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape), dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _finish(out, (a,), bwd, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), dtype=a.dtype)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return _finish(out, (a,), bwd, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), dtype=tensors[0].dtype)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(piece)

    return _finish(out, tuple(tensors), bwd, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(np.ascontiguousarray(a.data[idx]), dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accumulate_grad(full)

    return _finish(out, (a,), bwd, "narrow")


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows along axis 0; also serves as embedding lookup."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"gather_rows: integer indices required, got dtype {idx.dtype}")
    out = Tensor(a.data[idx], dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a.accumulate_grad(full)

    return _finish(out, (a,), bwd, "gather_rows")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    return gather_rows(table, ids)


def softmax(a: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax over the last axis.

    `additive_mask` is an optional constant (e.g. -1e9 above the causal
    diagonal) added to the logits before normalization; it broadcasts like
    `add` and takes no gradient.
    """
    logits = a.data if additive_mask is None else a.data + additive_mask
    shifted = logits - logits.max(axis=-1, keepdims=True)  # fresh temporary
    e = np.exp(shifted, out=shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            ga = s * (g - (g * s).sum(axis=-1, keepdims=True))
            a.accumulate_grad(ga)

    return _finish(out, (a,), bwd, "softmax")


def rms_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale rows of the last axis to unit root-mean-square (no gain)."""
    ms = np.mean(a.data * a.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    y = a.data * inv
    out = Tensor(y, dtype=a.dtype)
    n = a.shape[-1]

    def bwd(g):
        if a.requires_grad:
            dot = (a.data * g).sum(axis=-1, keepdims=True)
            ga = inv * (g - (inv * inv / n) * a.data * dot)
            a.accumulate_grad(ga)

    return _finish(out, (a,), bwd, "rms_norm")


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig, dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _finish(out, (a,), bwd, "silu")


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.sign(a.data))

    return _finish(out, (a,), bwd, "absolute")


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.shape))

    return _finish(out, (a,), bwd, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean(), dtype=a.dtype)
    inv_n = 1.0 / a.data.size

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g * inv_n, a.shape))

    return _finish(out, (a,), bwd, "mean_all")
