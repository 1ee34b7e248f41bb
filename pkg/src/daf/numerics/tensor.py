"""Reverse-mode autodiff over dense float64 arrays.

A `Tensor` wraps a NumPy array plus an optional computation record (parent
tensors and a backward closure). Graphs are built eagerly during the forward
pass and traversed once, iteratively, by `backward`. Everything is
double precision and single-threaded per graph; distinct graphs may live on
distinct threads (the grad-enabled flag is thread-local).

Shapes are explicit: there is no general broadcasting. The op set is exactly
what the forecaster needs - matrix products, position-wise affine maps over
sequences, same-padded 1-d convolution, masked softmax, a generic two-operand
einsum, slicing and concatenation, and pointwise nonlinearities.
"""

from __future__ import annotations

import threading
from math import prod
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigurationError, ContractError, ShapeMismatchError
from . import kernels


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


class no_grad:
    """Context manager that disables graph recording on this thread."""

    def __enter__(self):
        self._prev = _grad_mode.enabled
        _grad_mode.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_mode.enabled


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """A node in the computation graph.

    `grad` is lazily allocated (zeros) the first time a gradient is
    accumulated. Leaf tensors with `requires_grad=True` are the trainable
    parameters; everything else either records its parents (tracked) or is a
    plain constant.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        if not np.isfinite(self.data).all():
            raise ContractError("tensor values must be finite")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- construction of internal nodes --------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = False
        if _grad_mode.enabled and any(p._tracked for p in parents):
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    @property
    def _tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g)  # owned copy; g may be a view
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(g, self.data.shape).copy()
        else:
            self.grad += g

    # -- basic info -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op})"

    # -- pointwise arithmetic --------------------------------------------------

    def _coerce(self, other) -> "Tensor | float":
        if isinstance(other, Tensor):
            return other
        if np.isscalar(other):
            return float(other)
        return Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            out = Tensor._result(self.data + other, (self,), None, "add_s")
            if out._parents:
                out._backward = lambda g: self._accumulate(g)
            return out
        _same_shape(self, other, "add")
        out_data = self.data + other.data

        def back(g):
            if self._tracked:
                self._accumulate(g)
            if other._tracked:
                other._accumulate(g)

        return Tensor._result(out_data, (self, other), back, "add")

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        out = Tensor._result(-self.data, (self,), None, "neg")
        if out._parents:
            out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            return self.__add__(-other)
        _same_shape(self, other, "sub")
        out_data = self.data - other.data

        def back(g):
            if self._tracked:
                self._accumulate(g)
            if other._tracked:
                other._accumulate(-g)

        return Tensor._result(out_data, (self, other), back, "sub")

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            out = Tensor._result(self.data * other, (self,), None, "mul_s")
            if out._parents:
                out._backward = lambda g, c=other: self._accumulate(g * c)
            return out
        _same_shape(self, other, "mul")
        out_data = self.data * other.data

        def back(g):
            if self._tracked:
                self._accumulate(g * other.data)
            if other._tracked:
                other._accumulate(g * self.data)

        return Tensor._result(out_data, (self, other), back, "mul")

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or not np.isscalar(other):
            raise ContractError("tensor division only supports scalar divisors")
        return self.__mul__(1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- pointwise functions ----------------------------------------------------

    def square(self) -> "Tensor":
        out_data = self.data * self.data

        def back(g):
            self._accumulate(2.0 * self.data * g)

        return Tensor._result(out_data, (self,), back, "square")

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0.0)

        def back(g):
            self._accumulate(g * (self.data > 0.0))

        return Tensor._result(out_data, (self,), back, "relu")

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def back(g):
            self._accumulate(g * out_data)

        return Tensor._result(out_data, (self,), back, "exp")

    def log(self) -> "Tensor":
        if self.data.min() <= 0.0:
            raise ContractError("log requires strictly positive inputs")
        out_data = np.log(self.data)

        def back(g):
            self._accumulate(g / self.data)

        return Tensor._result(out_data, (self,), back, "log")

    def sigmoid(self) -> "Tensor":
        x = self.data
        out_data = np.empty_like(x)
        pos = x >= 0
        out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out_data[~pos] = ex / (1.0 + ex)

        def back(g):
            self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._result(out_data, (self,), back, "sigmoid")

    def clamp(self, lo: float, hi: float) -> "Tensor":
        out_data = np.clip(self.data, lo, hi)

        def back(g):
            inside = (self.data > lo) & (self.data < hi)
            self._accumulate(g * inside)

        return Tensor._result(out_data, (self,), back, "clamp")

    # -- reductions ---------------------------------------------------------------

    def sum(self) -> "Tensor":
        out_data = np.array([self.data.sum()])

        def back(g):
            self._accumulate(np.full_like(self.data, g[0]))

        return Tensor._result(out_data, (self,), back, "sum")

    def mean(self) -> "Tensor":
        n = self.data.size
        out_data = np.array([self.data.mean()])

        def back(g):
            self._accumulate(np.full_like(self.data, g[0] / n))

        return Tensor._result(out_data, (self,), back, "mean")

    # -- shape ops -------------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        if prod(shape) != self.data.size:
            raise ShapeMismatchError(f"cannot reshape {self.shape} to {shape}")
        old = self.shape
        out_data = self.data.reshape(shape)

        def back(g):
            self._accumulate(g.reshape(old))

        return Tensor._result(out_data, (self,), back, "reshape")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


def constant(data) -> Tensor:
    return Tensor(data)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-d matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dims of {a.shape} and {b.shape} disagree")
    out_data = a.data @ b.data

    def back(g):
        if a._tracked:
            a._accumulate(g @ b.data.T)
        if b._tracked:
            b._accumulate(a.data.T @ g)

    return Tensor._result(out_data, (a, b), back, "matmul")


def linear_seq(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Position-wise affine map: x (..,in,L) -> (..,out,L) via w (out,in)."""
    if w.ndim != 2:
        raise ShapeMismatchError(f"linear_seq weight must be 2-d, got {w.shape}")
    if x.ndim not in (2, 3) or x.shape[-2] != w.shape[1]:
        raise ShapeMismatchError(
            f"linear_seq: input {x.shape} incompatible with weight {w.shape}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatchError(f"linear_seq: bias {b.shape} vs weight {w.shape}")
    out_data = np.matmul(w.data, x.data)
    if b is not None:
        out_data += b.data[:, None]

    def back(g):
        if x._tracked:
            x._accumulate(np.matmul(w.data.T, g))
        if w._tracked:
            if x.ndim == 2:
                w._accumulate(g @ x.data.T)
            else:
                w._accumulate(np.tensordot(g, x.data, axes=([0, 2], [0, 2])))
        if b is not None and b._tracked:
            axes = (1,) if g.ndim == 2 else (0, 2)
            b._accumulate(g.sum(axis=axes))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out_data, parents, back, "linear_seq")


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded cross-correlation: x (..,Cin,L) -> (..,Cout,L).

    Kernel size must be odd so the zero padding of (s-1)/2 on each side keeps
    the output length equal to the input length.
    """
    if w.ndim != 3:
        raise ShapeMismatchError(f"conv1d kernel must be 3-d, got {w.shape}")
    s = w.shape[2]
    if s % 2 == 0:
        raise ConfigurationError(f"conv1d kernel size must be odd, got {s}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatchError(f"conv1d: bias {b.shape} vs kernel {w.shape}")
    xd = np.ascontiguousarray(xd)  # inputs may be narrow views
    out_data = kernels.conv1d_fwd(xd, w.data, b.data)
    if squeeze:
        out_data = out_data[0]

    def back(g):
        g3 = g[None] if squeeze else g
        g3 = np.ascontiguousarray(g3)
        gx, gw, gb = kernels.conv1d_bwd(xd, w.data, g3)
        if x._tracked:
            x._accumulate(gx[0] if squeeze else gx)
        if w._tracked:
            w._accumulate(gw)
        if b._tracked:
            b._accumulate(gb)

    return Tensor._result(out_data, (x, w, b), back, "conv1d")


def mlp_forward(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Position-wise MLP: ReLU between layers, no activation on the output."""
    if len(layers) < 1:
        raise ConfigurationError("mlp_forward needs at least one layer")
    d_prev = x.shape[-2]
    for i, (w, b) in enumerate(layers):
        if w.shape[1] != d_prev:
            raise ConfigurationError(
                f"mlp_forward: layer {i} expects input dim {w.shape[1]}, got {d_prev}"
            )
        d_prev = w.shape[0]
    out = x
    for i, (w, b) in enumerate(layers):
        out = linear_seq(out, w, b)
        if i + 1 < len(layers):
            out = out.relu()
    return out


# Batched attention contractions mapped onto GEMM (np.einsum does not use
# BLAS when both operands share a batch label). Key: einsum equation.
_T = lambda x: x.transpose(0, 2, 1)  # noqa: E731
_CONTRACTIONS = {
    "bdt,bds->bts": lambda a, b: np.matmul(_T(a), b),
    "bts,bhs->bht": lambda a, b: np.matmul(b, _T(a)),
    "bts,bds->bdt": lambda a, b: np.matmul(b, _T(a)),
    "bts,bdt->bds": lambda a, b: np.matmul(b, a),
    "bht,bhs->bts": lambda a, b: np.matmul(_T(a), b),
    "bht,bts->bhs": lambda a, b: np.matmul(a, b),
    "bd,bdn->bn": lambda a, b: np.matmul(a[:, None, :], b)[:, 0, :],
    "bn,bdn->bd": lambda a, b: np.matmul(b, a[:, :, None])[:, :, 0],
    "bn,bd->bdn": lambda a, b: np.matmul(b[:, :, None], a[:, None, :]),
    "bn,bhn->bh": lambda a, b: np.matmul(b, a[:, :, None])[:, :, 0],
    "bh,bhn->bn": lambda a, b: np.matmul(a[:, None, :], b)[:, 0, :],
    "bh,bn->bhn": lambda a, b: np.matmul(a[:, :, None], b[:, None, :]),
}


def _contract(eq: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    fn = _CONTRACTIONS.get(eq)
    if fn is not None:
        return fn(a, b)
    return np.einsum(eq, a, b, optimize=True)


def einsum2(eq: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum whose operands' labels all appear elsewhere.

    That restriction makes each gradient another einsum with the roles of the
    output and one input swapped. The attention contractions hit a GEMM fast
    path; anything else falls back to np.einsum.
    """
    lhs, out_spec = eq.split("->")
    a_spec, b_spec = lhs.split(",")
    for spec in (a_spec, b_spec):
        if len(set(spec)) != len(spec):
            raise ContractError(f"einsum2 does not support repeated labels in {spec!r}")
    if not set(a_spec) <= set(out_spec) | set(b_spec):
        raise ContractError(f"einsum2: labels of {a_spec!r} must appear in output or other input")
    if not set(b_spec) <= set(out_spec) | set(a_spec):
        raise ContractError(f"einsum2: labels of {b_spec!r} must appear in output or other input")
    out_data = _contract(eq, a.data, b.data)

    def back(g):
        if a._tracked:
            a._accumulate(_contract(f"{out_spec},{b_spec}->{a_spec}", g, b.data))
        if b._tracked:
            b._accumulate(_contract(f"{out_spec},{a_spec}->{b_spec}", g, a.data))

    return Tensor._result(out_data, (a, b), back, f"einsum[{eq}]")


def masked_softmax(scores: Tensor, excluded: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis; `excluded` marks entries forced to 0.

    `excluded` may have the scores' shape or any broadcastable trailing shape
    (e.g. a (T, T) diagonal mask for (B, T, T) scores). Max-subtraction inside
    the kernel keeps the exponentials finite for any score magnitude.
    """
    if excluded is not None:
        excluded = np.asarray(excluded, dtype=bool)
        if excluded.shape != scores.shape[-excluded.ndim :]:
            raise ShapeMismatchError(
                f"mask {excluded.shape} does not match trailing dims of {scores.shape}"
            )
        if excluded.all(axis=-1).any():
            raise ContractError("masked_softmax: some row has every entry excluded")
    out_data = kernels.masked_softmax_fwd(scores.data, excluded)

    def back(g):
        scores._accumulate(kernels.masked_softmax_bwd(out_data, g))

    return Tensor._result(out_data, (scores,), back, "masked_softmax")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along `axis`; all other dims must agree."""
    if not parts:
        raise ContractError("concat needs at least one tensor")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p._tracked:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                p._accumulate(g[tuple(idx)])

    return Tensor._result(out_data, tuple(parts), back, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis` (a view)."""
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ContractError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of {x.shape}"
        )
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = x.data[idx]

    def back(g):
        if not x._tracked:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[idx] += g

    return Tensor._result(out_data, (x,), back, "narrow")


class SequenceBuffer:
    """Append-only storage for a sequence that grows along its last axis.

    Autoregressive decoding extends several per-position arrays one (or a
    few) columns at a time; rebuilding them with `concat` would copy the
    whole prefix every step. A SequenceBuffer writes appended blocks into a
    preallocated array and hands out zero-copy views; gradients of all views
    accumulate in one shared buffer and are routed back to each appended
    block exactly once.

    Columns must never be revised after being appended (views alias the
    storage), which holds for the decoder: queries/keys are appended only
    once final, and values/inputs are never recomputed.
    """

    _POKE = None  # shared (1,) zeros used to chain sentinel nodes

    def __init__(self, batch: int, channels: int, capacity: int):
        self.data = np.zeros((batch, channels, capacity))
        self.grad: np.ndarray | None = None
        self.length = 0
        self._node: Tensor | None = None
        if SequenceBuffer._POKE is None:
            SequenceBuffer._POKE = np.zeros(1)

    def append(self, block: Tensor) -> None:
        n = block.shape[-1]
        start = self.length
        if start + n > self.data.shape[2]:
            raise ContractError("sequence buffer capacity exceeded")
        self.data[:, :, start : start + n] = block.data
        self.length = start + n
        buf = self
        prev = self._node

        def back(_g):
            if block._tracked and buf.grad is not None:
                block._accumulate(buf.grad[:, :, start : start + n])
            if prev is not None and prev._tracked:
                prev._accumulate(SequenceBuffer._POKE)

        parents = (block,) if prev is None else (prev, block)
        self._node = Tensor._result(SequenceBuffer._POKE, parents, back, "seqbuf_append")

    def view(self, start: int, stop: int) -> Tensor:
        """Tensor view of columns [start, stop); must already be appended."""
        if not 0 <= start < stop <= self.length:
            raise ContractError(
                f"buffer view [{start}, {stop}) outside appended range [0, {self.length})"
            )
        buf = self
        node = self._node

        def back(g):
            if buf.grad is None:
                buf.grad = np.zeros_like(buf.data)
            buf.grad[:, :, start:stop] += g
            if node is not None and node._tracked:
                node._accumulate(SequenceBuffer._POKE)

        parents = () if node is None else (node,)
        return Tensor._result(self.data[:, :, start:stop], parents, back, "seqbuf_view")


# -- backward pass ---------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's `.grad`.

    The traversal is iterative (graphs from recursive decoding are deep) and
    visits each node exactly once.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not np.isfinite(root.data).all():
        raise ContractError("backward: root value is not finite")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent._tracked:
                stack.append((parent, False))

    root._accumulate(np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node is not root and not node.requires_grad:
            node.grad = None  # free intermediate buffers as we go
