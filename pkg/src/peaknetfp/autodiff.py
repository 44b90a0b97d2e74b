"""Minimal reverse-mode automatic differentiation on numpy arrays.

Just enough machinery for the point-set encoder and its contrastive loss:
dense matmul, elementwise arithmetic, relu, concat, max/sum/mean reductions,
log-softmax, row L2 normalization, row gathering, and batch normalization.
Gradients flow through a recorded tape of closures, replayed in reverse
topological order. float32 is the working dtype; float64 inputs are honored
(gradient checks run the whole stack in float64).

Deliberate restrictions, enforced loudly:
- matmul is strictly 2-D;
- broadcasting exists only where stated (bias add, scale_bias, scalars);
- ``backward()`` starts from scalars only.

Also here: the Adam optimizer that consumes these gradients, and the binary
checkpoint format for named arrays.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, DataError, DecodeError, ShapeError

DEFAULT_DTYPE = np.float32

CHECKPOINT_MAGIC = b"PNFPCKPT"
CHECKPOINT_VERSION = 1

_debug_checks = False
_grad_enabled = True


def set_debug_checks(enabled: bool) -> None:
    """When enabled, tensor construction rejects NaN/Inf values."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextmanager
def no_grad():
    """Disable tape recording; intermediates are freed as references drop."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        if _debug_checks and not np.isfinite(self.data).all():
            raise ContractError("non-finite values in tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # small operator sugar; everything routes through the module functions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ContractError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(
                f"backward() starts from a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    # own=True promises g is a freshly allocated array aliasing nothing, so
    # it can be adopted as the grad buffer outright
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if not _grad_enabled:
        return out
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def add(a: Tensor, b: Tensor | float) -> Tensor:
    if not isinstance(b, Tensor):
        out_data = a.data + float(b)

        def back():
            _accumulate(a, out.grad)

        out = _make(out_data, (a,), back)
        return out
    if a.data.shape == b.data.shape:
        out_data = a.data + b.data

        def back():
            _accumulate(a, out.grad)
            _accumulate(b, out.grad)

    elif b.data.ndim == 1 and a.data.shape[-1] == b.data.shape[0]:
        # bias add over the last axis; the only tensor broadcast we allow
        out_data = a.data + b.data

        def back():
            _accumulate(a, out.grad)
            _accumulate(b, out.grad.reshape(-1, b.data.shape[0]).sum(axis=0), own=True)

    else:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} / {b.data.shape}")
    out = _make(out_data, (a, b), back)
    return out


def sub(a: Tensor, b: Tensor | float) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: incompatible shapes {a.data.shape} / {b.data.shape}")
    out_data = a.data - b.data

    def back():
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad, own=True)

    out = _make(out_data, (a, b), back)
    return out


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out_data = a.data * s

        def back():
            _accumulate(a, out.grad * s, own=True)

        out = _make(out_data, (a,), back)
        return out
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} / {b.data.shape}")
    out_data = a.data * b.data

    def back():
        _accumulate(a, out.grad * b.data, own=True)
        _accumulate(b, out.grad * a.data, own=True)

    out = _make(out_data, (a, b), back)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul is 2-D only, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def back():
        _accumulate(a, out.grad @ b.data.T, own=True)
        _accumulate(b, a.data.T @ out.grad, own=True)

    out = _make(out_data, (a, b), back)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-D x; the workhorse of every MLP layer."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"linear: bad ranks {x.data.shape} @ {w.data.shape} + {b.data.shape}"
        )
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"linear: {x.data.shape} @ {w.data.shape} + {b.data.shape}"
        )
    out_data = x.data @ w.data
    out_data += b.data

    def back():
        g = out.grad
        _accumulate(x, g @ w.data.T, own=True)
        _accumulate(w, x.data.T @ g, own=True)
        _accumulate(b, g.sum(axis=0), own=True)

    out = _make(out_data, (x, w, b), back)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose is 2-D only, got {a.data.shape}")
    out_data = a.data.T.copy()

    def back():
        _accumulate(a, out.grad.T)

    out = _make(out_data, (a,), back)
    return out


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def back():
        _accumulate(a, out.grad * (a.data > 0), own=True)

    out = _make(out_data, (a,), back)
    return out


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * out_data.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, out.grad[tuple(sl)])

    out = _make(out_data, tensors, back)
    return out


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; ties route the gradient to the lowest index."""
    out_data = a.data.max(axis=axis)
    idx = np.argmax(a.data, axis=axis)

    def back():
        g = np.zeros_like(a.data)
        np.put_along_axis(
            g, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis
        )
        _accumulate(a, g, own=True)

    out = _make(out_data, (a,), back)
    return out


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def back():
        if axis is None:
            _accumulate(a, np.full_like(a.data, out.grad), own=True)
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(out.grad, axis), a.data.shape))

    out = _make(out_data, (a,), back)
    return out


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / n)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def back():
        _accumulate(a, out.grad / a.data, own=True)

    out = _make(out_data, (a,), back)
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back():
        _accumulate(a, out.grad * out_data, own=True)

    out = _make(out_data, (a,), back)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back():
        soft = np.exp(out_data)
        _accumulate(a, out.grad - soft * out.grad.sum(axis=axis, keepdims=True), own=True)

    out = _make(out_data, (a,), back)
    return out


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out_data = a.data / norm

    def back():
        g = out.grad
        proj = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - out_data * proj) / norm, own=True)

    out = _make(out_data, (a,), back)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)

    def back():
        _accumulate(a, out.grad.reshape(a.data.shape))

    out = _make(out_data, (a,), back)
    return out


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """out[..., :] = a[indices[...], :]; repeated indices accumulate grads."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {a.data.shape}")
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather_rows indices must be integers")
    out_data = a.data[idx]

    def back():
        g = np.zeros_like(a.data)
        np.add.at(g, idx.reshape(-1), out.grad.reshape(-1, a.data.shape[1]))
        _accumulate(a, g, own=True)

    out = _make(out_data, (a,), back)
    return out


def scale_bias(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """y = x * scale + shift with (C,) scale/shift over the last axis."""
    c = x.data.shape[-1]
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(
            f"scale_bias: need ({c},) vectors, got {scale.data.shape}/{shift.data.shape}"
        )
    out_data = x.data * scale.data + shift.data

    def back():
        g2 = out.grad.reshape(-1, c)
        x2 = x.data.reshape(-1, c)
        _accumulate(x, out.grad * scale.data, own=True)
        _accumulate(scale, (g2 * x2).sum(axis=0), own=True)
        _accumulate(shift, g2.sum(axis=0), own=True)

    out = _make(out_data, (x, scale, shift), back)
    return out


def batch_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize rows of a 2-D tensor by batch statistics (training mode).

    Returns (y, batch_mean, batch_var); the plain-array statistics feed the
    caller's running averages. Inference composes scale_bias with frozen
    statistics instead.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm expects 2-D input, got {x.data.shape}")
    n, c = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("batch_norm: gamma/beta must be (C,)")
    mu = x.data.mean(axis=0)
    xhat = x.data - mu
    var = (xhat * xhat).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out_data = gamma.data * xhat
    out_data += beta.data

    def back():
        g = out.grad
        _accumulate(beta, g.sum(axis=0), own=True)
        _accumulate(gamma, (g * xhat).sum(axis=0), own=True)
        gx = g * gamma.data
        m1 = gx.mean(axis=0)
        m2 = (gx * xhat).mean(axis=0)
        gx -= m1
        gx -= xhat * m2
        gx *= inv
        _accumulate(x, gx, own=True)

    out = _make(out_data, (x, gamma, beta), back)
    return out, mu, var


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class AdamState:
    """First/second moment estimates plus the global step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update over named parameters."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Named float32 arrays in a flat validated binary layout."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BI", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            a = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DecodeError(f"{path}: bad magic, not a checkpoint")
    if len(blob) < 13:
        raise DecodeError(f"{path}: truncated header")
    version, count = struct.unpack_from("<BI", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise DecodeError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    off = 13
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, off) if ndim else ()
            off += 8 * ndim
            n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n_items, offset=off)
            off += 4 * n_items
            out[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as exc:
        raise DecodeError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(blob):
        raise DecodeError(f"{path}: {len(blob) - off} trailing bytes")
    return out
