"""Float64 tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` (entered with
``with Tape() as tape:``) whenever one of their inputs requires a gradient.
Outside a tape every operation is a plain numpy computation, which is what
the finite-difference oracle in :func:`check_gradients` relies on.
"""

from __future__ import annotations

import math
import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionError,
    DomainError,
    EvaluationError,
    ValidationError,
)

DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, optionally tracked for differentiation.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients in
    ``grad``. Tensors produced by operations on a tape carry ``node_id``.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape_ref", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node_id: int | None = None
        self._tape_ref = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node_id = None
        t._tape_ref = None
        t.name = None
        return t

    @property
    def _tape(self) -> "Tape | None":
        # weak so that tape -> node -> tensor -> tape is not a reference cycle
        return None if self._tape_ref is None else self._tape_ref()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=DTYPE))


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Not thread-safe; give every concurrent computation its own tape.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._tape_ref = weakref.ref(self)
        self.nodes.append(Node(out, inputs, backward))
        return out

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Propagate ``d loss`` back to every leaf that requires a gradient.

        Leaf gradients are accumulated (``+=``) into ``Tensor.grad``.
        """
        if grad is None:
            if loss.size != 1:
                raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        if loss._tape is not self:
            if loss.requires_grad and loss.grad is not None:
                loss.grad += grad
            return
        grads: dict[int, np.ndarray] = {loss.node_id: np.asarray(grad, dtype=DTYPE)}
        for node_id in range(loss.node_id, -1, -1):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is self and inp.node_id is not None:
                    prev = grads.get(inp.node_id)
                    grads[inp.node_id] = ig if prev is None else prev + ig
                elif inp.grad is not None:
                    inp.grad += ig


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    >>> matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data
    array([[11.]])
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        da = g @ np.swapaxes(bd, -1, -2)
        db = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(da, ad.shape), unbroadcast(db, bd.shape)

    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    return _result(out, (a, b), backward)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x, index) -> Tensor:
    """Numpy-style indexing; repeated integer indices scatter-add on backward."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(x.data[index]), (x,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer id array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    n_rows, width = table.shape

    def backward(g):
        full = np.zeros((n_rows, width), dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, width))
        return (full,)

    return _result(table.data[ids], (table,), backward)


# ------------------------------------------------------------- nonlinearities


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(z) -> Tensor:
    z = as_tensor(z)
    s = _sigmoid(np.asarray(z.data, dtype=DTYPE).reshape(z.shape))
    return _result(s, (z,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU in its tanh form, ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``."""
    x = as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * (xd * xd * xd)))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _result(0.5 * xd * (1.0 + t), (x,), backward)


def softmax_rows(scores, mask=None, tau: float = 1.0) -> Tensor:
    """Masked, temperature-scaled softmax over the last axis.

    ``mask`` is boolean and broadcastable to ``scores``; False columns get
    exactly zero weight and are left out of the normaliser.
    """
    scores = as_tensor(scores)
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    s = scores.data / tau
    if mask is None:
        keep = np.ones(s.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
    if not keep.any(axis=-1).all():
        raise DegenerateInputError("softmax row with every column masked")
    shifted = np.where(keep, s, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    alpha = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * alpha).sum(axis=-1, keepdims=True)
        return (alpha * (g - inner) / tau,)

    return _result(alpha, (scores,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias shapes {gain.shape}, {bias.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, unbroadcast(g * xhat, (d,)), unbroadcast(g, (d,))

    return _result(xhat * gd + bias.data, (x, gain, bias), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets.

    Evaluated as ``softplus(z) - y*z`` so large logits never overflow.
    For a ``[batch, L]`` input this is the batch mean of per-document means.
    """
    z = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("bce_with_logits targets must be 0 or 1")
    zd = z.data
    per = np.maximum(zd, 0.0) - y * zd + np.log1p(np.exp(-np.abs(zd)))
    n = zd.size
    p = _sigmoid(zd.reshape(zd.shape))
    return _result(np.asarray(per.sum() / n), (z,), lambda g: (g * (p - y) / n,))


def dropout(x, rate: float, rng: "Rng | None") -> Tensor:
    x = as_tensor(x)
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.generator.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ------------------------------------------------------------------------ rng


class Rng:
    """Seeded PCG64 stream (numpy's 128-bit-state permuted congruential generator).

    Identical seeds give identical draw sequences on every platform numpy
    supports; the full state can be exported for checkpoints.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def state(self) -> dict:
        return self.generator.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self.generator.bit_generator.state = value

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, std, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def spawn(self, key: str) -> "Rng":
        """Child stream whose seed is a stable hash of this seed and ``key``."""
        return Rng(derive_seed(self.seed, key))


def derive_seed(seed: int, key: str) -> int:
    """Stable 64-bit seed from a root seed and a component name (BLAKE2b)."""
    import hashlib

    digest = hashlib.blake2b(f"{int(seed)}:{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}: max rel. error {self.max_rel_error:.3e} (tol {self.tol:g}, {self.n_checked} entries)"


def check_gradients(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dividing
    finite-difference round-off by zero.
    """
    params = list(params)
    if not 1e-6 <= eps <= 1e-4:
        raise ValidationError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    saved = [p.grad.copy() if p.grad is not None else None for p in params]
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
            p.requires_grad = True
        p.grad[...] = 0.0
    with Tape() as tape:
        out = f()
        value = float(np.asarray(out.data).reshape(-1)[0]) if out.size == 1 else math.nan
        if out.size != 1 or not math.isfinite(value):
            raise EvaluationError(f"gradient check needs a finite scalar, got {out.data!r}")
        tape.backward(out)
    analytic = [p.grad.copy() for p in params]

    def evaluate() -> float:
        v = float(f().data)
        if not math.isfinite(v):
            raise EvaluationError("function became non-finite under perturbation")
        return v

    worst = 0.0
    per_param: dict[str, float] = {}
    n = 0
    for i, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        pworst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = evaluate()
            flat[j] = orig - eps
            fm = evaluate()
            flat[j] = orig
            num = (fp - fm) / (2.0 * eps)
            err = abs(gflat[j] - num) / max(abs(gflat[j]), abs(num), floor)
            pworst = max(pworst, err)
            n += 1
        per_param[p.name or f"param{i}"] = pworst
        worst = max(worst, pworst)
    for p, s in zip(params, saved):
        if s is None:
            p.grad = None
            p.requires_grad = False
        else:
            p.grad[...] = s
    return GradCheckReport(max_rel_error=worst, tol=tol, n_checked=n, per_param=per_param)
