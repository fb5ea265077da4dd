"""Dense f64 tensors with tape-based reverse-mode differentiation.

Every op takes :class:`Tensor` inputs and returns a new :class:`Tensor`. While a
:class:`Tape` is active (``with Tape() as tape:``) ops whose inputs require
gradients are appended to it, and :func:`backward` replays them in reverse to
fill ``.grad`` on the leaf tensors (model parameters, attacked inputs).

A tape is built fresh for each forward pass and may be replayed only once.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
BCE_CLAMP = 1e-7

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "radarkit_active_tape", default=None
)


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a tape: consumed twice, root not recorded, non-scalar root."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flattened view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__


class _Record:
    __slots__ = ("name", "out", "inputs", "vjp")

    def __init__(self, name, out, inputs, vjp):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of the ops applied during one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(name: str, arr: np.ndarray, where: str = "forward") -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in {where} of op '{name}'")


def _emit(name: str, out_data: np.ndarray, inputs: Sequence[Tensor],
          vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    _check_finite(name, out_data)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._tape = None
    tape = _ACTIVE_TAPE.get()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        if tape.consumed:
            raise TapeError("cannot record onto a consumed tape")
        tape.records.append(_Record(name, out, tuple(inputs), vjp))
        out._tape = tape
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it with d(root)/d(leaf).

    Leaf gradients are overwritten, not accumulated across calls. Fan-out
    within the pass is accumulated additively.
    """
    if tape.consumed:
        raise TapeError("backward called on a consumed tape")
    if root.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")
    if root._tape is not tape:
        raise TapeError("root tensor was not recorded on this tape")
    tape.consumed = True

    produced = {id(r.out) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            _check_finite(rec.name, gi, "backward")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
    tape.records.clear()


# ----------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _emit("matmul", A @ B, (a, b), vjp)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[B,C,H,W]`` with ``w[F,C,k,k]``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    B, C, H, W = x.shape
    F, Cw, k, k2 = w.shape
    if Cw != C or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d needs stride >= 1 and pad >= 0")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if k > Hp or k > Wp:
        raise ValueError(f"kernel {k} larger than padded input {Hp}x{Wp}")
    if (Hp - k) % stride or (Wp - k) % stride:
        raise ValueError("conv2d output size is not integral for this stride/pad")
    Ho, Wo = (Hp - k) // stride + 1, (Wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: (B*Ho*Wo, C*k*k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wmat = w.data.reshape(F, C * k * k)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros((B, C, Hp, Wp), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw

    return _emit("conv2d", np.ascontiguousarray(out), (x, w), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias along axis 1 (dense rows or conv channels)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    bshape = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return _emit("add_bias", x.data + b.data.reshape(bshape), (x, b),
                 lambda g: (g, g.sum(axis=axes)))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _stable_sigmoid(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    ds = e / (1.0 + e) ** 2
    return s, ds


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s, ds = _stable_sigmoid(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * ds,))


def flatten(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit("flatten", x.data.reshape(shape[0], -1), (x,),
                 lambda g: (g.reshape(shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def mean_pool(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` average pooling."""
    x = _as_tensor(x)
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"mean_pool: {H}x{W} not divisible by {k}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _emit("mean_pool", out, (x,), vjp)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", np.array(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    return _emit("mean", np.array(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def _reduce(name, per_item, grad_item, inputs, reduction):
    n = per_item.shape[0]
    if reduction == "none":
        return _emit(name, per_item, inputs, lambda g: (g.reshape(-1, *([1] * (grad_item.ndim - 1))) * grad_item,))
    if reduction == "sum":
        return _emit(name, np.array(per_item.sum()), inputs, lambda g: (g * grad_item,))
    if reduction == "mean":
        return _emit(name, np.array(per_item.mean()), inputs, lambda g: (g * grad_item / n,))
    raise ValueError(f"unknown reduction {reduction!r}")


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer class labels."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"cross_entropy expects [B, K>=2] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, K = logits.shape
    if labels.shape[0] != B:
        raise ValueError("cross_entropy: label count does not match batch")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"cross_entropy: label out of range [0, {K})")
    lsm = log_softmax(logits.data)
    rows = np.arange(B)
    per_item = -lsm[rows, labels]
    grad_item = np.exp(lsm)
    grad_item[rows, labels] -= 1.0
    return _reduce("cross_entropy", per_item, grad_item, (logits,), reduction)


def binary_cross_entropy(prob: Tensor, target, reduction: str = "mean") -> Tensor:
    """BCE on probabilities, clamped to ``[1e-7, 1 - 1e-7]``."""
    prob = _as_tensor(prob)
    t = np.asarray(target, dtype=DTYPE).reshape(prob.shape)
    p = prob.data
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (p >= BCE_CLAMP) & (p <= 1.0 - BCE_CLAMP)
    per_item = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    grad_item = np.where(inside, (pc - t) / (pc * (1.0 - pc)), 0.0)
    return _reduce("binary_cross_entropy", per_item, grad_item, (prob,), reduction)


def bce_with_logits(logit: Tensor, target, reduction: str = "mean") -> Tensor:
    """BCE of ``sigmoid(logit)`` computed directly from the logit (no clamp)."""
    logit = _as_tensor(logit)
    t = np.asarray(target, dtype=DTYPE).reshape(logit.shape)
    z = logit.data
    per_item = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    s, _ = _stable_sigmoid(z)
    return _reduce("bce_with_logits", per_item, s - t, (logit,), reduction)
