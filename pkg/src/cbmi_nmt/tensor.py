"""Dense tensors with tape-based reverse-mode automatic differentiation.

Deliberately small: exactly the operations the translation and language
models need, on row-major numpy storage. Training runs in float32 by
default; numerical oracles (gradient checks) use float64.

A ``Tape`` records operations in execution order, which is already a
topological order: every operand of a node was created before the node.
``Tape.backward`` therefore walks the node list once, in reverse, and
accumulates gradients into the ``grad`` field of leaf tensors that were
created with ``requires_grad=True``.

Tensors are treated as immutable values after construction (the optimizer
rebinds ``data`` rather than writing into shared arrays). A tape must stay
confined to a single thread.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense float array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar; the model code reads better with it.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -np.asarray(other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "grad_fn")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], grad_fn: Callable):
        self.out = out
        self.parents = parents
        self.grad_fn = grad_fn


class Tape:
    """Execution-ordered record of differentiable operations.

    Use as a context manager around a forward pass; once the loss is built,
    call :meth:`backward` (inside or outside the ``with`` block).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every
        requires-grad leaf reachable from ``loss``.

        Each recorded node is visited exactly once. Raises if ``loss`` is not
        a scalar or was not produced by operations recorded on this tape.
        """
        if loss.data.shape != ():
            raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        produced = {id(node.out) for node in self.nodes}
        if id(loss) not in produced:
            raise ValueError("loss was not produced by operations recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        for node in reversed(self.nodes):
            out_grad = grads.pop(id(node.out), None)
            if out_grad is None:
                continue
            parent_grads = node.grad_fn(out_grad)
            for parent, pgrad in zip(node.parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                if id(parent) in produced:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pgrad
                    else:
                        grads[key] = pgrad
                else:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pgrad


_ACTIVE_TAPE: Tape | None = None


def backward(loss: Tensor) -> None:
    """Backpropagate through the currently active tape."""
    if _ACTIVE_TAPE is None:
        raise RuntimeError("backward() outside of an active Tape")
    _ACTIVE_TAPE.backward(loss)


def _record(out: Tensor, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(parents), grad_fn))
    return out


def _const(x, dtype) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along axes that were broadcast."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = Tensor(a.data + b.data)

        def grad_fn(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

        return _record(out, (a, b), grad_fn)
    bconst = _const(b, a.data.dtype)
    out = Tensor(a.data + bconst)

    def grad_fn(g):
        return (_unbroadcast(g, a.data.shape),)

    return _record(out, (a,), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = Tensor(a.data * b.data)

        def grad_fn(g):
            return (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            )

        return _record(out, (a, b), grad_fn)
    bconst = _const(b, a.data.dtype)
    out = Tensor(a.data * bconst)

    def grad_fn(g):
        return (_unbroadcast(g * bconst, a.data.shape),)

    return _record(out, (a,), grad_fn)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out = Tensor(np.matmul(a.data, b.data))

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old_shape = a.data.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(old_shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add into ``weight``."""
    ids = np.asarray(ids)
    vocab = weight.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids.max() if ids.max() >= vocab else ids.min())
        raise ValueError(f"token id {bad} out of range for vocab size {vocab}")
    out = Tensor(weight.data[ids])

    def grad_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.data.shape[1]))
        return (gw,)

    return _record(out, (weight,), grad_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0))
    return _record(out, (a,), lambda g: (g * mask,))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).astype(a.data.dtype),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0. ``rng`` draws are part of
    the run's deterministic stream, so call order matters."""
    if rate <= 0.0:
        return a
    draw_dtype = a.data.dtype if a.data.dtype == np.float32 else np.float64
    keep = (rng.random(a.data.shape, dtype=draw_dtype) >= rate).astype(a.data.dtype)
    keep /= np.asarray(1.0 - rate, dtype=a.data.dtype)
    return mul(a, keep)


# ---------------------------------------------------------------------------
# normalization and loss ops


def _check_finite_rows(x: np.ndarray, op: str) -> None:
    finite = np.isfinite(x)
    if finite.all():
        return
    rows = np.argwhere(~finite.all(axis=-1))
    row = tuple(int(i) for i in rows[0])
    raise ValueError(f"{op}: non-finite input at row {row}")


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max-subtraction."""
    _check_finite_rows(a.data, "softmax")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out_data = exp / exp.sum(axis=-1, keepdims=True)
    out = Tensor(out_data)

    def grad_fn(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - inner),)

    return _record(out, (a,), grad_fn)


def log_softmax(a: Tensor) -> Tensor:
    _check_finite_rows(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    out = Tensor(out_data)

    def grad_fn(g):
        probs = np.exp(out_data)
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), grad_fn)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row normalization over the last axis with affine output.

    Uses population variance with ``eps`` inside the square root, so a
    constant row maps to zeros (then ``bias``) instead of dividing by zero.
    """
    dim = x.data.shape[-1]
    if gain.data.shape != (dim,) or bias.data.shape != (dim,):
        raise ValueError("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = centered * inv_std
    out = Tensor(xhat * gain.data + bias.data)

    def grad_fn(g):
        gxhat = g * gain.data
        # d/dx of (x - mu) / sqrt(var + eps), var and mu both row statistics
        gvar = (gxhat * centered).sum(axis=-1, keepdims=True) * (-0.5) * inv_std**3
        gmu = -(gxhat * inv_std).sum(axis=-1, keepdims=True) + gvar * (-2.0) * centered.mean(
            axis=-1, keepdims=True
        )
        gx = gxhat * inv_std + gvar * 2.0 * centered / dim + gmu / dim
        reduce_axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=reduce_axes)
        gbias = g.sum(axis=reduce_axes)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), grad_fn)


def weighted_cross_entropy(
    log_probs: Tensor,
    targets: np.ndarray,
    weights,
    smoothing: float = 0.0,
) -> Tensor:
    """Sum over rows of ``w_j * loss_j`` where ``loss_j`` is the (optionally
    label-smoothed) negative log-likelihood of the gold token.

    ``weights`` are constants: no gradient flows into them. Smoothing ``eps``
    mixes the gold NLL with the uniform distribution over the whole vocab,
    ``(1 - eps) * nll_j + (eps / V) * sum_v(-log p_v)``, and the weight
    multiplies the whole smoothed per-row loss. Pad rows are handled by the
    caller passing weight 0. Reduces to the plain summed NLL when all
    weights are 1 and smoothing is 0.
    """
    if log_probs.data.ndim != 2:
        raise ValueError("weighted_cross_entropy expects [rows, vocab] log-probs")
    rows, vocab = log_probs.data.shape
    targets = np.asarray(targets)
    if targets.shape != (rows,):
        raise ValueError(f"targets shape {targets.shape} does not match {rows} rows")
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    if w.shape != (rows,):
        raise ValueError(f"weights shape {w.shape} does not match {rows} rows")
    w = w.astype(log_probs.data.dtype)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError("target id out of vocabulary range")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")

    row_idx = np.arange(rows)
    nll = -log_probs.data[row_idx, targets]
    if smoothing > 0.0:
        smooth = -log_probs.data.sum(axis=-1)
        per_row = (1.0 - smoothing) * nll + (smoothing / vocab) * smooth
    else:
        per_row = nll
    out = Tensor((w * per_row).sum())

    def grad_fn(g):
        glp = np.zeros_like(log_probs.data)
        glp[row_idx, targets] = -(1.0 - smoothing) * w
        if smoothing > 0.0:
            glp -= (smoothing / vocab) * w[:, None]
        return (g * glp,)

    return _record(out, (log_probs,), grad_fn)
