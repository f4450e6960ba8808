"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are numpy arrays; every operation that touches a tensor requiring
gradients records itself in an implicit DAG. ``backward`` on a scalar root
visits each node exactly once and accumulates gradients into the leaves.
Tensors are treated as immutable once they are part of a graph; the
optimizer swaps in fresh arrays between steps instead of mutating in place.

``grad_check`` is the independent oracle: central finite differences over
(sampled) coordinates of every parameter, never sharing code with the
reverse-mode rules it checks.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if any(d == 0 for d in arr.shape):
            raise ShapeError(f"zero-size dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph -------------------------------------------------------------

    def backward(self):
        """Reverse-mode pass from a scalar root; accumulates into leaf .grad."""
        if self.data.ndim != 0:
            raise ContractError(f"backward requires a scalar root, got shape {self.shape}")
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
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._backward_fn is None or node.grad is None:
                continue
            grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        # intermediate grads are not needed after the pass; keep leaves only
        for node in topo:
            if node._backward_fn is not None:
                node.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def item(self):
        return float(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def texp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: (g * out_data,))


def tlog(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _node(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def relu(a):
    a = as_tensor(a)
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


# -- structural --------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")

    def bwd(g):
        return (
            g @ np.swapaxes(b.data, -1, -2),
            np.swapaxes(a.data, -1, -2) @ g,
        )

    return _node(a.data @ b.data, (a, b), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a, key):
    """Basic (non-repeating) indexing/slicing; backward scatters into zeros."""
    a = as_tensor(a)
    out_data = a.data[key]

    def bwd(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _node(np.ascontiguousarray(out_data), (a,), bwd)


def gather_rows(a, idx):
    """Select rows along axis 0 (indices may repeat); backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs 1-D indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"row index out of range for {a.shape[0]} rows")

    def bwd(g):
        full = np.zeros(a.shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of an empty list")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(ts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(slicer)])
        return tuple(pieces)

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bwd)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out_data, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) / float(n)


# -- composite ops used across the model --------------------------------------


def softmax_rows(x):
    """Row-stochastic softmax over the last axis, max-shifted for stability."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    shift = Tensor(np.max(x.data, axis=-1, keepdims=True))  # detached, grad-neutral
    z = texp(x - shift)
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax(x):
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("log_softmax input contains NaN")
    shift = Tensor(np.max(x.data, axis=-1, keepdims=True))
    xm = x - shift
    return xm - tlog(texp(xm).sum(axis=-1, keepdims=True))


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last dim {d}"
        )
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(xc * xc, axis=-1, keepdims=True)
    return (xc / tsqrt(var + eps)) * gain + bias


def rope(x, positions, base: float = 10000.0):
    """Rotary rotation of feature pairs (2i, 2i+1) by angle pos * base^(-2i/d)."""
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rotary embedding needs an even feature dim, got {d}")
    positions = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = np.outer(positions, inv_freq)  # (n, d/2)
    cos = Tensor(np.cos(angles))
    sin = Tensor(np.sin(angles))
    even = x[..., 0::2]
    odd = x[..., 1::2]
    r_even = even * cos - odd * sin
    r_odd = even * sin + odd * cos
    half_shape = r_even.shape
    stacked = concat(
        [reshape(r_even, half_shape + (1,)), reshape(r_odd, half_shape + (1,))], axis=-1
    )
    return reshape(stacked, x.shape)


def cross_entropy(logits, targets, position_mask=None):
    """Mean negative log-likelihood over the selected positions.

    logits: (n, vocab); targets: (n,) int ids; position_mask: optional (n,)
    booleans choosing which positions contribute.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, vocab) logits, got {logits.shape}")
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} positions")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ContractError(f"target id out of vocab range {vocab}")
    if position_mask is None:
        position_mask = np.ones(n, dtype=bool)
    else:
        position_mask = np.asarray(position_mask, dtype=bool)
    count = int(position_mask.sum())
    if count == 0:
        raise ContractError("cross_entropy with no active positions")
    onehot = np.zeros((n, vocab), dtype=np.float64)
    rows = np.nonzero(position_mask)[0]
    onehot[rows, targets[rows]] = 1.0
    picked = log_softmax(logits) * Tensor(onehot)
    return -picked.sum() / float(count)


# -- finite-difference oracle --------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    coords_checked: int
    per_param: dict = field(default_factory=dict)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} over {self.coords_checked} coords"


def grad_check(
    f: Callable[[], Tensor],
    params,
    h: float = 1e-5,
    tol: float = 1e-6,
    zero_floor: float = 1e-4,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``f()`` against central
    finite differences.

    Every parameter tensor is checked; for large tensors a seeded sample of
    ``max_coords_per_param`` coordinates is perturbed (a full sweep over
    millions of coordinates is not feasible). Coordinates where both gradients
    are below ``zero_floor`` count as matching, which keeps finite-difference
    round-off noise out of the relative error.
    """
    if isinstance(params, dict):
        named = [(k, v) for k, v in params.items() if v.requires_grad]
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params) if p.requires_grad]
    if not named:
        raise ContractError("grad_check needs at least one parameter requiring gradients")

    for _, p in named:
        p.grad = None
    out = f()
    if not isinstance(out, Tensor) or out.ndim != 0:
        raise ContractError("grad_check target must evaluate to a scalar Tensor")
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for name, p in named
    }

    rng = rng or np.random.default_rng(0)
    max_err = 0.0
    checked = 0
    per_param: dict[str, float] = {}
    for name, p in named:
        flat = p.data.reshape(-1)
        size = flat.size
        if max_coords_per_param is None or size <= max_coords_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                f_plus = f().item()
            flat[c] = orig - h
            with no_grad():
                f_minus = f().item()
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            scale = max(abs(a_flat[c]), abs(fd))
            err = 0.0 if scale < zero_floor else abs(a_flat[c] - fd) / scale
            worst = max(worst, err)
            checked += 1
        per_param[name] = worst
        max_err = max(max_err, worst)
    return GradCheckReport(
        max_rel_err=max_err, passed=max_err < tol, coords_checked=checked, per_param=per_param
    )


def zero_grads(params):
    tensors = params.values() if isinstance(params, dict) else params
    for p in tensors:
        p.grad = None
