"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the registration network and its losses need are
provided.  Broadcasting in the binary elementwise ops follows numpy's
trailing-dimension rules; gradients are summed back to the operand shape.

Every tensor created while a precision mode is active uses that mode's
dtype (float64 by default, float32 for training runs).
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float64
_BRANCHES: list | None = None  # active-branch log for piecewise ops, see record_branches


@contextlib.contextmanager
def record_branches():
    """Collect the branch taken by every piecewise op (relu sign, max argmax)."""
    global _BRANCHES
    prev, _BRANCHES = _BRANCHES, []
    try:
        yield _BRANCHES
    finally:
        _BRANCHES = prev


def note_branch(pattern: np.ndarray) -> None:
    if _BRANCHES is not None:
        _BRANCHES.append(pattern)


class ShapeError(ValueError):
    pass


def get_dtype():
    return _DTYPE


def set_precision(bits: int) -> None:
    global _DTYPE
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _DTYPE = np.float64 if bits == 64 else np.float32


@contextlib.contextmanager
def precision(bits: int):
    old = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_DTYPE"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op: str = ""):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self._parents = tuple(_parents)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self._parents)
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{op})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor(data, _parents=parents, _op=op)
    if out.requires_grad:
        out._backward = backward_fn
    else:
        out._parents = ()
    return out


def custom_op(data, parents: Sequence[Tensor], backward_fn, name: str) -> Tensor:
    """Register an operator defined outside this module.

    ``backward_fn(g)`` must return one gradient per parent.
    """
    return _node(data, tuple(parents), backward_fn, name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _node(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _node(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), bw, "div")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _node(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), "silu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    note_branch(mask)
    # NaN must survive so divergence is visible downstream
    out = np.where(x.data <= 0, 0.0, x.data).astype(x.data.dtype)
    return _node(out, (x,), lambda g: (g * mask,), "relu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data).astype(x.data.dtype)
    return _node(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "silu": silu, "relu": relu, "softplus": softplus}


def elementwise(op: str, *inputs, factor: float | None = None) -> Tensor:
    """Dispatch by name; ``scale`` takes its constant through ``factor``."""
    if op == "scale":
        return scale(inputs[0], factor)
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m,k]x[k,n], got {a.shape} and {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def pointwise_linear(w, x) -> Tensor:
    """``w @ x`` with every column accumulated in the same fixed order.

    BLAS may round a column differently depending on where it sits in the
    matrix; this keeps per-position maps exactly equivariant to column
    permutations.
    """
    w, x = as_tensor(w), as_tensor(x)
    if w.ndim != 2 or x.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"pointwise_linear needs [m,k]x[k,n], got {w.shape} and {x.shape}")
    out = np.zeros((w.shape[0], x.shape[1]), dtype=np.result_type(w.data, x.data))
    for j in range(w.shape[1]):
        out += w.data[:, j : j + 1] * x.data[j : j + 1, :]
    return _node(out, (w, x), lambda g: (g @ x.data.T, w.data.T @ g), "pointwise_linear")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.shape}")
    return _node(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


# ---------------------------------------------------------------- convolution


def same_padding(n: int, k: int, s: int) -> tuple[int, int]:
    """Padding (lo, hi) giving ceil(n / s) outputs with exact division."""
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def _norm_pad(pad, nd):
    if isinstance(pad, int):
        return [(pad, pad)] * nd
    pad = list(pad)
    if len(pad) != nd:
        raise ShapeError(f"need {nd} padding entries, got {pad}")
    return [(p, p) if isinstance(p, int) else (int(p[0]), int(p[1])) for p in pad]


def _norm_stride(stride, nd):
    if isinstance(stride, int):
        return [stride] * nd
    stride = [int(s) for s in stride]
    if len(stride) != nd:
        raise ShapeError(f"need {nd} stride entries, got {stride}")
    return stride


def _conv(x: Tensor, w: Tensor, b: Tensor | None, stride, pad, nd: int, name: str) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != nd + 1 or w.ndim != nd + 2:
        raise ShapeError(f"{name}: input {x.shape} / kernel {w.shape} have wrong rank")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"{name}: kernel expects {w.shape[1]} input channels, got {x.shape[0]}")
    pads = _norm_pad(pad, nd)
    strides = _norm_stride(stride, nd)
    ksz = w.shape[2:]
    out_sz = []
    for n, k, s, (lo, hi) in zip(x.shape[1:], ksz, strides, pads):
        span = n + lo + hi - k
        if span < 0 or span % s:
            raise ShapeError(f"{name}: size {n} with kernel {k}, stride {s}, pad {(lo, hi)} is not integral")
        out_sz.append(span // s + 1)

    xp = np.pad(x.data, [(0, 0)] + pads)
    sp_axes = tuple(range(1, nd + 1))
    win = sliding_window_view(xp, ksz, axis=sp_axes)
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in strides)]
    kaxes = list(range(nd + 1, 2 * nd + 1))
    out = np.tensordot(w.data, win, axes=([1] + list(range(2, nd + 2)), [0] + kaxes))
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"{name}: bias shape {b.shape} does not match {w.shape[0]} outputs")
        out = out + b.data.reshape((-1,) + (1,) * nd)
        parents.append(b)

    def bw(g):
        gw = np.tensordot(g, win, axes=(list(sp_axes), list(sp_axes)))
        gxp = np.zeros_like(xp)
        for k in itertools.product(*(range(n) for n in ksz)):
            sl = tuple(slice(ki, ki + s * (o - 1) + 1, s) for ki, s, o in zip(k, strides, out_sz))
            gxp[(slice(None),) + sl] += np.tensordot(w.data[(slice(None), slice(None)) + k], g, axes=([0], [0]))
        gx = gxp[(slice(None),) + tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape[1:]))]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=sp_axes))
        return tuple(grads)

    return _node(out, parents, bw, name)


def conv2d(x, w, b=None, stride=1, pad=0) -> Tensor:
    """Cross-correlation of ``x`` [C_in,H,W] with ``w`` [C_out,C_in,kh,kw].

    ``pad`` is an int or per-axis ``(lo, hi)`` pairs.  The output size
    ``(H + lo + hi - kh) / s + 1`` must be integral.
    """
    return _conv(x, w, b, stride, pad, 2, "conv2d")


def conv3d(x, w, b=None, stride=1, pad=0) -> Tensor:
    return _conv(x, w, b, stride, pad, 3, "conv3d")


# ---------------------------------------------------------------- reductions & shape


def reduce(op: str, x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _check_axis(x, axis)
    if op == "sum":
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

    elif op == "mean":
        n = x.size if axis is None else x.shape[axis]
        out = x.data.mean(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, x.shape).copy(),)

    elif op == "max":
        if axis is None:
            flat = int(np.argmax(x.data))
            note_branch(np.array(flat))
            out = x.data.reshape(-1)[flat]
            if keepdims:
                out = out.reshape((1,) * x.ndim)

            def bw(g):
                gx = np.zeros(x.size, dtype=x.data.dtype)
                gx[flat] = np.asarray(g).reshape(-1)[0]
                return (gx.reshape(x.shape),)

        else:
            # np.argmax returns the first index on ties
            arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
            note_branch(arg)
            out = np.take_along_axis(x.data, arg, axis=axis)
            if not keepdims:
                out = np.squeeze(out, axis)

            def bw(g):
                if not keepdims:
                    g = np.expand_dims(g, axis)
                gx = np.zeros_like(x.data)
                np.put_along_axis(gx, arg, g, axis=axis)
                return (gx,)

    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _node(out, (x,), bw, f"reduce_{op}")


def sum_(x, axis=None, keepdims=False):
    return reduce("sum", x, axis, keepdims)


def mean(x, axis=None, keepdims=False):
    return reduce("mean", x, axis, keepdims)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of nothing")
    nd = xs[0].ndim
    ax = _check_axis(xs[0], axis)
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat shape mismatch: {xs[0].shape} vs {t.shape} on axis {ax}")
    sizes = [t.shape[ax] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in xs], axis=ax), xs, lambda g: tuple(np.split(g, cuts, axis=ax)), "concat"
    )


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _node(np.array(out), (x,), bw, "getitem")


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor in ``loss``'s graph.

    Gradients accumulate into existing ``.grad`` arrays, so parameters shared
    between several graphs sum their contributions.  Running backward twice
    on the same graph raises until :func:`reset` is called.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; call reset() first")
    loss._consumed = True
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    local = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=p.data.dtype)
            if id(p) in local:
                local[id(p)] = local[id(p)] + gp
            else:
                local[id(p)] = gp


def reset(loss: Tensor) -> None:
    """Clear gradients throughout the graph and allow another backward."""
    for node in _topo_order(loss):
        node.grad = None
    loss._consumed = False


# ---------------------------------------------------------------- gradient check


@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    per_input: list[float] = field(default_factory=list)
    checked: int = 0
    refined: int = 0  # probes whose stencil straddled a branch boundary and were retaken with a smaller step
    undecided: int = 0  # probes still straddling a boundary at the smallest step; excluded


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
    refine: int = 3,
) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    The relative error per element is ``|a - n| / max(1, |a|, |n|)``.  With
    ``max_elements`` only a seeded random subset of each input is probed.

    A central difference is only meaningful where ``f`` is smooth over the
    stencil.  Each probe compares the branch pattern of the piecewise ops
    (relu, max) at ``x +- h`` with the pattern at ``x``; on a mismatch the
    probe is retaken with ``h / 10``, at most ``refine`` times.  Probes that
    still straddle a boundary are counted in ``undecided`` and skipped.
    Failures are reported, never raised.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("gradcheck needs 64-bit tensors")
        t.grad = None
    with record_branches() as base:
        out = f(*inputs)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def probe(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        with record_branches() as bp:
            fp = f(*inputs).item()
        flat[i] = orig - step
        with record_branches() as bm:
            fm = f(*inputs).item()
        flat[i] = orig
        smooth = _same_branches(bp, base) and _same_branches(bm, base)
        return (fp - fm) / (2 * step), smooth

    rng = np.random.default_rng(seed)
    per_input, checked, refined, undecided = [], 0, 0, 0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        worst = 0.0
        for i in idx:
            step = h
            num, smooth = probe(flat, i, step)
            tries = 0
            while not smooth and tries < refine:
                step /= 10.0
                tries += 1
                num, smooth = probe(flat, i, step)
            refined += tries > 0
            if not smooth:
                undecided += 1
                continue
            ai = a.reshape(-1)[i]
            worst = max(worst, abs(ai - num) / max(1.0, abs(ai), abs(num)))
            checked += 1
        per_input.append(worst)
    for t in inputs:
        t.grad = None
    worst = max(per_input, default=0.0)
    return GradcheckReport(worst, bool(worst < tol), per_input, checked, refined, undecided)
