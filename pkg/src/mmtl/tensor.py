"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

A tape of operations is rebuilt on every forward pass. Each Tensor created
by an operation keeps references to its operands together with vector-
Jacobian-product closures; `grad_map` (or the module-level `backward`)
walks the tape in reverse topological order and accumulates gradients by
summation.

Every vjp is itself written in terms of Tensor operations (or an adjoint
primitive, e.g. gather/scatter), so gradients of gradients are available
by running a backward pass with ``create_graph=True``. This is what makes
the exact, differentiate-through-the-inner-loop mode of the meta trainer
possible.

Double precision is the default; single precision can be switched on for
training runs via `set_default_dtype` (gradient checks need float64).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A forward value came out NaN or infinite."""


class GraphError(RuntimeError):
    """Misuse of the recorded computation graph."""


_DEFAULT_DTYPE = np.float64
_NODE_IDS = itertools.count()
_GRAD_ENABLED = [True]
_ACTIVE_GRAPHS: list["Graph"] = []


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors ('float32'/'float64')."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable tape recording; operations produce detached tensors."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


@contextmanager
def enable_grad():
    _GRAD_ENABLED.append(True)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    """A dense n-dimensional array participating in a differentiation tape.

    `data` is a numpy array (default float64). `grad` is populated only by
    the convenience method :meth:`backward`; the engine uses the functional
    `grad_map` instead so gradients never leak between passes.
    """

    __slots__ = ("data", "grad", "node_id", "op", "_backrefs", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 _backrefs: tuple = ()):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: Tensor | None = None
        self.node_id = next(_NODE_IDS)
        self.op = op
        self._backrefs = _backrefs
        self.requires_grad = requires_grad
        for g in _ACTIVE_GRAPHS:
            g.nodes.append(self)

    # -- conveniences -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, op="copy")

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, id={self.node_id})"

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    # -- autodiff ------------------------------------------------------

    def backward(self, create_graph: bool = False) -> dict:
        """Convenience: run a backward pass and store grads on tensors."""
        grads = grad_map(self, create_graph=create_graph)
        for node in _reverse_topo(self):
            g = grads.get(node.node_id)
            if g is not None:
                node.grad = g
        return grads


def _fail_scalar(t: Tensor):
    raise ShapeError(f"item() on non-scalar tensor of shape {t.shape}")


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE), op="const")


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          vjps: Sequence[Callable | None]) -> Tensor:
    """Construct an op-output tensor, recording backrefs when tracking."""
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if track:
        refs = tuple(
            (p, vjp if p.requires_grad else None) for p, vjp in zip(parents, vjps)
        )
        return Tensor(data, requires_grad=True, op=op, _backrefs=refs)
    return Tensor(data, requires_grad=False, op=op)


def _sum_to_shape(t: Tensor, shape: tuple) -> Tensor:
    """Reduce broadcast axes of `t` so the result has `shape`."""
    if t.shape == shape:
        return t
    extra = t.ndim - len(shape)
    if extra > 0:
        t = tsum(t, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and t.shape[i] != 1)
    if axes:
        t = tsum(t, axis=axes, keepdims=True)
    if t.shape != shape:
        t = reshape(t, shape)
    return t


# ----------------------------------------------------------------------
# elementwise primitives
# ----------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_op("add", a, b, np.add)
    return _make(data, "add", (a, b),
                 (lambda g: _sum_to_shape(g, a.shape),
                  lambda g: _sum_to_shape(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_op("sub", a, b, np.subtract)
    return _make(data, "sub", (a, b),
                 (lambda g: _sum_to_shape(g, a.shape),
                  lambda g: _sum_to_shape(neg(g), b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_op("mul", a, b, np.multiply)
    return _make(data, "mul", (a, b),
                 (lambda g: _sum_to_shape(mul(g, b), a.shape),
                  lambda g: _sum_to_shape(mul(g, a), b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_op("div", a, b, np.divide)
    return _make(data, "div", (a, b),
                 (lambda g: _sum_to_shape(div(g, b), a.shape),
                  lambda g: _sum_to_shape(neg(div(mul(g, a), mul(b, b))), b.shape)))


def _broadcast_op(opname: str, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"{opname}: operand shapes {a.shape} and {b.shape} do not broadcast"
        ) from exc


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), (lambda g: neg(g),))


def power(a: Tensor, p) -> Tensor:
    p = float(p)
    data = a.data ** p
    return _make(data, "pow", (a,),
                 (lambda g: mul(g, mul(_lift(p), power(a, p - 1.0))),))


def texp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), "exp", (a,), (None,))
    if out._backrefs:
        out._backrefs = ((a, lambda g: mul(g, out)),)
    return out


def tlog(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make(data, "log", (a,), (lambda g: div(g, a),))


def tsqrt(a: Tensor) -> Tensor:
    out = _make(np.sqrt(a.data), "sqrt", (a,), (None,))
    if out._backrefs:
        out._backrefs = ((a, lambda g: div(mul(g, _lift(0.5)), out)),)
    return out


def tanh(a: Tensor) -> Tensor:
    out = _make(np.tanh(a.data), "tanh", (a,), (None,))
    if out._backrefs:
        out._backrefs = ((a, lambda g: mul(g, sub(_lift(1.0), mul(out, out)))),)
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _make(data, "sigmoid", (a,), (None,))
    if out._backrefs:
        out._backrefs = ((a, lambda g: mul(g, mul(out, sub(_lift(1.0), out)))),)
    return out


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(0.0, a.data)
    return _make(data, "softplus", (a,), (lambda g: mul(g, sigmoid(a)),))


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.data.dtype)
    return _make(a.data * mask, "relu", (a,),
                 (lambda g: mul(g, Tensor(mask, op="const")),))


# ----------------------------------------------------------------------
# linear algebra / reshaping
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    with np.errstate(invalid="ignore", over="ignore"):
        data = a.data @ b.data
    return _make(data, "matmul", (a, b),
                 (lambda g: matmul(g, transpose(b, None)),
                  lambda g: matmul(transpose(a, None), g)))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _make(a.data.reshape(shape), "reshape", (a,),
                 (lambda g: reshape(g, a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,),
                 (lambda g: transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            return getitem(g, tuple(sl))

        return vjp

    track = grad_enabled() and any(t.requires_grad for t in tensors)
    if not track:
        return Tensor(data, op="concat")
    refs = tuple(
        (t, make_vjp(i) if t.requires_grad else None) for i, t in enumerate(tensors)
    )
    return Tensor(data, requires_grad=True, op="concat", _backrefs=refs)


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]
    return _make(np.ascontiguousarray(data), "getitem", (a,),
                 (lambda g: _unslice(g, idx, a.shape),))


def _unslice(g: Tensor, idx, full_shape: tuple) -> Tensor:
    """Adjoint of basic slicing: place `g` into zeros of `full_shape`."""
    buf = np.zeros(full_shape, dtype=g.data.dtype)
    buf[idx] = g.data
    return _make(buf, "unslice", (g,), (lambda gg: getitem(gg, idx),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = np.broadcast_to(a.data, shape).copy()
    return _make(data, "broadcast_to", (a,),
                 (lambda g: _sum_to_shape(g, a.shape),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        data = a.data.sum()
        return _make(np.asarray(data), "sum", (a,),
                     (lambda g: broadcast_to(reshape(g, (1,) * a.ndim), a.shape),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kd_shape = tuple(1 if i in _norm_axes(axes, a.ndim) else s
                     for i, s in enumerate(a.shape))

    def vjp(g):
        return broadcast_to(reshape(g, kd_shape), a.shape)

    return _make(data, "sum", (a,), (vjp,))


def _norm_axes(axes, ndim):
    return {ax % ndim for ax in axes}


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in _norm_axes(axes, a.ndim)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), _lift(1.0 / n))


def pad2d(a: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the last two axes symmetrically."""
    if pad_h == 0 and pad_w == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad_h, pad_h), (pad_w, pad_w)]
    data = np.pad(a.data, widths)
    crop = tuple([slice(None)] * (a.ndim - 2)
                 + [slice(pad_h, pad_h + a.shape[-2]),
                    slice(pad_w, pad_w + a.shape[-1])])
    return _make(data, "pad2d", (a,), (lambda g: getitem(g, crop),))


# ----------------------------------------------------------------------
# gather / scatter (mutually adjoint; the backbone of conv and pooling)
# ----------------------------------------------------------------------

def gather_flat(a: Tensor, idx: np.ndarray, out_shape: tuple | None = None) -> Tensor:
    """out[k] = a.flat[idx[k]]; idx is a constant integer array."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data.reshape(-1)[idx]
    if out_shape is not None:
        data = data.reshape(out_shape)
    in_shape = a.shape
    return _make(data, "gather_flat", (a,),
                 (lambda g: scatter_flat(g, idx, in_shape),))


def scatter_flat(g: Tensor, idx: np.ndarray, out_shape: tuple) -> Tensor:
    """Adjoint of gather_flat: sum-scatter g into zeros of out_shape."""
    idx = np.asarray(idx, dtype=np.int64)
    size = int(np.prod(out_shape))
    buf = np.bincount(idx.reshape(-1), weights=g.data.reshape(-1).astype(np.float64),
                      minlength=size)
    data = buf.astype(g.data.dtype).reshape(out_shape)
    g_shape = g.shape
    return _make(data, "scatter_flat", (g,),
                 (lambda gg: gather_flat(gg, idx, g_shape),))


# ----------------------------------------------------------------------
# backward machinery
# ----------------------------------------------------------------------

def _reverse_topo(root: Tensor) -> list[Tensor]:
    """Nodes in topological order (operands first); iterative DFS."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent, vjp in node._backrefs:
            if vjp is not None and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def grad_map(output: Tensor, create_graph: bool = False) -> dict[int, Tensor]:
    """Reverse-mode gradients of a scalar output.

    Returns a map node_id -> gradient Tensor. Nodes that do not influence
    the output are simply absent (query with ``.get`` and default to
    zeros). With ``create_graph=True`` the returned gradients carry their
    own tape and can be differentiated again.
    """
    if output.size != 1:
        raise ShapeError(
            f"backward: output must be scalar, got shape {output.shape}")
    topo = _reverse_topo(output)
    grads: dict[int, Tensor] = {}
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        grads[output.node_id] = Tensor(
            np.ones_like(output.data), op="seed",
            requires_grad=create_graph and output.requires_grad)
        for node in reversed(topo):
            g = grads.get(node.node_id)
            if g is None:
                continue
            for parent, vjp in node._backrefs:
                if vjp is None:
                    continue
                contrib = vjp(g)
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = contrib if prev is None else add(prev, contrib)
    return grads


def grad_or_zero(grads: dict[int, Tensor], t: Tensor) -> Tensor:
    """Gradient for `t` from a grad_map result; zeros if detached/unused."""
    g = grads.get(t.node_id)
    if g is None:
        return Tensor(np.zeros_like(t.data), op="zeros")
    return g


# ----------------------------------------------------------------------
# explicit graph API
# ----------------------------------------------------------------------

class Graph:
    """One recorded forward computation.

    A graph is expressed as a builder callable over input tensors; every
    tensor created while `forward_eval` runs the builder is recorded in
    creation order, which is a valid topological order (operands are
    always created before their consumers).
    """

    def __init__(self, build: Callable[..., "Tensor | Iterable[Tensor]"]):
        self.build = build
        self.nodes: list[Tensor] = []
        self.inputs: list[Tensor] = []
        self.outputs: list[Tensor] = []

    def node_ids(self) -> list[int]:
        return [n.node_id for n in self.nodes]


def forward_eval(graph: Graph, inputs: Sequence[Tensor]) -> list[Tensor]:
    """Run a graph on inputs, retaining intermediates for backward.

    Raises NonFiniteError if any output contains NaN/Inf, and ShapeError
    (from the offending operation) on operand mismatches.
    """
    inputs = [t if isinstance(t, Tensor) else _lift(t) for t in inputs]
    graph.nodes = list(inputs)
    graph.inputs = list(inputs)
    _ACTIVE_GRAPHS.append(graph)
    try:
        out = graph.build(*inputs)
    finally:
        _ACTIVE_GRAPHS.pop()
    outputs = list(out) if isinstance(out, (tuple, list)) else [out]
    for t in outputs:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(
                f"forward_eval: non-finite values in output of op {t.op!r}")
    graph.outputs = outputs
    return outputs


def backward(graph: Graph, output: Tensor) -> dict[int, Tensor]:
    """Gradients of a scalar graph output for every recorded node.

    Nodes the output does not depend on (including detached ones) map to
    zero tensors rather than raising.
    """
    if output.size != 1:
        raise ShapeError(
            f"backward: output must be scalar, got shape {output.shape}")
    grads = grad_map(output)
    result: dict[int, Tensor] = {}
    for node in graph.nodes:
        result[node.node_id] = grad_or_zero(grads, node)
    result[output.node_id] = grad_or_zero(grads, output)
    return result


# ----------------------------------------------------------------------
# gradient oracle and parameter updates
# ----------------------------------------------------------------------

def finite_difference_gradient(f: Callable[[Tensor], Tensor], x: Tensor,
                               eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, element by element."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(base.copy()))
        flat[i] = orig - eps
        lo = f(Tensor(base.copy()))
        flat[i] = orig
        if hi.size != 1 or lo.size != 1:
            raise ShapeError(
                "finite_difference_gradient: function output must be scalar, "
                f"got shape {hi.shape}")
        gflat[i] = (float(hi.data) - float(lo.data)) / (2.0 * eps)
    return Tensor(grad)


def sgd_step(param: Tensor, grad: Tensor, lr: float) -> Tensor:
    """One gradient-descent step: param - lr * grad.

    Built from tape operations, so the update stays differentiable when
    the gradient carries a graph (used by the exact inner-loop mode).
    """
    if param.shape != grad.shape:
        raise ShapeError(
            f"sgd_step: param shape {param.shape} != grad shape {grad.shape}")
    if lr < 0:
        raise ValueError(f"sgd_step: negative learning rate {lr}")
    return sub(param, mul(grad, _lift(lr)))


class AdamSlot:
    """First/second-moment state for one parameter tensor."""

    __slots__ = ("m", "v", "t")

    def __init__(self, shape, dtype):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0


class Optimizer:
    """Plain SGD or Adam over named parameter tensors.

    Updates are applied in sorted-name order so runs are reproducible
    regardless of dict insertion history. A zero learning rate is an
    exact fixed point (parameters are returned untouched).
    """

    def __init__(self, rule: str = "sgd", lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if rule not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer rule {rule!r}")
        if lr < 0:
            raise ValueError(f"negative learning rate {lr}")
        self.rule = rule
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.slots: dict[str, AdamSlot] = {}

    def step(self, params: dict[str, Tensor],
             grads: dict[str, np.ndarray | Tensor]) -> dict[str, Tensor]:
        """Return updated parameter tensors; missing grads leave params as-is."""
        out = dict(params)
        if self.lr == 0.0:
            return out
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                continue
            gd = g.data if isinstance(g, Tensor) else np.asarray(g)
            p = params[name]
            if gd.shape != p.shape:
                raise ShapeError(
                    f"optimizer: grad shape {gd.shape} != param shape {p.shape} "
                    f"for {name!r}")
            if self.rule == "sgd":
                new = p.data - self.lr * gd
            else:
                slot = self.slots.get(name)
                if slot is None:
                    slot = self.slots[name] = AdamSlot(p.shape, p.data.dtype)
                slot.t += 1
                slot.m = self.beta1 * slot.m + (1 - self.beta1) * gd
                slot.v = self.beta2 * slot.v + (1 - self.beta2) * gd * gd
                mhat = slot.m / (1 - self.beta1 ** slot.t)
                vhat = slot.v / (1 - self.beta2 ** slot.t)
                new = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            out[name] = Tensor(new, requires_grad=True, op="param")
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Flat view of moment state for checkpointing."""
        flat: dict[str, np.ndarray] = {}
        for name, slot in self.slots.items():
            flat[f"{name}.m"] = slot.m
            flat[f"{name}.v"] = slot.v
            flat[f"{name}.t"] = np.asarray(float(slot.t))
        return flat

    def load_state_tensors(self, flat: dict[str, np.ndarray]) -> None:
        names = {k[:-2] for k in flat if k.endswith(".m")}
        self.slots = {}
        for name in names:
            slot = AdamSlot(flat[f"{name}.m"].shape, flat[f"{name}.m"].dtype)
            slot.m = np.array(flat[f"{name}.m"])
            slot.v = np.array(flat[f"{name}.v"])
            slot.t = int(round(float(flat[f"{name}.t"])))
            self.slots[name] = slot


def assert_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {what}")
    return t
