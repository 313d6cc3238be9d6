"""Dense float64 tensors with taped reverse-mode automatic differentiation.

Every primitive op records itself on the innermost active Tape. Backward
closures are written purely in terms of these primitives, so gradient
computations are themselves differentiable and Hessian-vector products can
be taken by running a second backward pass over the extended tape.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ContractError(ValueError):
    """An op precondition was violated (e.g. non-scalar backward root)."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf; computation must not continue."""


# Toggle for the per-op finiteness check. Cheap at desk scale and it turns
# silent NaN propagation into an immediate, attributable error.
CHECK_FINITE = True

_TAPE_STACK: list["Tape"] = []
_GLOBAL_BACKWARD_CALLS = 0


def backward_call_count():
    """Total backward passes run in this process (instrumentation hook)."""
    return _GLOBAL_BACKWARD_CALLS


class Tape:
    """Wengert list: ops in execution order, each with input/output refs."""

    def __init__(self):
        self.nodes = []  # (out, inputs, backward_fn)
        self.backward_calls = 0

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """N-dimensional float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small operator sugar; the layer code uses the function API below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_or_raise(arr, op_name):
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op_name}")


def _make(data, inputs, backward_fn, op_name):
    _finite_or_raise(data, op_name)
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append((out, inputs, backward_fn))
    return out


def _sum_to(g, shape):
    """Reduce a broadcast cotangent back to `shape` (differentiable)."""
    while g.ndim > len(shape):
        g = sum_(g, axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = sum_(g, axis=ax, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    data = a.data + b.data
    return _make(data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)), "add")


def sub(a, b):
    data = a.data - b.data
    return _make(data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)), "sub")


def neg(a):
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b):
    data = a.data * b.data
    return _make(data, (a, b),
                 lambda g: (_sum_to(mul(g, b), a.shape),
                            _sum_to(mul(g, a), b.shape)), "mul")


def mul_scalar(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (mul_scalar(g, c),), "mul_scalar")


def add_scalar(a, c):
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")


def pow_const(a, p):
    p = float(p)
    data = a.data ** p

    def backward(g):
        return (mul(g, mul_scalar(pow_const(a, p - 1.0), p)),)

    return _make(data, (a,), backward, "pow_const")


def exp(a):
    out_holder = []

    def backward(g):
        return (mul(g, out_holder[0]),)

    out = _make(np.exp(a.data), (a,), backward, "exp")
    out_holder.append(out)
    return out


def log(a):
    def backward(g):
        return (mul(g, pow_const(a, -1.0)),)

    return _make(np.log(a.data), (a,), backward, "log")


def sum_(a, axis=None, keepdims=False):
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)
    data = np.sum(a.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            kshape = list(a.shape)
            for ax in axes:
                kshape[ax] = 1
            g = reshape(g, tuple(kshape))
        return (broadcast_to(g, a.shape),)

    return _make(data, (a,), backward, "sum")


def broadcast_to(a, shape):
    data = np.broadcast_to(a.data, shape).copy()
    return _make(data, (a,), lambda g: (_sum_to(g, a.shape),), "broadcast_to")


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,),
                 lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (transpose(g, inv),), "transpose")


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    return _make(data, (a, b),
                 lambda g: (matmul(g, transpose(b, (1, 0))),
                            matmul(transpose(a, (1, 0)), g)), "matmul")


def relu(a):
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(np.maximum(a.data, 0.0), (a,),
                 lambda g: (mul(g, mask),), "relu")


def pad2d(a, pad):
    """Zero-pad the last two axes by `pad` on each side."""
    if pad == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    data = np.pad(a.data, width)
    return _make(data, (a,), lambda g: (crop2d(g, pad),), "pad2d")


def crop2d(a, pad):
    """Drop `pad` rows/cols from each side of the last two axes."""
    if pad == 0:
        return a
    data = a.data[..., pad:-pad, pad:-pad].copy()
    return _make(data, (a,), lambda g: (pad2d(g, pad),), "crop2d")


def gather(a, idx):
    """Index the flattened tensor with an integer array of any shape."""
    size, shape = a.size, a.shape
    data = a.data.reshape(-1)[idx]

    def backward(g):
        return (scatter_add(g, idx, size, shape),)

    return _make(data, (a,), backward, "gather")


def scatter_add(a, idx, size, shape):
    """Adjoint of gather: scatter-add values into a flat tensor of `size`."""
    data = np.zeros(size, dtype=np.float64)
    np.add.at(data, idx.reshape(-1), a.data.reshape(-1))
    data = data.reshape(shape)

    def backward(g):
        return (gather(g, idx),)

    return _make(data, (a,), backward, "scatter_add")


# ---------------------------------------------------------------------------
# backward passes


def _cotangents(tape, root, seed=None):
    global _GLOBAL_BACKWARD_CALLS
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    _GLOBAL_BACKWARD_CALLS += 1
    cots = {id(root): Tensor(np.ones_like(root.data)) if seed is None else seed}
    snapshot = list(tape.nodes)
    produced = {id(out) for out, _, _ in snapshot}
    for out, inputs, backward_fn in reversed(snapshot):
        g = cots.get(id(out))
        if g is None:
            continue
        grads = backward_fn(g)
        for inp, gi in zip(inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            prev = cots.get(id(inp))
            cots[id(inp)] = gi if prev is None else add(prev, gi)
    tape.backward_calls += 1
    return cots, produced, snapshot


def backward(tape, root):
    """Accumulate d(root)/d(leaf) into `.grad` of every tracked leaf.

    Gradients add across calls; clear with `zero_grad` between uses when
    accumulation is not wanted.
    """
    cots, produced, snapshot = _cotangents(tape, root)
    seen = set()
    for _, inputs, _ in snapshot:
        for inp in inputs:
            if id(inp) in seen or id(inp) in produced or not inp.requires_grad:
                continue
            seen.add(id(inp))
            g = cots.get(id(inp))
            if g is None:
                continue
            if inp.grad is None:
                inp.grad = g.data.copy()
            else:
                inp.grad = inp.grad + g.data


def grad(root, wrt, tape):
    """Functional gradients of a scalar root w.r.t. a list of tensors.

    Returns one Tensor per entry of `wrt` (zeros when the root does not
    depend on it). Does not touch `.grad`; the returned tensors stay on the
    tape, so a second backward over them is valid.
    """
    cots, _, _ = _cotangents(tape, root)
    out = []
    for t in wrt:
        g = cots.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


def flatten_tensors(tensors):
    return np.concatenate([t.data.reshape(-1) for t in tensors])


def hvp(loss_fn, tensors, v, method="double-backward", fd_scale=1e-3):
    """Hessian-vector product of a scalar loss w.r.t. a tensor list.

    loss_fn rebuilds the loss from the given tensors under an active tape.
    `v` is a flat vector matching the total parameter count. The default
    path differentiates <grad, v> a second time; the finite-difference
    fallback uses (grad(theta + h v) - grad(theta - h v)) / 2h with
    h = fd_scale * |theta| / |v|.
    """
    total = sum(t.size for t in tensors)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != total:
        raise ShapeError(f"hvp vector has length {v.size}, expected {total}")
    if method == "double-backward":
        with Tape() as tape:
            loss = loss_fn()
            gs = grad(loss, tensors, tape)
            s = None
            offset = 0
            for t, g in zip(tensors, gs):
                piece = sum_(mul(g, Tensor(v[offset:offset + t.size].reshape(t.shape))))
                s = piece if s is None else add(s, piece)
                offset += t.size
            hs = grad(s, tensors, tape)
        return flatten_tensors(hs)
    if method == "fd":
        theta = flatten_tensors(tensors)
        vnorm = float(np.linalg.norm(v))
        if vnorm == 0.0:
            return np.zeros(total)
        h = fd_scale * max(float(np.linalg.norm(theta)), 1.0) / vnorm

        def grad_at(delta):
            offset = 0
            saved = []
            for t in tensors:
                saved.append(t.data.copy())
                t.data = t.data + delta[offset:offset + t.size].reshape(t.shape)
                offset += t.size
            try:
                with Tape() as tape:
                    loss = loss_fn()
                    gs = grad(loss, tensors, tape)
                    return flatten_tensors(gs)
            finally:
                for t, s in zip(tensors, saved):
                    t.data = s

        gp = grad_at(h * v)
        gm = grad_at(-h * v)
        return (gp - gm) / (2.0 * h)
    raise ValueError(f"unknown hvp method: {method}")
