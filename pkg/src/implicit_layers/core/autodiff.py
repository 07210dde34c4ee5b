"""Reverse-mode automatic differentiation over numpy arrays.

Every vector-Jacobian rule is written with the same differentiable
operations it differentiates.  Calling :func:`gradients` with
``create_graph=True`` therefore returns a :class:`Var` that can itself be
differentiated, which is how Hessian-vector and mixed second-order
products are formed.

Graphs are immutable after construction and there is no global tape, so
independent evaluations may run concurrently.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Var",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "transpose",
    "reshape",
    "getitem",
    "concatenate",
    "stack",
    "sum",
    "tanh",
    "sin",
    "cos",
    "exp",
    "inv",
    "dot",
    "sqnorm",
    "gradients",
    "vjp",
    "grad",
    "grad_vjp",
    "value_of",
]


class Var:
    """A node of the computation graph holding a float64 array."""

    __slots__ = ("value", "inputs", "rule")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var

    def __init__(self, value, inputs=(), rule=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.inputs = inputs
        self.rule = rule

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var({self.value!r})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return power(self, n)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value_of(x):
    """Strip a :class:`Var` down to its array; pass anything else through."""
    return x.value if isinstance(x, Var) else x


_val = value_of


def _shape(x):
    return np.shape(_val(x))


def _node(value, inputs, rule):
    for a in inputs:
        if isinstance(a, Var):
            return Var(value, inputs, rule)
    return value


# ---------------------------------------------------------------- broadcasting


def sum_to(x, shape):
    """Sum ``x`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    shape = tuple(shape)
    xs = _shape(x)
    if xs == shape:
        return x
    v = _val(x)
    lead = len(xs) - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and xs[lead + i] != 1
    )
    out = np.sum(v, axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    out = out.reshape(shape)
    return _node(out, (x,), _sum_to_rule)


def _sum_to_rule(g, out, ins, needs):
    return (broadcast_to(g, _shape(ins[0])),)


def broadcast_to(x, shape):
    shape = tuple(shape)
    if _shape(x) == shape:
        return x
    return _node(np.broadcast_to(_val(x), shape), (x,), _broadcast_rule)


def _broadcast_rule(g, out, ins, needs):
    return (sum_to(g, _shape(ins[0])),)


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    return _node(_val(a) + _val(b), (a, b), _add_rule)


def _add_rule(g, out, ins, needs):
    a, b = ins
    return (
        sum_to(g, _shape(a)) if needs[0] else None,
        sum_to(g, _shape(b)) if needs[1] else None,
    )


def sub(a, b):
    return _node(_val(a) - _val(b), (a, b), _sub_rule)


def _sub_rule(g, out, ins, needs):
    a, b = ins
    return (
        sum_to(g, _shape(a)) if needs[0] else None,
        neg(sum_to(g, _shape(b))) if needs[1] else None,
    )


def mul(a, b):
    return _node(_val(a) * _val(b), (a, b), _mul_rule)


def _mul_rule(g, out, ins, needs):
    a, b = ins
    return (
        sum_to(mul(g, b), _shape(a)) if needs[0] else None,
        sum_to(mul(g, a), _shape(b)) if needs[1] else None,
    )


def div(a, b):
    return _node(_val(a) / _val(b), (a, b), _div_rule)


def _div_rule(g, out, ins, needs):
    a, b = ins
    return (
        sum_to(div(g, b), _shape(a)) if needs[0] else None,
        sum_to(neg(mul(g, div(out, b))), _shape(b)) if needs[1] else None,
    )


def neg(a):
    return _node(-_val(a), (a,), _neg_rule)


def _neg_rule(g, out, ins, needs):
    return (neg(g),)


def power(a, n):
    """Elementwise integer power."""
    if int(n) != n:
        raise ValueError("only integer exponents are supported")
    n = int(n)
    return _node(_val(a) ** n if n >= 0 else 1.0 / _val(a) ** (-n), (a,), _power_rule(n))


def _power_rule(n):
    def rule(g, out, ins, needs):
        (a,) = ins
        if n == 0:
            return (mul(g, 0.0),)
        if n == 1:
            return (g,)
        return (mul(g, mul(float(n), power(a, n - 1))),)

    return rule


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    return _node(_val(a) @ _val(b), (a, b), _matmul_rule)


def _matmul_rule(g, out, ins, needs):
    a, b = ins
    na, nb = len(_shape(a)), len(_shape(b))
    ga = gb = None
    if na == 2 and nb == 2:
        if needs[0]:
            ga = matmul(g, transpose(b))
        if needs[1]:
            gb = matmul(transpose(a), g)
    elif na == 2 and nb == 1:
        if needs[0]:
            ga = outer(g, b)
        if needs[1]:
            gb = matmul(g, a)
    elif na == 1 and nb == 2:
        if needs[0]:
            ga = matmul(b, g)
        if needs[1]:
            gb = outer(a, g)
    elif na == 1 and nb == 1:
        if needs[0]:
            ga = mul(g, b)
        if needs[1]:
            gb = mul(g, a)
    else:
        raise ValueError("matmul supports 1-D and 2-D operands only")
    return (ga, gb)


def outer(u, v):
    return mul(reshape(u, (-1, 1)), reshape(v, (1, -1)))


def transpose(a):
    return _node(_val(a).T, (a,), _transpose_rule)


def _transpose_rule(g, out, ins, needs):
    return (transpose(g),)


def inv(a):
    """Inverse of a square matrix."""
    return _node(np.linalg.inv(_val(a)), (a,), _inv_rule)


def _inv_rule(g, out, ins, needs):
    ot = transpose(out)
    return (neg(matmul(matmul(ot, g), ot)),)


# ---------------------------------------------------------------- shape


def reshape(a, shape):
    return _node(np.reshape(_val(a), shape), (a,), _reshape_rule)


def _reshape_rule(g, out, ins, needs):
    return (reshape(g, _shape(ins[0])),)


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    return _node(_val(a)[idx], (a,), _getitem_rule(idx))


def _getitem_rule(idx):
    def rule(g, out, ins, needs):
        return (scatter(g, idx, _shape(ins[0])),)

    return rule


def scatter(g, idx, shape):
    """Zeros of ``shape`` with ``g`` added at ``idx`` (adjoint of indexing)."""
    z = np.zeros(shape)
    if _is_basic(idx):
        z[idx] = _val(g)
    else:
        np.add.at(z, idx, _val(g))
    return _node(z, (g,), _scatter_rule(idx))


def _scatter_rule(idx):
    def rule(g, out, ins, needs):
        return (getitem(g, idx),)

    return rule


def concatenate(xs, axis=0):
    xs = tuple(xs)
    return _node(np.concatenate([_val(x) for x in xs], axis=axis), xs, _concat_rule(axis))


def _concat_rule(axis):
    def rule(g, out, ins, needs):
        res = []
        start = 0
        ndim = len(_shape(g))
        ax = axis % ndim
        for x, need in zip(ins, needs):
            n = _shape(x)[ax]
            if need:
                sl = [slice(None)] * ndim
                sl[ax] = slice(start, start + n)
                res.append(getitem(g, tuple(sl)))
            else:
                res.append(None)
            start += n
        return tuple(res)

    return rule


def stack(xs, axis=0):
    xs = tuple(xs)
    expanded = []
    for x in xs:
        s = list(_shape(x))
        s.insert(axis if axis >= 0 else len(s) + 1 + axis, 1)
        expanded.append(reshape(x, tuple(s)))
    return concatenate(expanded, axis=axis)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return _node(np.sum(_val(a), axis=axis, keepdims=keepdims), (a,), _sum_rule(axis, keepdims))


def _sum_rule(axis, keepdims):
    def rule(g, out, ins, needs):
        shape = _shape(ins[0])
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            kshape = list(shape)
            for ax in axes:
                kshape[ax % len(shape)] = 1
            g = reshape(g, tuple(kshape))
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return rule


def dot(a, b):
    """Inner product of two equally shaped arrays."""
    return sum(mul(a, b))


def sqnorm(a):
    return sum(mul(a, a))


# ---------------------------------------------------------------- elementwise


def tanh(a):
    return _node(np.tanh(_val(a)), (a,), _tanh_rule)


def _tanh_rule(g, out, ins, needs):
    return (mul(g, sub(1.0, mul(out, out))),)


def sin(a):
    return _node(np.sin(_val(a)), (a,), _sin_rule)


def _sin_rule(g, out, ins, needs):
    return (mul(g, cos(ins[0])),)


def cos(a):
    return _node(np.cos(_val(a)), (a,), _cos_rule)


def _cos_rule(g, out, ins, needs):
    return (neg(mul(g, sin(ins[0]))),)


def exp(a):
    return _node(np.exp(_val(a)), (a,), _exp_rule)


def _exp_rule(g, out, ins, needs):
    return (mul(g, out),)


# ---------------------------------------------------------------- reverse sweep


def _toposort(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for i in node.inputs:
            if isinstance(i, Var) and id(i) not in seen:
                stack_.append((i, False))
    return order


def gradients(output, wrt, cotangent=None, create_graph=False):
    """Vector-Jacobian product of ``output`` with respect to graph nodes.

    ``wrt`` is a single :class:`Var` or a sequence of them.  Returns arrays
    (or Vars when ``create_graph`` is set) shaped like each target; targets
    that ``output`` does not depend on get zeros.
    """
    single = isinstance(wrt, Var)
    targets = [wrt] if single else list(wrt)
    out_val = _val(output)
    if cotangent is None:
        if np.size(out_val) != 1:
            raise ValueError("cotangent required for non-scalar output")
        cotangent = np.ones_like(out_val)
    elif np.shape(_val(cotangent)) != np.shape(out_val):
        raise ValueError(
            f"cotangent shape {np.shape(_val(cotangent))} != output shape {np.shape(out_val)}"
        )
    if not create_graph:
        cotangent = np.asarray(_val(cotangent), dtype=np.float64)

    grads = {}
    if isinstance(output, Var):
        target_ids = {id(t) for t in targets}
        order = _toposort(output)
        relevant = set()
        for node in order:
            if id(node) in target_ids or any(
                isinstance(i, Var) and id(i) in relevant for i in node.inputs
            ):
                relevant.add(id(node))
        grads[id(output)] = cotangent
        for node in reversed(order):
            nid = id(node)
            if node.rule is None or nid not in relevant:
                continue
            g = grads.get(nid)
            if g is None:
                continue
            needs = tuple(isinstance(i, Var) and id(i) in relevant for i in node.inputs)
            if not any(needs):
                continue
            if create_graph:
                contribs = node.rule(g, node, node.inputs, needs)
            else:
                ins = tuple(_val(i) for i in node.inputs)
                contribs = node.rule(_val(g), node.value, ins, needs)
            for inp, c, need in zip(node.inputs, contribs, needs):
                if need and c is not None:
                    k = id(inp)
                    grads[k] = add(grads[k], c) if k in grads else c

    res = []
    for t in targets:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros(t.shape)
        elif not create_graph:
            g = np.asarray(_val(g), dtype=np.float64)
        res.append(g)
    return res[0] if single else res


# ---------------------------------------------------------------- functional API


def _slot_index(inputs, wrt):
    if isinstance(inputs, Mapping):
        if wrt not in inputs:
            raise KeyError(f"unknown slot {wrt!r}")
        return wrt
    if isinstance(wrt, str) or not (-len(inputs) <= wrt < len(inputs)):
        raise KeyError(f"unknown slot {wrt!r}")
    return wrt


def _call(func, inputs, leaves):
    if isinstance(inputs, Mapping):
        args = {k: leaves.get(k, v) for k, v in inputs.items()}
        return func(**args)
    args = [leaves.get(i, v) for i, v in enumerate(inputs)]
    return func(*args)


def _leaf(inputs, slot):
    return Var(np.array(inputs[slot], dtype=np.float64))


def vjp(func: Callable, inputs: Sequence | Mapping, cotangent, wrt=0):
    """``cotangent^T d func / d inputs[wrt]``, shaped like the slot."""
    slot = _slot_index(inputs, wrt)
    leaf = _leaf(inputs, slot)
    out = _call(func, inputs, {slot: leaf})
    return gradients(out, leaf, cotangent=np.asarray(cotangent, dtype=np.float64))


def grad(func: Callable, inputs: Sequence | Mapping, wrt=0, create_graph=False):
    """Gradient of a scalar-valued ``func`` with respect to one input slot."""
    slot = _slot_index(inputs, wrt)
    leaf = _leaf(inputs, slot)
    out = _call(func, inputs, {slot: leaf})
    if np.size(_val(out)) != 1:
        raise ValueError("grad requires a scalar-valued function")
    return gradients(out, leaf, create_graph=create_graph)


def grad_vjp(func: Callable, inputs: Sequence | Mapping, v, wrt_outer, wrt_inner):
    """``v^T d/d(outer) [d func / d(inner)]`` for scalar ``func``.

    With ``wrt_outer == wrt_inner`` this is a Hessian-vector product.
    """
    outer_slot = _slot_index(inputs, wrt_outer)
    inner_slot = _slot_index(inputs, wrt_inner)
    leaves = {inner_slot: _leaf(inputs, inner_slot)}
    if outer_slot != inner_slot:
        leaves[outer_slot] = _leaf(inputs, outer_slot)
    out = _call(func, inputs, leaves)
    if np.size(_val(out)) != 1:
        raise ValueError("grad_vjp requires a scalar-valued function")
    g = gradients(out, leaves[inner_slot], create_graph=True)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != np.shape(_val(g)):
        raise ValueError(f"v shape {v.shape} != gradient shape {np.shape(_val(g))}")
    return gradients(g, leaves[outer_slot], cotangent=v)
