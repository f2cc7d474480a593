"""Reverse-mode differentiation on dense float64 arrays.

A :class:`Tape` records primitive operations in execution order. Each
recorded node keeps a forward rule (parent values -> value), a backward
rule (output gradient -> parent gradients) and, for the operations used by
the critic, a *symbolic* backward rule that emits new tape operations. The
latter is what makes the gradient penalty work: ``Tape.grad`` with
``create_graph=True`` builds d(critic)/d(input) as ordinary tape nodes, so a
second ``backward`` differentiates through it.

Tapes are eager by default (values are computed while the graph is built);
``Tape(eager=False)`` defers evaluation until :meth:`Tape.forward`.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Adam",
    "ConfigError",
    "NonFiniteError",
    "Param",
    "Tape",
    "TapeError",
    "Var",
    "expm",
]


class ConfigError(ValueError):
    """Invalid hyper-parameter or configuration value."""


class TapeError(RuntimeError):
    """Misuse of a tape (e.g. backward before forward)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op, index):
        super().__init__(f"non-finite value produced by op '{op}' (node {index})")
        self.op = op
        self.index = index


class Param:
    """A trainable array with an accumulated gradient."""

    def __init__(self, value, name="", frozen=False):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.frozen = frozen
        self.nonneg = False  # project onto [0, inf) after optimizer steps

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        flag = ", frozen" if self.frozen else ""
        return f"Param({self.name!r}, shape={self.value.shape}{flag})"


class _Node:
    __slots__ = ("op", "parents", "fwd", "bwd", "sym", "value", "param", "rg")

    def __init__(self, op, parents=(), fwd=None, bwd=None, sym=None, value=None, param=None,
                 rg=False):
        self.rg = rg  # some Param is upstream of this node
        self.op = op
        self.parents = parents
        self.fwd = fwd
        self.bwd = bwd
        self.sym = sym
        self.value = value
        self.param = param


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self, eager=True, check_finite=True):
        self.nodes = []
        self.eager = eager
        self.check_finite = check_finite
        self.output = None
        self._evaluated = eager

    def __len__(self):
        return len(self.nodes)

    # -- leaves -----------------------------------------------------------
    def param(self, p):
        node = _Node("param", param=p, value=p.value if self.eager else None, rg=True)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def const(self, value):
        arr = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node("const", value=arr))
        return Var(self, len(self.nodes) - 1)

    def lift(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise TapeError("variable belongs to a different tape")
            return x
        return self.const(x)

    # -- recording --------------------------------------------------------
    def record(self, op, parents, fwd, bwd, sym=None):
        """Append a primitive. ``fwd(*vals)``, ``bwd(g, out, *vals)``."""
        idx = tuple(v.idx for v in parents)
        node = _Node(op, idx, fwd, bwd, sym, rg=any(self.nodes[i].rg for i in idx))
        self.nodes.append(node)
        pos = len(self.nodes) - 1
        if self.eager:
            node.value = self._eval(node, pos)
        return Var(self, pos)

    def _eval(self, node, pos):
        value = node.fwd(*[self.nodes[i].value for i in node.parents])
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.isfinite(value).all():
            raise NonFiniteError(node.op, pos)
        return value

    def set_output(self, var):
        self.output = var.idx

    # -- evaluation -------------------------------------------------------
    def forward(self, output=None):
        """Re-evaluate every node from current parameter values.

        Returns the scalar value of the output node.
        """
        if not self.nodes:
            raise TapeError("empty tape")
        if output is not None:
            self.output = output.idx
        for pos, node in enumerate(self.nodes):
            if node.op == "param":
                node.value = node.param.value
            elif node.op != "const":
                node.value = self._eval(node, pos)
        self._evaluated = True
        out = self.nodes[self._output_index()].value
        return float(out.reshape(-1)[0]) if out.size == 1 else out

    def _output_index(self):
        if self.output is None:
            return len(self.nodes) - 1
        return self.output

    def backward(self, output=None):
        """Accumulate d(output)/d(param) into every reachable ``Param.grad``."""
        if output is not None:
            self.output = output.idx
        if not self._evaluated:
            raise TapeError("backward called before forward")
        out = self._output_index()
        nodes = self.nodes
        if nodes[out].value.size != 1:
            raise TapeError("backward requires a scalar output")
        grads = [None] * (out + 1)
        grads[out] = np.ones_like(nodes[out].value)
        for i in range(out, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = nodes[i]
            if node.op == "param":
                node.param.grad += g
                continue
            if not node.rg:
                continue
            pvals = [nodes[j].value for j in node.parents]
            pgrads = node.bwd(g, node.value, *pvals)
            for j, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                grads[j] = pg if grads[j] is None else grads[j] + pg
            grads[i] = None

    def grad(self, output, wrt, create_graph=True):
        """Symbolic gradients of scalar ``output`` w.r.t. the vars in ``wrt``.

        The result is a list of :class:`Var` living on this tape, so it can
        be used in further computation and differentiated again.
        """
        if not create_graph:
            raise TapeError("only create_graph=True is supported; use backward()")
        out = output.idx
        grads = {out: self.const(np.ones_like(self.nodes[out].value))}
        targets = {v.idx for v in wrt}
        for i in range(out, -1, -1):
            g = grads.get(i)
            if g is None or i in targets:
                continue
            node = self.nodes[i]
            if node.op in ("param", "const"):
                continue
            if node.sym is None:
                raise TapeError(f"op '{node.op}' has no symbolic gradient")
            parents = [Var(self, j) for j in node.parents]
            pgrads = node.sym(g, Var(self, i), *parents)
            for j, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                grads[j] = pg if j not in grads else grads[j] + pg
        result = []
        for v in wrt:
            g = grads.get(v.idx)
            result.append(g if g is not None else self.const(np.zeros_like(v.value)))
        return result


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def requires_grad(self):
        return self.tape.nodes[self.idx].rg

    @property
    def T(self):
        return transpose(self)

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
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def __repr__(self):
        return f"Var(#{self.idx}, shape={self.shape})"


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _pair(a, b):
    tape = _tape_of(a, b)
    return tape, tape.lift(a), tape.lift(b)


# -- shape plumbing ----------------------------------------------------------

def sum_to(a, shape):
    shape = tuple(shape)
    if a.value is not None and a.shape == shape:
        return a
    return a.tape.record(
        "sum_to", (a,),
        lambda x: _unbroadcast(x, shape),
        lambda g, out, x: (np.broadcast_to(g, x.shape).copy(),),
        lambda g, out, x: (broadcast_to(g, x.shape),),
    )


def broadcast_to(a, shape):
    shape = tuple(shape)
    if a.value is not None and a.shape == shape:
        return a
    return a.tape.record(
        "broadcast_to", (a,),
        lambda x: np.broadcast_to(x, shape).copy(),
        lambda g, out, x: (_unbroadcast(g, x.shape),),
        lambda g, out, x: (sum_to(g, x.shape),),
    )


def reshape(a, shape):
    shape = tuple(shape)
    return a.tape.record(
        "reshape", (a,),
        lambda x: x.reshape(shape),
        lambda g, out, x: (g.reshape(x.shape),),
        lambda g, out, x: (reshape(g, x.shape),),
    )


def transpose(a):
    return a.tape.record(
        "transpose", (a,),
        lambda x: x.T.copy(),
        lambda g, out, x: (g.T,),
        lambda g, out, x: (transpose(g),),
    )


# -- arithmetic --------------------------------------------------------------

def add(a, b):
    tape, a, b = _pair(a, b)
    return tape.record(
        "add", (a, b),
        np.add,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        lambda g, out, x, y: (sum_to(g, x.shape), sum_to(g, y.shape)),
    )


def sub(a, b):
    tape, a, b = _pair(a, b)
    return tape.record(
        "sub", (a, b),
        np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        lambda g, out, x, y: (sum_to(g, x.shape), sum_to(neg(g), y.shape)),
    )


def neg(a):
    return a.tape.record(
        "neg", (a,),
        np.negative,
        lambda g, out, x: (-g,),
        lambda g, out, x: (neg(g),),
    )


def mul(a, b):
    tape, a, b = _pair(a, b)
    return tape.record(
        "mul", (a, b),
        np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        lambda g, out, x, y: (sum_to(mul(g, y), x.shape), sum_to(mul(g, x), y.shape)),
    )


def matmul(a, b):
    tape, a, b = _pair(a, b)
    return tape.record(
        "matmul", (a, b),
        np.matmul,
        lambda g, out, x, y: (g @ y.T, x.T @ g),
        lambda g, out, x, y: (matmul(g, transpose(y)), matmul(transpose(x), g)),
    )


def vsum(a, axis=None, keepdims=False):
    def back(g, out, x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    def sym(g, out, x):
        return (_expand_sym(g, x, axis, keepdims),)

    return a.tape.record(
        "sum", (a,),
        lambda x: np.sum(x, axis=axis, keepdims=keepdims),
        back, sym,
    )


def mean(a, axis=None, keepdims=False):
    def count(x):
        return x.size if axis is None else x.shape[axis]

    def back(g, out, x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count(x), x.shape).copy(),)

    def sym(g, out, x):
        return (mul(_expand_sym(g, x, axis, keepdims), 1.0 / count(x.value)),)

    return a.tape.record(
        "mean", (a,),
        lambda x: np.mean(x, axis=axis, keepdims=keepdims),
        back, sym,
    )


def _expand_sym(g, x, axis, keepdims):
    src = x.shape
    if axis is None:
        g = reshape(g, (1,) * len(src))
    elif not keepdims:
        g = reshape(g, np.expand_dims(g.value, axis).shape)
    return broadcast_to(g, src)


def square(a):
    return a.tape.record(
        "square", (a,),
        np.square,
        lambda g, out, x: (2.0 * g * x,),
        lambda g, out, x: (mul(g, mul(x, 2.0)),),
    )


# -- elementwise nonlinearities ---------------------------------------------

def exp(a):
    return a.tape.record(
        "exp", (a,),
        np.exp,
        lambda g, out, x: (g * out,),
        lambda g, out, x: (mul(g, out),),
    )


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return a.tape.record(
        "sigmoid", (a,),
        _sigmoid,
        lambda g, out, x: (g * out * (1.0 - out),),
        lambda g, out, x: (mul(g, mul(out, sub(1.0, out))),),
    )


def tanh(a):
    return a.tape.record(
        "tanh", (a,),
        np.tanh,
        lambda g, out, x: (g * (1.0 - out * out),),
        lambda g, out, x: (mul(g, sub(1.0, square(out))),),
    )


def relu(a):
    return leaky_relu(a, 0.0)


def leaky_relu(a, slope=0.2):
    def fwd(x):
        return np.where(x > 0, x, slope * x)

    def slope_mask(x):
        return np.where(x > 0, 1.0, slope)

    return a.tape.record(
        "leaky_relu" if slope else "relu", (a,),
        fwd,
        lambda g, out, x: (g * slope_mask(x),),
        # piecewise-linear: the local slope is a constant w.r.t. x
        lambda g, out, x: (mul(g, slope_mask(x.value)),),
    )


def row_norm(a):
    """Euclidean norm of each row, shape (n, 1). Gradient is 0 at a zero row."""

    def fwd(x):
        return np.sqrt(np.sum(x * x, axis=1, keepdims=True))

    def back(g, out, x):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * x / safe, 0.0),)

    return a.tape.record("row_norm", (a,), fwd, back)


def col_standardize(a, eps=1e-8):
    """Centre each column and scale it to unit (population) variance."""

    def fwd(x):
        mu = x.mean(axis=0, keepdims=True)
        sd = np.sqrt(x.var(axis=0, keepdims=True) + eps)
        return (x - mu) / sd

    def back(g, out, x):
        sd = np.sqrt(x.var(axis=0, keepdims=True) + eps)
        gm = g.mean(axis=0, keepdims=True)
        gy = (g * out).mean(axis=0, keepdims=True)
        return ((g - gm - out * gy) / sd,)

    return a.tape.record("col_standardize", (a,), fwd, back)


def local_linear(h, w):
    """Per-node dense map: ``out[n, j, :] = h[n, j, :] @ w[j]``.

    ``h`` has shape (n, d, m) and ``w`` shape (d, m, k).
    """
    tape, h, w = _pair(h, w)

    def fwd(x, y):
        return np.matmul(x.transpose(1, 0, 2), y).transpose(1, 0, 2)

    def back(g, out, x, y):
        gt = g.transpose(1, 0, 2)
        xt = x.transpose(1, 0, 2)
        dx = np.matmul(gt, y.transpose(0, 2, 1)).transpose(1, 0, 2)
        dy = np.matmul(xt.transpose(0, 2, 1), gt)
        return dx, dy

    return tape.record("local_linear", (h, w), fwd, back)


# -- optimizer ---------------------------------------------------------------

class Adam:
    """Adam with decoupled (AdamW-style) weight decay.

    Frozen parameters are dropped at construction and never updated.
    Parameters flagged ``nonneg`` are clipped at zero after each step.
    """

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = [p for p in params if not p.frozen]
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.value *= 1.0 - self.lr * self.weight_decay
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.nonneg:
                np.maximum(p.value, 0.0, out=p.value)


def adam_step(optimizer):
    """Apply one update with ``optimizer`` and clear its gradients."""
    optimizer.step()
    optimizer.zero_grad()


# -- matrix exponential ------------------------------------------------------

def expm(m, terms=20):
    """Matrix exponential by scaling and squaring with a truncated Taylor series."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expm needs a square matrix, got shape {m.shape}")
    norm = np.abs(m).sum(axis=0).max() if m.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm))) + 1) if norm > 0.5 else 0
    a = m / (2.0 ** s)
    result = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for k in range(1, terms + 1):
        term = term @ a / k
        result = result + term
    for _ in range(s):
        result = result @ result
    return result
