"""Minimal reverse-mode differentiation over dense matrices.

A :class:`Tape` records nodes in creation order, which is already a
topological order.  Ops evaluate eagerly when they are added, and
:meth:`Tape.forward` re-runs the recorded program with fresh bindings, so one
graph can be re-evaluated many times (finite-difference checks do this).

Loss conventions are fixed so analytic oracles are exact:

* ``mse(pred, target) = 0.5 * mean((pred - target) ** 2)`` over all entries
* ``softmax_xent(logits, labels)`` is the mean negative log-likelihood over rows
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.01


class AutodiffError(RuntimeError):
    pass


class Node:
    __slots__ = ("kind", "parents", "attrs", "value", "adj", "name")

    def __init__(self, kind, parents=(), attrs=None, value=None, name=None):
        self.kind = kind
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.value = value
        self.adj = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.kind}, shape={None if self.value is None else self.value.shape})"


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if g.ndim != len(shape):
        return np.full(shape, g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(a, b, kind):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise AutodiffError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from exc


# Cardinal cubic B-spline on [0, 4] and its derivative.
def _bspline_basis(u):
    v = np.zeros_like(u)
    d = np.zeros_like(u)
    m0 = (u >= 0) & (u < 1)
    m1 = (u >= 1) & (u < 2)
    m2 = (u >= 2) & (u < 3)
    m3 = (u >= 3) & (u <= 4)
    v[m0] = u[m0] ** 3 / 6
    d[m0] = u[m0] ** 2 / 2
    w = u[m1]
    v[m1] = (-3 * w**3 + 12 * w**2 - 12 * w + 4) / 6
    d[m1] = (-9 * w**2 + 24 * w - 12) / 6
    w = u[m2]
    v[m2] = (3 * w**3 - 24 * w**2 + 60 * w - 44) / 6
    d[m2] = (9 * w**2 - 48 * w + 60) / 6
    w = u[m3]
    v[m3] = (4 - w) ** 3 / 6
    d[m3] = -((4 - w) ** 2) / 2
    return v, d


def spline_design(h: np.ndarray, n_coef: int, lo: float = -1.0, hi: float = 1.0):
    """Basis values and h-derivatives, shape ``h.shape + (n_coef,)``.

    Uniform cubic B-spline with ``n_coef`` control points covering
    ``[lo, hi]``; ``h`` is clamped to that range before evaluation.
    """
    if n_coef < 4:
        raise AutodiffError("cubic spline needs at least 4 coefficients")
    step = (hi - lo) / (n_coef - 3)
    hc = np.clip(h, lo, hi)
    u = (hc - lo)[..., None] / step - np.arange(n_coef) + 3.0
    vals, dvals = _bspline_basis(u)
    inside = ((h >= lo) & (h <= hi)).astype(float)[..., None]
    return vals, dvals * inside / step


def spline_greville(n_coef: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Control values that make the spline reproduce the identity on [lo, hi]."""
    step = (hi - lo) / (n_coef - 3)
    return lo + (np.arange(n_coef) - 1.0) * step


def _fwd(node: Node) -> np.ndarray:
    k = node.kind
    p = [q.value for q in node.parents]
    if k == "matmul":
        if p[0].shape[1] != p[1].shape[0]:
            raise AutodiffError(f"matmul: shape mismatch {p[0].shape} @ {p[1].shape}")
        return p[0] @ p[1]
    if k in ("add", "sub", "mul", "div"):
        _check_broadcast(p[0], p[1], k)
        if k == "add":
            return p[0] + p[1]
        if k == "sub":
            return p[0] - p[1]
        if k == "mul":
            return p[0] * p[1]
        return p[0] / p[1]
    if k == "scale":
        return node.attrs["c"] * p[0]
    if k == "tanh":
        return np.tanh(p[0])
    if k == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * p[0]))
    if k == "leaky_relu":
        return np.where(p[0] > 0, p[0], LEAKY_SLOPE * p[0])
    if k == "sqrt":
        return np.sqrt(p[0])
    if k == "log":
        return np.log(p[0])
    if k == "clip":
        return np.clip(p[0], node.attrs["lo"], node.attrs["hi"])
    if k == "transpose":
        return p[0].T
    if k == "kron":
        return np.kron(p[0], p[1])
    if k == "sum":
        return np.array([[p[0].sum()]])
    if k == "sum_rows":
        return p[0].sum(axis=0, keepdims=True)
    if k == "sum_cols":
        return p[0].sum(axis=1, keepdims=True)
    if k == "softmax":
        z = p[0] - p[0].max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    if k == "mse":
        if p[0].shape != p[1].shape:
            raise AutodiffError(f"mse: shape mismatch {p[0].shape} vs {p[1].shape}")
        return np.array([[0.5 * np.mean((p[0] - p[1]) ** 2)]])
    if k == "softmax_xent":
        labels = node.attrs["labels"]
        if labels.shape[0] != p[0].shape[0]:
            raise AutodiffError("softmax_xent: label count does not match batch")
        z = p[0] - p[0].max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return np.array([[-np.mean(logp[np.arange(len(labels)), labels])]])
    if k == "bspline":
        vals, _ = spline_design(p[0], p[1].size, *node.attrs["range"])
        return vals @ p[1].reshape(-1)
    raise AutodiffError(f"unknown op {k}")


def _bwd(node: Node) -> list:
    k = node.kind
    g = node.adj
    p = [q.value for q in node.parents]
    out = node.value
    if k == "matmul":
        return [g @ p[1].T, p[0].T @ g]
    if k == "add":
        return [_unbroadcast(g, p[0].shape), _unbroadcast(g, p[1].shape)]
    if k == "sub":
        return [_unbroadcast(g, p[0].shape), _unbroadcast(-g, p[1].shape)]
    if k == "mul":
        return [_unbroadcast(g * p[1], p[0].shape), _unbroadcast(g * p[0], p[1].shape)]
    if k == "div":
        return [_unbroadcast(g / p[1], p[0].shape), _unbroadcast(-g * p[0] / p[1] ** 2, p[1].shape)]
    if k == "scale":
        return [node.attrs["c"] * g]
    if k == "tanh":
        return [g * (1.0 - out**2)]
    if k == "sigmoid":
        return [g * out * (1.0 - out)]
    if k == "leaky_relu":
        return [g * np.where(p[0] > 0, 1.0, LEAKY_SLOPE)]
    if k == "sqrt":
        return [g * 0.5 / out]
    if k == "log":
        return [g / p[0]]
    if k == "clip":
        inside = (p[0] >= node.attrs["lo"]) & (p[0] <= node.attrs["hi"])
        return [g * inside]
    if k == "transpose":
        return [g.T]
    if k == "kron":
        (a1, a2), (b1, b2) = p[0].shape, p[1].shape
        g4 = g.reshape(a1, b1, a2, b2)
        return [np.einsum("ikjl,kl->ij", g4, p[1]), np.einsum("ikjl,ij->kl", g4, p[0])]
    if k == "sum":
        return [np.full(p[0].shape, g[0, 0])]
    if k == "sum_rows":
        return [np.broadcast_to(g, p[0].shape).copy()]
    if k == "sum_cols":
        return [np.broadcast_to(g, p[0].shape).copy()]
    if k == "softmax":
        return [out * (g - (g * out).sum(axis=1, keepdims=True))]
    if k == "mse":
        d = (p[0] - p[1]) * (g[0, 0] / p[0].size)
        return [d, -d]
    if k == "softmax_xent":
        labels = node.attrs["labels"]
        z = p[0] - p[0].max(axis=1, keepdims=True)
        sm = np.exp(z)
        sm /= sm.sum(axis=1, keepdims=True)
        sm[np.arange(len(labels)), labels] -= 1.0
        return [sm * (g[0, 0] / len(labels))]
    if k == "bspline":
        vals, dvals = spline_design(p[0], p[1].size, *node.attrs["range"])
        coef = p[1].reshape(-1)
        gh = g * (dvals @ coef)
        gc = np.tensordot(g, vals, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
        return [gh, gc.reshape(p[1].shape)]
    raise AutodiffError(f"unknown op {k}")


@dataclass
class Tape:
    """Recorded computation; ``params`` maps names to trainable leaves."""

    nodes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    _ran_backward: bool = False

    # leaves
    def input(self, value, name: str | None = None) -> Node:
        node = Node("input", value=np.asarray(value, dtype=np.float64), name=name)
        if node.value.ndim == 1:
            node.value = node.value.reshape(1, -1)
        self.nodes.append(node)
        if name is not None:
            self.inputs[name] = node
        return node

    const = input

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise AutodiffError(f"parameter {name!r} registered twice")
        node = Node("param", value=np.array(value, dtype=np.float64, ndmin=2), name=name)
        self.nodes.append(node)
        self.params[name] = node
        return node

    def _op(self, kind, *parents, **attrs) -> Node:
        parents = [p if isinstance(p, Node) else self.input(p) for p in parents]
        node = Node(kind, parents, attrs)
        node.value = _fwd(node)
        self.nodes.append(node)
        return node

    # ops
    def matmul(self, a, b):
        return self._op("matmul", a, b)

    def add(self, a, b):
        return self._op("add", a, b)

    def sub(self, a, b):
        return self._op("sub", a, b)

    def mul(self, a, b):
        return self._op("mul", a, b)

    def div(self, a, b):
        return self._op("div", a, b)

    def scale(self, a, c: float):
        return self._op("scale", a, c=float(c))

    def tanh(self, a):
        return self._op("tanh", a)

    def sigmoid(self, a):
        return self._op("sigmoid", a)

    def leaky_relu(self, a):
        return self._op("leaky_relu", a)

    def sqrt(self, a):
        return self._op("sqrt", a)

    def log(self, a):
        return self._op("log", a)

    def clip(self, a, lo: float, hi: float):
        return self._op("clip", a, lo=lo, hi=hi)

    def transpose(self, a):
        return self._op("transpose", a)

    def kron(self, a, b):
        return self._op("kron", a, b)

    def sum(self, a):
        return self._op("sum", a)

    def sum_rows(self, a):
        return self._op("sum_rows", a)

    def sum_cols(self, a):
        return self._op("sum_cols", a)

    def softmax(self, a):
        return self._op("softmax", a)

    def mse(self, pred, target):
        return self._op("mse", pred, target)

    def softmax_xent(self, logits, labels):
        return self._op("softmax_xent", logits, labels=np.asarray(labels, dtype=np.int64))

    def bspline(self, h, coef, lo: float = -1.0, hi: float = 1.0):
        return self._op("bspline", h, coef, range=(lo, hi))

    def square_sum(self, a):
        return self.sum(self.mul(a, a))

    # execution
    def forward(self, inputs: dict | None = None) -> float:
        """Rebind named inputs/params and re-run every op; returns the last value."""
        for name, value in (inputs or {}).items():
            node = self.inputs.get(name) or self.params.get(name)
            if node is None:
                raise AutodiffError(f"unknown binding {name!r}")
            value = np.array(value, dtype=np.float64, ndmin=2)
            if value.shape != node.value.shape:
                raise AutodiffError(f"binding {name!r}: shape {value.shape} != {node.value.shape}")
            node.value = value
        for node in self.nodes:
            if node.kind not in ("input", "param"):
                node.value = _fwd(node)
        self._ran_backward = False
        return self.loss_value

    @property
    def loss_value(self) -> float:
        if not self.nodes:
            raise AutodiffError("empty tape")
        return float(self.nodes[-1].value.reshape(-1)[0])

    def backward(self, root: Node | None = None) -> dict:
        if not self.nodes:
            raise AutodiffError("backward before forward")
        root = root or self.nodes[-1]
        if root.value is None:
            raise AutodiffError("backward before forward")
        if root.value.size != 1:
            raise AutodiffError("backward root must be scalar")
        for node in self.nodes:
            node.adj = None
        root.adj = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.adj is None or not node.parents:
                continue
            for parent, g in zip(node.parents, _bwd(node)):
                parent.adj = g if parent.adj is None else parent.adj + g
        self._ran_backward = True
        return self.gradients()

    def gradients(self) -> dict:
        if not self._ran_backward:
            raise AutodiffError("backward has not run")
        return {
            name: (n.adj if n.adj is not None else np.zeros_like(n.value))
            for name, n in self.params.items()
        }


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict
    passed: bool


def grad_check(tape: Tape, tol: float = 1e-6, h: float = 1e-5, grads: dict | None = None) -> GradCheckReport:
    """Compare backward gradients against central differences, entrywise.

    ``grads`` may be supplied to check externally computed gradients (the
    negative control in the tests passes a corrupted copy).  Relative error
    is ``|g - fd| / max(1, |g|, |fd|)`` so near-zero entries are judged on an
    absolute scale.
    """
    if grads is None:
        tape.forward()
        grads = tape.backward()
    per = {}
    for name, node in tape.params.items():
        base = node.value.copy()
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += h
            fp = tape.forward({name: plus})
            minus = base.copy()
            minus[idx] -= h
            fm = tape.forward({name: minus})
            fd[idx] = (fp - fm) / (2 * h)
        tape.forward({name: base})
        g = grads[name]
        denom = np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))
        per[name] = float(np.max(np.abs(g - fd) / denom)) if g.size else 0.0
    worst = max(per.values(), default=0.0)
    return GradCheckReport(max_rel_err=worst, per_param=per, passed=worst <= tol)
