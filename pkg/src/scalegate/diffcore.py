"""Dense float64 tensors with reverse-mode gradients.

Only the handful of ops the adapter, scale head and losses need are provided.
There is no implicit broadcasting: every op documents the shapes it accepts.
Rows of a 2-D tensor are independent samples wherever an op is batched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, DomainError

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; every op returns a new node that remembers its
    parents and a closure propagating the upstream gradient to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.shape})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar loss; each node is visited once."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        for node in order:
            if node is not self and node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out.name = None
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    out.op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for (m,k)@(k,n), (m,k)@(k,) and (k,)@(k,n)."""
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or (a.data.ndim == 1 and b.data.ndim == 1):
        raise DimensionError(f"matmul: unsupported shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents of {a.shape} and {b.shape} disagree")
    out = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            if b.data.ndim == 1:
                a._accumulate(np.outer(g, b.data))
            else:
                a._accumulate(g @ b.data.T)
        if b.requires_grad:
            if a.data.ndim == 1:
                b._accumulate(np.outer(a.data, g))
            elif b.data.ndim == 1:
                b._accumulate(a.data.T @ g)
            else:
                b._accumulate(a.data.T @ g)

    return _node(out, (a, b), "matmul", backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _node(a.data - b.data, (a, b), "sub", backward)


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a length-n vector to every row of an (m,n) matrix (bias term)."""
    if a.data.ndim != 2 or row.data.ndim != 1 or a.shape[1] != row.shape[0]:
        raise DimensionError(f"add_row: shapes {a.shape} and {row.shape} incompatible")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if row.requires_grad:
            row._accumulate(g.sum(axis=0))

    return _node(a.data + row.data, (a, row), "add_row", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    _same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        a._accumulate(g * c)

    return _node(a.data * c, (a,), "scale", backward)


def scalar_mul(a: Tensor, c: Tensor) -> Tensor:
    """Multiply every element of ``a`` by the single-element tensor ``c``."""
    if c.data.size != 1:
        raise DimensionError(f"scalar_mul: multiplier must hold one element, got {c.shape}")
    cv = c.data.reshape(())

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * cv)
        if c.requires_grad:
            c._accumulate(np.sum(g * a.data).reshape(c.shape))

    return _node(a.data * cv, (a, c), "scalar_mul", backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _node(out, (a,), "exp", backward)


def outer_diff(row: Tensor, col: Tensor) -> Tensor:
    """``out[b, k] = row[k] - col[b]`` for vectors row (r,) and col (m,)."""
    if row.data.ndim != 1 or col.data.ndim != 1:
        raise DimensionError(f"outer_diff: expects two vectors, got {row.shape} and {col.shape}")
    out = row.data[None, :] - col.data[:, None]

    def backward(g):
        if row.requires_grad:
            row._accumulate(g.sum(axis=0))
        if col.requires_grad:
            col._accumulate(-g.sum(axis=1))

    return _node(out, (row, col), "outer_diff", backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expects a matrix, got {a.shape}")

    def backward(g):
        a._accumulate(g.T)

    return _node(a.data.T, (a,), "transpose", backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    if out.size != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(out, (a,), "reshape", backward)


def append_column(a: Tensor, col: Tensor) -> Tensor:
    """Concatenate a length-m vector as the last column of an (m,n) matrix."""
    if a.data.ndim != 2 or col.data.ndim != 1 or a.shape[0] != col.shape[0]:
        raise DimensionError(f"append_column: shapes {a.shape} and {col.shape} incompatible")
    out = np.concatenate([a.data, col.data[:, None]], axis=1)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, :-1])
        if col.requires_grad:
            col._accumulate(g[:, -1])

    return _node(out, (a, col), "append_column", backward)


def mean(a: Tensor) -> Tensor:
    """Mean over all elements (a scalar)."""
    n = a.data.size

    def backward(g):
        a._accumulate(np.full(a.shape, float(g) / n))

    return _node(np.array(a.data.mean()), (a,), "mean", backward)


def mean_pool(a: Tensor) -> Tensor:
    """Average the rows of a (tokens, d) matrix into a length-d vector."""
    if a.data.ndim != 2:
        raise DimensionError(f"mean_pool: expects a matrix, got {a.shape}")
    t = a.shape[0]

    def backward(g):
        a._accumulate(np.broadcast_to(g / t, a.shape))

    return _node(a.data.mean(axis=0), (a,), "mean_pool", backward)


# --- nonlinearities -----------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the affine (gain, bias)."""
    d = x.shape[-1]
    if d < 2:
        raise DomainError("layer_norm needs at least two features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _node(out, (x, gain, bias), "layer_norm", backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf))

    return _node(out, (x,), "gelu", backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return _node(out, (x,), "sigmoid", backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clamp; the gradient is zero wherever the clamp is active."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x._accumulate(g * inside)

    return _node(out, (x,), "clamp", backward)


# --- losses -------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over rows.

    ``logits`` is (C,) with a single int label, or (m, C) with m labels.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    lab = np.atleast_1d(np.asarray(labels))
    if lab.shape[0] != z2.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: {lab.shape[0]} labels for {z2.shape[0]} rows")
    c = z2.shape[1]
    if not np.issubdtype(lab.dtype, np.integer) or np.any(lab < 0) or np.any(lab >= c):
        raise IndexError(f"labels must be class indices in [0, {c})")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    loss = np.mean(logsumexp - shifted[rows, lab])

    def backward(g):
        p = np.exp(shifted - logsumexp[:, None])
        p[rows, lab] -= 1.0
        p *= float(g) / z2.shape[0]
        logits._accumulate(p[0] if single else p)

    return _node(np.array(loss), (logits,), "softmax_ce", backward)


def gaussian_nll(mu: Tensor, log_var: Tensor, target, mask=None) -> Tensor:
    """Masked mean of 0.5*(t-mu)^2/exp(log_var) + 0.5*log_var.

    Rows with mask 0 are ignored; an all-zero mask yields exactly 0.
    """
    _same_shape(mu, log_var, "gaussian_nll")
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), mu.shape)
    m = np.ones(mu.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(mu.shape)
    count = m.sum()
    if count == 0:
        return _node(np.array(0.0), (mu, log_var), "gaussian_nll", lambda g: None)
    resid = t - mu.data
    inv_var = np.exp(-log_var.data)
    per = 0.5 * resid * resid * inv_var + 0.5 * log_var.data
    loss = float((per * m).sum() / count)

    def backward(g):
        w = float(g) * m / count
        if mu.requires_grad:
            mu._accumulate(-w * resid * inv_var)
        if log_var.requires_grad:
            log_var._accumulate(w * (0.5 - 0.5 * resid * resid * inv_var))

    return _node(np.array(loss), (mu, log_var), "gaussian_nll", backward)


# --- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    worst: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.worst.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(loss_fn: Callable[[], Tensor], leaves: dict[str, Tensor] | Iterable[Tensor],
               tolerance: float = 1e-5, eps: float = 1e-6, max_elements: int = 256,
               n_projections: int = 16, seed: int = 0,
               analytic: dict[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    ``loss_fn`` must rebuild the graph from the current leaf values each call.
    Leaves with more than ``max_elements`` entries are checked along
    ``n_projections`` random unit directions instead of element by element.
    The error is ``|analytic - numeric| / max(1, |numeric|)``. ``analytic``
    overrides the backprop gradients (used to test the checker itself).
    """
    if not isinstance(leaves, dict):
        leaves = {(t.name or f"leaf{i}"): t for i, t in enumerate(leaves)}
    loss = loss_fn()
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    for t in leaves.values():
        t.grad = None
        if not np.all(np.isfinite(t.data)):
            raise ContractError(f"leaf {t.name!r} holds non-finite values")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
             for k, t in leaves.items()}
    if analytic is not None:
        grads.update(analytic)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)

    def f() -> float:
        return float(loss_fn().data)

    for name, leaf in leaves.items():
        g = grads[name]
        flat = leaf.data.reshape(-1)
        worst = 0.0
        if flat.size <= max_elements:
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f()
                flat[i] = orig - eps
                fm = f()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                worst = max(worst, abs(g.reshape(-1)[i] - num) / max(1.0, abs(num)))
        else:
            orig = flat.copy()
            for _ in range(n_projections):
                v = rng.standard_normal(flat.size)
                v /= np.linalg.norm(v)
                flat[:] = orig + eps * v
                fp = f()
                flat[:] = orig - eps * v
                fm = f()
                flat[:] = orig
                num = (fp - fm) / (2 * eps)
                worst = max(worst, abs(g.reshape(-1) @ v - num) / max(1.0, abs(num)))
        report.worst[name] = worst
    return report
