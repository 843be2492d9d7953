"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the simulator uses are provided. Every op returns a new
:class:`Tensor` that remembers its parents and a closure computing the
vector-Jacobian product; :func:`backward` walks the recorded graph in reverse
topological order.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import ConsistencyError, DimensionError, LabelError, ParameterError

ShapeError = DimensionError


class Rng:
    """Counter-based (Philox) generator addressed by ``(seed, stream)``.

    Streams are derived by name, so ``Rng(7).child("party/1")`` always yields
    the same draws no matter what other streams have consumed.
    """

    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed)
        self.stream = str(stream)
        digest = hashlib.blake2b(f"{self.seed}|{self.stream}".encode(), digest_size=16).digest()
        self._gen = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))

    def child(self, name) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{name}")

    def normal(self, shape, scale: float = 1.0, loc: float = 0.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)

    def laplace(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.laplace(0.0, scale, size=shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        return self._gen.choice(n, size=k, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream!r})"


class Tensor:
    """Dense float64 array node.

    Tensors are treated as immutable; optimisers build new leaves instead of
    writing into ``data``. Hashing is by identity so tensors can key
    gradient maps.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _vjp: Callable | None = None, _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp
        self.op = _op
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __rsub__(self, other):
        return sub(_wrap(other, self.shape), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), shape))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def _node(data, parents: tuple, vjp: Callable, op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (), _vjp=vjp if req else None, _op=op)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = kernels.matmul(a.data, b.data)

    def vjp(g):
        return kernels.matmul_nt(g, b.data), kernels.matmul_tn(a.data, g)

    return _node(out, (a, b), vjp, "matmul")


def linear_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (B, n), ``W`` (n, m), ``b`` (m,)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    out = kernels.matmul(x.data, W.data) + b.data

    def vjp(g):
        return kernels.matmul_nt(g, W.data), kernels.matmul_tn(x.data, g), g.sum(axis=0)

    return _node(out, (x, W, b), vjp, "linear")


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T.copy(), (a,), lambda g: (g.T.copy(),), "transpose")


def sum_rows(a: Tensor) -> Tensor:
    """Column sums of a (B, m) matrix, shape (m,)."""
    n = a.shape[0]
    return _node(a.data.sum(axis=0), (a,), lambda g: (np.tile(g, (n, 1)),), "sum_rows")


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    width = a.shape[1]

    def vjp(g):
        full = np.zeros((g.shape[0], width))
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop].copy(), (a,), vjp, "columns")


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat: row counts differ {[p.shape for p in parts]}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g):
        return tuple(g[:, edges[i]:edges[i + 1]].copy() for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp, "concat")


# ---------------------------------------------------------------- elementwise

def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_n(parts: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors, accumulated in list order."""
    if not parts:
        raise DimensionError("add_n: empty list")
    for p in parts[1:]:
        _same_shape(parts[0], p, "add_n")
    out = parts[0].data.copy()
    for p in parts[1:]:
        out = out + p.data
    return _node(out, tuple(parts), lambda g: tuple(g for _ in parts), "add_n")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    return _node(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float64)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = ((x.data >= lo) & (x.data <= hi)).astype(np.float64)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


# ---------------------------------------------------------------- reductions

def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _node(np.array(x.data.sum() / n), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def sum_squares(x: Tensor) -> Tensor:
    return _node(np.array(np.sum(x.data * x.data)), (x,), lambda g: (2.0 * float(g) * x.data,), "sum_squares")


# ---------------------------------------------------------------- losses

def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return _softmax(np.atleast_2d(np.asarray(logits, dtype=np.float64)))


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean softmax cross-entropy. Returns ``(loss, probs)``.

    The gradient w.r.t. ``logits`` is ``(probs - onehot) / B``.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross-entropy expects (B, C) logits, got {logits.shape}")
    B, C = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != B:
        raise DimensionError(f"cross-entropy: {y.shape[0]} labels for {B} rows")
    bad = np.flatnonzero((y < 0) | (y >= C))
    if bad.size:
        raise LabelError(f"label {int(y[bad[0]])} at index {int(bad[0])} outside [0, {C})")
    logp = _log_softmax(logits.data)
    probs = np.exp(logp)
    loss = -logp[np.arange(B), y].sum() / B
    onehot = np.zeros((B, C))
    onehot[np.arange(B), y] = 1.0

    def vjp(g):
        return (float(g) * (probs - onehot) / B,)

    return _node(np.array(loss), (logits,), vjp, "softmax_ce"), probs


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Cross-entropy against per-row target distributions."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise DimensionError(f"soft cross-entropy: targets {targets.shape} vs logits {logits.shape}")
    B = logits.shape[0]
    logp = _log_softmax(logits.data)
    probs = np.exp(logp)
    loss = -(targets * logp).sum() / B
    tsum = targets.sum(axis=1, keepdims=True)

    def vjp(g):
        return (float(g) * (probs * tsum - targets) / B,)

    return _node(np.array(loss), (logits,), vjp, "soft_ce")


def gaussian_kl(mu: Tensor, log_var: Tensor) -> Tensor:
    """Batch-mean KL(N(mu, exp(log_var)) || N(0, I)), summed over dimensions."""
    _same_shape(mu, log_var, "gaussian_kl")
    B = mu.shape[0] if mu.data.ndim else 1
    ev = np.exp(log_var.data)
    val = 0.5 * np.sum(mu.data ** 2 + ev - 1.0 - log_var.data) / B

    def vjp(g):
        g = float(g)
        return g * mu.data / B, g * 0.5 * (ev - 1.0) / B

    return _node(np.array(val), (mu, log_var), vjp, "gaussian_kl")


def reparam_sample(mu: Tensor, log_var: Tensor, rng: Rng | None = None, eps: np.ndarray | None = None) -> Tensor:
    """``mu + eps * exp(log_var / 2)`` with ``eps ~ N(0, 1)`` held constant for backward."""
    _same_shape(mu, log_var, "reparam_sample")
    if eps is None:
        if rng is None:
            raise ParameterError("reparam_sample needs an rng or explicit eps")
        eps = rng.normal(mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    std = np.exp(0.5 * log_var.data)
    out = mu.data + eps * std

    def vjp(g):
        return g, g * eps * std * 0.5

    return _node(out, (mu, log_var), vjp, "reparam")


def clip_by_norm(g: Tensor, c: float) -> Tensor:
    """Rescale ``g`` to 2-norm ``c`` if it is longer; otherwise return it unchanged."""
    if not c > 0:
        raise ParameterError(f"clip threshold must be positive, got {c}")
    norm = float(np.sqrt(np.sum(g.data * g.data)))
    if norm <= c:
        return g
    u = g.data / norm

    def vjp(up):
        return ((c / norm) * (up - u * np.sum(up * u)),)

    return _node(g.data * (c / norm), (g,), vjp, "clip")


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None,
             grad_output: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode pass from ``loss``.

    Returns a map from every grad-enabled leaf reachable from ``loss`` (or
    from each tensor in ``wrt``, zero-filled when unreachable) to its gradient.
    ``grad_output`` seeds a non-scalar output with an upstream gradient.
    """
    if grad_output is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones(loss.shape)
    else:
        seed = np.asarray(grad_output, dtype=np.float64)
        if seed.shape != loss.shape:
            raise ShapeError(f"grad_output {seed.shape} does not match output {loss.shape}")

    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = seed
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if node.is_leaf:
                leaves[id(node)] = node
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    if wrt is None:
        return {t: grads.get(i, np.zeros(t.shape)) for i, t in leaves.items()}
    return {t: grads.get(id(t), np.zeros(t.shape)) for t in wrt}


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[Tensor, np.ndarray], lr: float) -> dict[str, Tensor]:
    """Return fresh leaves ``theta - lr * g`` for every named parameter."""
    out = {}
    for name, p in params.items():
        if p not in grads:
            raise ConsistencyError(f"no gradient for parameter {name!r}")
        g = np.asarray(grads[p], dtype=np.float64)
        if g.shape != p.shape:
            raise ConsistencyError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        out[name] = Tensor(p.data - lr * g, requires_grad=True, name=name)
    return out
