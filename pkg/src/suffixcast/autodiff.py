"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Design constraints, in rough priority order: bit-for-bit determinism
(identical inputs give identical values and gradients), a small exactly-shaped
op surface (the only broadcast allowed is a bias vector added over rows),
float32 storage with float64 accumulation inside reductions, and dropout as
plain multiplication by an externally supplied mask so the mask supplier
alone decides between variational and per-step sampling.

Graphs are built eagerly: every op returns a new :class:`Tensor` holding its
forward value and closures producing the gradient for each parent.
``backward`` walks the recorded graph once. Building a graph from float64
leaves yields a float64 graph, which :func:`grad_check` uses as the shadow
evaluation mode for central finite differences.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NonScalarLoss(ValueError):
    """backward() was asked to differentiate a non-scalar."""


def _require(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeMismatch(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")


class Tensor:
    """A node in the computation graph.

    ``data`` is a numpy array (float32 in training graphs, float64 in shadow
    graphs). Leaves created with ``requires_grad=True`` are the trainable
    parameters; everything derived from at least one of them is tracked.
    """

    __slots__ = ("data", "parents", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.parents = parents  # tuple of (Tensor, grad_fn)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = self.name or "tensor"
        return f"<{tag} shape={self.data.shape} dtype={self.data.dtype}>"

    # operator sugar; constants may be python floats
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def const(data, dtype=None, name: str = "") -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr, requires_grad=False, name=name)


def param(data, name: str = "") -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return const(np.full(like.data.shape, float(x), dtype=like.data.dtype))


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: ops run forward-only (no graph recorded)."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


def _node(data, parents, name) -> Tensor:
    req = _GRAD_ENABLED[-1] and any(p.requires_grad for p, _ in parents)
    return Tensor(data, requires_grad=req, parents=tuple(parents) if req else (), name=name)


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.data.ndim == 2 and b.data.ndim == 2 and a.data.shape[1] == b.data.shape[0],
             "matmul", a.data.shape, b.data.shape)
    out = a.data @ b.data
    return _node(out, ((a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)), "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    # exact shapes, or b a bias vector added over rows of a 2-D a
    if a.data.shape == b.data.shape:
        out = a.data + b.data
        return _node(out, ((a, lambda g: g), (b, lambda g: g)), "add")
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        out = a.data + b.data
        dt = a.data.dtype
        return _node(out, ((a, lambda g: g),
                           (b, lambda g: g.sum(axis=0, dtype=np.float64).astype(dt))), "add")
    raise ShapeMismatch(f"add: incompatible shapes {a.data.shape} {b.data.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require(a.data.shape == b.data.shape, "sub", a.data.shape, b.data.shape)
    return _node(a.data - b.data, ((a, lambda g: g), (b, lambda g: -g)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.data.shape == b.data.shape, "mul", a.data.shape, b.data.shape)
    return _node(a.data * b.data, ((a, lambda g: g * b.data), (b, lambda g: g * a.data)), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _require(a.data.shape == b.data.shape, "div", a.data.shape, b.data.shape)
    out = a.data / b.data
    return _node(out, ((a, lambda g: g / b.data),
                       (b, lambda g: -g * a.data / (b.data * b.data))), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * np.asarray(c, dtype=a.data.dtype),
                 ((a, lambda g: g * np.asarray(c, dtype=g.dtype)),), "scale")


def add_const(a: Tensor, c: float) -> Tensor:
    return _node(a.data + np.asarray(float(c), dtype=a.data.dtype),
                 ((a, lambda g: g),), "add_const")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    _require(len(parts) > 0, "concat")
    nd = parts[0].data.ndim
    for p in parts:
        _require(p.data.ndim == nd, "concat", p.data.shape, parts[0].data.shape)
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])
    parents = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def grad_fn(g, lo=lo, hi=hi):
            sl = [slice(None)] * nd
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        parents.append((p, grad_fn))
    return _node(out, parents, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    key = tuple(sl)
    out = a.data[key].copy()

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return full

    return _node(out, ((a, grad_fn),), "slice")


def gather_rows(w: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``w[idx]``; used for embedding tables."""
    idx = np.asarray(idx)
    _require(w.data.ndim == 2 and idx.ndim == 1, "gather_rows", w.data.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= w.data.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table of {w.data.shape[0]} rows")
    out = w.data[idx]

    def grad_fn(g):
        full = np.zeros_like(w.data)
        np.add.at(full, idx, g)
        return full

    return _node(out, ((w, grad_fn),), "gather_rows")


def pick(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row element pick ``out[i] = a[i, idx[i]]``; used for cross-entropy."""
    idx = np.asarray(idx)
    _require(a.data.ndim == 2 and idx.shape == (a.data.shape[0],), "pick",
             a.data.shape, idx.shape)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx].copy()

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return full

    return _node(out, ((a, grad_fn),), "pick")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    out = out.astype(a.data.dtype)
    return _node(out, ((a, lambda g: g * out * (1.0 - out)),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, ((a, lambda g: g * (1.0 - out * out)),), "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, ((a, lambda g: g * out),), "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _node(out, ((a, lambda g: g / a.data),), "log")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, ((a, lambda g: g * (2.0 * a.data)),), "square")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(a.data.dtype)
    return _node(out, ((a, lambda g: g * inside),), "clip")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(a.data.dtype)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _node(out, ((a, grad_fn),), "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = (z - lse).astype(a.data.dtype)
    sm = np.exp(out)

    def grad_fn(g):
        return g - sm * g.sum(axis=axis, keepdims=True)

    return _node(out, ((a, grad_fn),), "log_softmax")


def tsum(a: Tensor) -> Tensor:
    """Full reduction to a scalar; accumulates in float64."""
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    return _node(out, ((a, lambda g: np.full_like(a.data, g)),), "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.data.dtype)
    return _node(out, ((a, lambda g: np.full_like(a.data, g / n)),), "mean")


def dropout_apply(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by an externally supplied mask (entries 0 or 1/(1-p)).

    The mask is a plain array, not a Tensor: no gradient flows into it, and
    the supplier decides whether masks are reused across time steps
    (variational) or resampled per step (naive).
    """
    mask = np.asarray(mask, dtype=a.data.dtype)
    _require(mask.shape == a.data.shape, "dropout_apply", a.data.shape, mask.shape)
    return _node(a.data * mask, ((a, lambda g: g * mask),), "dropout")


def blend_rows(new: Tensor, old: Tensor, keep: np.ndarray) -> Tensor:
    """Per-row convex select: row i of output is ``new`` where keep[i]=1, else ``old``.

    Used to carry recurrent state through padded positions unchanged.
    """
    _require(new.data.shape == old.data.shape and new.data.ndim == 2, "blend_rows",
             new.data.shape, old.data.shape)
    k = np.asarray(keep, dtype=new.data.dtype).reshape(-1, 1)
    _require(k.shape[0] == new.data.shape[0], "blend_rows", new.data.shape, keep.shape)
    out = new.data * k + old.data * (1.0 - k)
    return _node(out, ((new, lambda g: g * k), (old, lambda g: g * (1.0 - k))), "blend_rows")


def lstm_gates(pre: Tensor, c_prev: Tensor) -> Tensor:
    """Fused LSTM gate elementwise step (kernel-backed).

    pre is the (N, 4H) preactivation [i | f | g | o] and c_prev the (N, H)
    previous cell state; returns (N, 2H) = [h' | c'].
    """
    _require(pre.data.ndim == 2 and pre.data.shape[1] % 4 == 0, "lstm_gates",
             pre.data.shape)
    h = pre.data.shape[1] // 4
    _require(c_prev.data.shape == (pre.data.shape[0], h), "lstm_gates",
             pre.data.shape, c_prev.data.shape)
    pre_c = np.ascontiguousarray(pre.data)
    cp_c = np.ascontiguousarray(c_prev.data)
    hc, act = kernels.cell_forward(pre_c, cp_c)
    c_new = np.ascontiguousarray(hc[:, h:])
    slot: list = [None, None]  # one kernel call serves both parent grads

    def _bwd(g):
        if slot[0] is not g:
            slot[0] = g
            slot[1] = kernels.cell_backward(np.ascontiguousarray(g), act, cp_c, c_new)
        return slot[1]

    return _node(hc, ((pre, lambda g: _bwd(g)[0]), (c_prev, lambda g: _bwd(g)[1])),
                 "lstm_gates")


# ---------------------------------------------------------------------------
# backward


def _topo(root: Tensor) -> list[Tensor]:
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents before children


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss, keyed by ``id`` of the target tensors.

    With ``wrt`` given, propagation is restricted to the subgraph between
    those tensors and the loss (used for per-task gradient norms). Targets
    not reachable from the loss get zero gradients.
    """
    if loss.data.shape != ():
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
    order = _topo(loss)  # parents before children
    if wrt is None:
        targets = [t for t in order if t.requires_grad and not t.parents and t is not loss]
    else:
        targets = list(wrt)
    target_ids = {id(t) for t in targets}

    # a node is "live" if gradient flowing into it can still reach a target
    live: set[int] = set(target_ids)
    for node in order:
        if id(node) in live:
            continue
        for parent, _ in node.parents:
            if id(parent) in live:
                live.add(id(node))
                break

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if id(node) not in target_ids else grads.get(id(node))
        if g is None:
            continue
        for parent, fn in node.parents:
            if not parent.requires_grad or id(parent) not in live:
                continue
            contrib = fn(g)
            prev = grads.get(id(parent))
            if prev is None:
                grads[id(parent)] = contrib
            else:
                grads[id(parent)] = prev + contrib
    out = {}
    for t in targets:
        g = grads.get(id(t))
        out[id(t)] = g if g is not None else np.zeros_like(t.data)
    return out


def grad_norm(grads: dict[int, np.ndarray]) -> float:
    """Global L2 norm over a gradient dict (64-bit accumulation)."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


class GradCheckReport:
    """Per-parameter max relative error of AD gradients vs central differences."""

    def __init__(self, errors: dict[str, float], tolerance: float):
        self.errors = errors
        self.tolerance = tolerance

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __repr__(self):
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return (f"<grad_check max_rel_err={self.max_error:.3g} "
                f"worst={worst} passed={self.passed}>")


def grad_check(build: Callable[[], Tensor], params: dict[str, Tensor],
               eps: float = 1e-3, tolerance: float = 1e-4,
               max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Check AD gradients of ``build()`` against central finite differences.

    ``build`` must be deterministic (fix all masks and noise draws outside).
    Parameters should be float64 so the whole graph evaluates in 64-bit
    shadow mode; ``eps`` perturbs one coordinate at a time.
    """
    loss = build()
    grads = backward(loss, wrt=list(params.values()))
    errors: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        g = grads[id(p)].reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = float(build().data)
            flat[c] = orig - eps
            down = float(build().data)
            flat[c] = orig
            fd = (up - down) / (2.0 * eps)
            worst = max(worst, relative_error(float(g[c]), fd))
        errors[name] = worst
    return GradCheckReport(errors, tolerance)
