"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward closure written in terms of other
Tensor ops. Running the reverse sweep with graph recording switched on
therefore yields gradients that are themselves differentiable, which is what
the critic's gradient penalty needs.

Broadcasting is limited to scalar-with-tensor in the elementwise ops; anything
else goes through :func:`broadcast_to` or the fused :func:`linear` so shape
errors stay loud.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DIST_EPS = 1e-12

_recording = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


@contextlib.contextmanager
def enable_grad():
    global _recording
    prev = _recording
    _recording = True
    try:
        yield
    finally:
        _recording = prev


def is_recording() -> bool:
    return _recording


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operators --------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None, inputs=None):
        backward(self, grad, inputs)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


# -- elementwise ----------------------------------------------------------

def _check_elementwise(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_like(g: Tensor, t: Tensor) -> Tensor:
    # undo a scalar broadcast
    if g.shape == t.shape:
        return g
    return tsum(g)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")

    def bw(g, needs):
        return (_reduce_like(g, a) if needs[0] else None,
                _reduce_like(g, b) if needs[1] else None)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")

    def bw(g, needs):
        return (_reduce_like(g, a) if needs[0] else None,
                _reduce_like(neg(g), b) if needs[1] else None)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")

    def bw(g, needs):
        return (_reduce_like(mul(g, b), a) if needs[0] else None,
                _reduce_like(mul(g, a), b) if needs[1] else None)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "div")

    def bw(g, needs):
        ga = _reduce_like(div(g, b), a) if needs[0] else None
        gb = _reduce_like(neg(div(mul(g, a), mul(b, b))), b) if needs[1] else None
        return ga, gb

    return _node(a.data / b.data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain Python number."""
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g, needs: (scale(g, c),), "scale")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _node(np.exp(a.data), (a,), None, "exp")
    if out._parents:
        out._backward = lambda g, needs: (mul(g, out),)
    return out


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g, needs: (div(g, a),), "log")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _node(np.sqrt(a.data), (a,), None, "sqrt")
    if out._parents:
        out._backward = lambda g, needs: (div(g, scale(out, 2.0)),)
    return out


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def bw(g, needs):
        if p == 1.0:
            return (g,)
        return (mul(g, scale(power(a, p - 1.0), p)),)

    return _node(a.data ** p, (a,), bw, "pow")


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g, needs: (mul(g, scale(a, 2.0)),), "square")


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))
    return _node(np.abs(a.data), (a,), lambda g, needs: (mul(g, sign),), "abs")


def relu(a: Tensor) -> Tensor:
    """max(0, a); derivative at 0 is 0."""
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _node(a.data * mask.data, (a,), lambda g, needs: (mul(g, mask),), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """max(a, slope*a) for slope in (0, 1). The derivative at exactly 0 is 1."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    a = as_tensor(a)
    factor = np.where(a.data >= 0, 1.0, slope)
    mask = Tensor(factor)
    return _node(a.data * factor, (a,), lambda g, needs: (mul(g, mask),), "leaky_relu")


# -- shape ops ------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    orig = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {orig} as {shape}") from None
    return _node(data, (a,), lambda g, needs: (reshape(g, orig),), "reshape")


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g, needs: (transpose(g),), "transpose")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, needs):
        if axis is not None and not keepdims:
            kshape = list(orig)
            kshape[axis] = 1
            g = reshape(g, kshape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(orig))
        return (broadcast_to(g, orig),)

    return _node(data, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Expand size-1 axes (or a scalar) to ``shape``; backward sums them back."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    orig = a.shape
    if a.ndim not in (0, len(shape)) or any(o not in (1, s) for o, s in zip(orig, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {orig} to {shape}")
    if orig == shape:
        return a

    def bw(g, needs):
        if len(orig) == 0:
            return (tsum(g),)
        axes = [i for i, (o, s) in enumerate(zip(orig, shape)) if o == 1 and s != 1]
        for ax in axes:
            g = tsum(g, axis=ax, keepdims=True)
        return (g,)

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), bw, "broadcast")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one part")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref) if ref else 0
    for p in parts[1:]:
        if p.ndim != len(ref) or any(i != ax and s != r for i, (s, r) in enumerate(zip(p.shape, ref))):
            shapes = [q.shape for q in parts]
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g, needs):
        return tuple(take_slice(g, ax, int(bounds[i]), int(bounds[i + 1])) if needs[i] else None
                     for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=ax), parts, bw, "concat")


def take_slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    a = as_tensor(a)
    n = a.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of size {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    data = a.data[tuple(index)].copy()

    def bw(g, needs):
        pieces = []
        if start > 0:
            shp = list(a.shape)
            shp[axis] = start
            pieces.append(Tensor(np.zeros(shp)))
        pieces.append(g)
        if stop < n:
            shp = list(a.shape)
            shp[axis] = n - stop
            pieces.append(Tensor(np.zeros(shp)))
        return (concat(pieces, axis),)

    return _node(data, (a,), bw, "slice")


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def bw(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w.T + b`` for x[B, in], w[out, in], b[out]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")

    def bw(g, needs):
        gx = matmul(g, w) if needs[0] else None
        gw = matmul(transpose(g), x) if needs[1] else None
        gb = tsum(g, axis=0) if needs[2] else None
        return gx, gw, gb

    return _node(x.data @ w.data.T + b.data, (x, w, b), bw, "linear")


# -- distances and norms --------------------------------------------------

def euclidean_distance(u: Tensor, v: Tensor) -> Tensor:
    """sqrt(sum((u - v)^2) + 1e-12) as a scalar."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"euclidean_distance: shape mismatch {u.shape} vs {v.shape}")
    return sqrt(tsum(square(sub(u, v))) + DIST_EPS)


def row_distance(u: Tensor, v: Tensor) -> Tensor:
    """Per-row Euclidean distance of two [B, n] batches, shape [B]."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 2:
        raise ShapeError(f"row_distance: need equal [B, n] shapes, got {u.shape} and {v.shape}")
    return sqrt(tsum(square(sub(u, v)), axis=1) + DIST_EPS)


def row_norm(u: Tensor) -> Tensor:
    u = as_tensor(u)
    if u.ndim != 2:
        raise ShapeError(f"row_norm: need [B, n], got {u.shape}")
    return sqrt(tsum(square(u), axis=1) + DIST_EPS)


def l1(t: Tensor) -> Tensor:
    return tsum(absolute(t))


def l2(t: Tensor) -> Tensor:
    return sqrt(tsum(square(t)) + DIST_EPS)


def l2_squared(t: Tensor) -> Tensor:
    return tsum(square(t))


def logsumexp_rows(logits: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a [B, C] matrix using the max-shift form."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logsumexp_rows: need [B, C], got {logits.shape}")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = sub(logits, broadcast_to(shift, logits.shape))
    return add(log(tsum(exp(shifted), axis=1)), reshape(shift, (logits.shape[0],)))


# -- reverse sweep --------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def _sweep(root: Tensor, seed: Tensor, targets: Iterable[Tensor] | None) -> dict[int, tuple[Tensor, Tensor]]:
    order = _topo_order(root)
    if targets is None:
        relevant = {id(n) for n in order}
    else:
        relevant = {id(t) for t in targets}
        for node in order:
            if any(id(p) in relevant for p in node._parents):
                relevant.add(id(node))
    grads: dict[int, tuple[Tensor, Tensor]] = {id(root): (root, seed)}
    for node in reversed(order):
        entry = grads.get(id(node))
        if entry is None or node._backward is None:
            continue
        g = entry[1]
        needs = tuple(p.requires_grad and id(p) in relevant for p in node._parents)
        if not any(needs):
            continue
        for p, pg in zip(node._parents, node._backward(g, needs)):
            if pg is None or id(p) not in relevant:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = (p, pg if prev is None else add(prev[1], pg))
    return grads


def backward(root: Tensor, grad=None, inputs: Sequence[Tensor] | None = None):
    """Accumulate d(root)/d(node) into ``.grad`` of every node that requires grad.

    With ``inputs`` only those tensors (and the paths leading to them) are
    visited. Repeated calls accumulate; call ``zero_grad`` on parameters to reset.
    """
    if grad is None:
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        seed = Tensor(np.ones(root.shape))
    else:
        seed = as_tensor(grad)
        if seed.shape != root.shape:
            raise ShapeError(f"backward: grad shape {seed.shape} != root shape {root.shape}")
    if not root.requires_grad:
        return
    with no_grad():
        grads = _sweep(root, seed, inputs)
    for node, g in grads.values():
        if node.grad is None:
            node.grad = g.data.copy()
        else:
            node.grad = node.grad + g.data


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None,
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``output`` with respect to ``inputs`` returned as Tensors.

    With ``create_graph`` the returned gradients are recorded on the graph and
    can be differentiated again. ``.grad`` fields are not touched.
    """
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"grad needs a scalar output or grad_output, got shape {output.shape}")
        seed = Tensor(np.ones(output.shape))
    else:
        seed = as_tensor(grad_output)
    if create_graph:
        with enable_grad():
            grads = _sweep(output, seed, inputs)
    else:
        with no_grad():
            grads = _sweep(output, seed, inputs)
    result = []
    for t in inputs:
        entry = grads.get(id(t))
        result.append(entry[1] if entry is not None else Tensor(np.zeros(t.shape)))
    return result


def grad_wrt_input(fn: Callable[[Tensor], Tensor], x: Tensor,
                   create_graph: bool = True) -> Tensor:
    """Gradient of a per-row scalar function with respect to its batch input.

    ``fn`` maps x[B, n] to a [B] or [B, 1] tensor; rows must not interact.
    """
    out = fn(x)
    batch = x.shape[0]
    if out.shape not in ((batch,), (batch, 1)):
        raise ShapeError(f"expected one scalar per row ({batch},) or ({batch}, 1), got {out.shape}")
    (g,) = grad(out, [x], grad_output=np.ones(out.shape), create_graph=create_graph)
    return g


# -- numerical checks -----------------------------------------------------

def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    grad_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad_flat[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences over ``params``."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        analytic = analytic.copy()

        # evaluated with recording on: losses that differentiate internally need it
        numeric = numerical_gradient(lambda: loss_fn().item(), p.data, h)
        worst = max(worst, relative_error(analytic, numeric))
    for p in params:
        p.grad = None
    return worst
