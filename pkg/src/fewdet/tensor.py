"""Minimal dense tensor with reverse-mode automatic differentiation.

Float64 everywhere, numpy-backed, single-threaded per tape. Tracked tensors
are never mutated in place; every operation builds a fresh node so a tape can
be replayed deterministically. A central-difference gradient checker lives at
the bottom as the verification oracle for everything built on top.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Incompatible operand shapes, with both shapes recorded."""

    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b) if shape_b is not None else None
        super().__init__(f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}")


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


def _broadcast_shape(op, sa, sb):
    # trailing-dimension broadcasting, numpy rules
    out = []
    for da, db in zip(reversed((1,) * (len(sb) - len(sa)) + sa),
                      reversed((1,) * (len(sa) - len(sb)) + sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(op, sa, sb)
        out.append(max(da, db))
    return tuple(reversed(out))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: operations inside build no graph (inference only)."""

    def __enter__(self):
        self._saved = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._saved
        return False


class Tensor:
    """A dense float64 array plus the graph edge needed for backprop.

    `parents` and `backward_fn` record how this value was produced;
    `backward_fn(grad_out)` returns one gradient array per parent.
    Leaf tensors (parameters, inputs) have no parents.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        """A defensive copy of the raw values."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _result(data, op, parents, backward_fn) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(op)
        if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
            return Tensor(data, True, op=op, parents=parents, backward_fn=backward_fn)
        return Tensor(data, False, op=op)

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        _broadcast_shape("add", self.shape, other.shape)
        out = self.data + other.data

        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor._result(out, "add", (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        _broadcast_shape("sub", self.shape, other.shape)
        out = self.data - other.data

        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return Tensor._result(out, "sub", (self, other), bwd)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        _broadcast_shape("mul", self.shape, other.shape)
        out = self.data * other.data
        a_data, b_data = self.data, other.data

        def bwd(g):
            return (_unbroadcast(g * b_data, self.shape),
                    _unbroadcast(g * a_data, other.shape))

        return Tensor._result(out, "mul", (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        _broadcast_shape("div", self.shape, other.shape)
        with np.errstate(all="ignore"):
            out = self.data / other.data
        a_data, b_data = self.data, other.data

        def bwd(g):
            return (_unbroadcast(g / b_data, self.shape),
                    _unbroadcast(-g * a_data / (b_data * b_data), other.shape))

        return Tensor._result(out, "div", (self, other), bwd)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        def bwd(g):
            return (-g,)

        return Tensor._result(-self.data, "neg", (self,), bwd)

    def pow(self, exponent: float) -> "Tensor":
        """Elementwise power with a constant exponent."""
        x = self.data
        with np.errstate(all="ignore"):
            out = x ** exponent

        def bwd(g):
            return (g * exponent * x ** (exponent - 1),)

        return Tensor._result(out, "pow", (self,), bwd)

    def sqrt(self) -> "Tensor":
        return self.pow(0.5)

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out = np.exp(self.data)

        def bwd(g):
            return (g * out,)

        return Tensor._result(out, "exp", (self,), bwd)

    def log(self) -> "Tensor":
        x = self.data
        with np.errstate(all="ignore"):
            out = np.log(x)

        def bwd(g):
            return (g / x,)

        return Tensor._result(out, "log", (self,), bwd)

    def abs(self) -> "Tensor":
        x = self.data

        def bwd(g):
            return (g * np.sign(x),)

        return Tensor._result(np.abs(x), "abs", (self,), bwd)

    # -- structural ops --------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        out = self.data.reshape(shape)

        def bwd(g):
            return (g.reshape(orig),)

        return Tensor._result(out, "reshape", (self,), bwd)

    def transpose(self, axes) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = self.data.transpose(axes)

        def bwd(g):
            return (g.transpose(inv),)

        return Tensor._result(out, "transpose", (self,), bwd)

    def __getitem__(self, key) -> "Tensor":
        out = self.data[key]
        shape = self.shape
        parts = key if isinstance(key, tuple) else (key,)
        fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

        def bwd(g):
            full = np.zeros(shape, dtype=np.float64)
            if fancy:
                np.add.at(full, key, g)   # fancy indices may repeat
            else:
                full[key] = g             # basic indexing never overlaps
            return (full,)

        return Tensor._result(np.array(out), "getitem", (self,), bwd)

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def bwd(g):
            # read-only broadcast views are fine: accumulation never mutates
            # a first-assigned gradient in place
            if axis is None:
                return (np.broadcast_to(g, shape),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, shape),)

        return Tensor._result(out, "sum", (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- linear algebra -----------------------------------------------------------

    def matmul(self, other) -> "Tensor":
        """Matrix product; batched when both operands share leading dims, or
        when the right-hand side is a plain 2-D matrix applied per row."""
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul", self.shape, other.shape)
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", self.shape, other.shape)
        stacked_times_matrix = a.ndim > 2 and b.ndim == 2
        if not stacked_times_matrix and (a.ndim != b.ndim
                                         or a.shape[:-2] != b.shape[:-2]):
            raise ShapeError("matmul", self.shape, other.shape)
        with np.errstate(over="ignore", invalid="ignore"):
            out = a @ b

        if stacked_times_matrix:
            def bwd(g):
                flat_a = a.reshape(-1, a.shape[-1])
                flat_g = g.reshape(-1, g.shape[-1])
                return (g @ b.T, flat_a.T @ flat_g)
        else:
            def bwd(g):
                return (g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g)

        return Tensor._result(out, "matmul", (self, other), bwd)

    __matmul__ = matmul

    # -- nonlinearities ----------------------------------------------------------

    def relu(self) -> "Tensor":
        x = self.data

        def bwd(g):
            return (g * (x > 0),)

        return Tensor._result(np.maximum(x, 0.0), "relu", (self,), bwd)

    def sigmoid(self) -> "Tensor":
        # stable split form: exp never sees a large positive argument
        x = self.data
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def bwd(g):
            return (g * out * (1.0 - out),)

        return Tensor._result(out, "sigmoid", (self,), bwd)

    def softmax(self, axis: int = -1) -> "Tensor":
        if not -self.ndim <= axis < self.ndim:
            raise ShapeError("softmax", self.shape, (axis,))
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            inner = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - inner),)

        return Tensor._result(out, "softmax", (self,), bwd)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        # max-subtraction with a detached shift: gradient is unaffected by it
        shift = self.data.max(axis=axis, keepdims=True)
        z = self - as_tensor(shift)
        return z - z.exp().sum(axis=axis, keepdims=True).log()

    def layer_norm(self, eps: float = 1e-5) -> "Tensor":
        """Normalise the last dimension to mean 0, variance 1 (no affine)."""
        x = self.data
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        out = centered * inv

        def bwd(g):
            g_mean = g.mean(axis=-1, keepdims=True)
            gy_mean = (g * out).mean(axis=-1, keepdims=True)
            return (inv * (g - g_mean - out * gy_mean),)

        return Tensor._result(out, "layer_norm", (self,), bwd)

    # -- backward --------------------------------------------------------------

    def backward(self) -> "ComputationTape":
        """Reverse accumulation from a scalar root; returns the tape used."""
        tape = ComputationTape.build(self)
        tape.run()
        return tape


def as_tensor(value) -> Tensor:
    """Wrap plain numbers/arrays as untracked constant tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("maximum", a.shape, b.shape)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def bwd(g):
        return (_unbroadcast(g * take_a, a.shape),
                _unbroadcast(g * ~take_a, b.shape))

    return Tensor._result(out, "maximum", (a, b), bwd)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a.shape, b.shape)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def bwd(g):
        return (_unbroadcast(g * take_a, a.shape),
                _unbroadcast(g * ~take_a, b.shape))

    return Tensor._result(out, "minimum", (a, b), bwd)


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    split_points = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, split_points, axis=axis))

    return Tensor._result(out, "concatenate", tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    return concatenate([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:])
                        for t in (as_tensor(t) for t in tensors)], axis=axis)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None,
            training: bool = False) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * as_tensor(mask)


class ComputationTape:
    """Topologically ordered record of one computation, reverse-replayable.

    `nodes` lists every gradient-tracked tensor reachable from the root with
    parents strictly before children. `run()` resets and re-accumulates all
    gradients, so replaying an unmodified tape is bitwise-reproducible.
    """

    def __init__(self, root: Tensor, nodes: list):
        self.root = root
        self.nodes = nodes

    @staticmethod
    def build(root: Tensor) -> "ComputationTape":
        if root.data.size != 1:
            raise ShapeError("backward", root.shape, None)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_ = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node.parents:
                stack_.append((parent, False))
        return ComputationTape(root, order)

    def run(self) -> None:
        for node in self.nodes:
            node.grad = None
        if self.root.requires_grad:
            self.root.grad = np.ones_like(self.root.data)
        # first contribution is kept by reference (it may alias or view another
        # gradient), the second adds out of place, later ones add in place
        borrowed: set[int] = set()
        for node in reversed(self.nodes):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                    borrowed.add(id(parent))
                elif id(parent) in borrowed:
                    parent.grad = parent.grad + g
                    borrowed.discard(id(parent))
                else:
                    parent.grad += g
        for node in self.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            elif id(node) in borrowed and not node.grad.flags.writeable:
                node.grad = node.grad.copy()


class GradCheckReport:
    """Outcome of one central-difference gradient comparison."""

    def __init__(self, passed, max_rel_error, rel_errors, analytic, numeric):
        self.passed = passed
        self.max_rel_error = max_rel_error
        self.rel_errors = rel_errors
        self.analytic = analytic
        self.numeric = numeric

    def __bool__(self):
        return self.passed

    def __repr__(self):
        verdict = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({verdict}, max_rel_error={self.max_rel_error:.3e})"


def finite_difference_check(f, point: np.ndarray, h: float = 1e-4,
                            tolerance: float = 1e-3,
                            small_mag: float = 1e-4,
                            abs_tolerance: float = 1e-6) -> GradCheckReport:
    """Compare the analytic gradient of `f` against central differences.

    `f` maps a parameter Tensor (built from `point`, gradient-tracked) to a
    scalar Tensor. Coordinates where both gradients are below `small_mag` in
    magnitude are judged by `abs_tolerance` instead of relative error.
    Non-determinism of `f` is detected by evaluating the value twice.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.asarray(point, dtype=np.float64)

    def value_at(v: np.ndarray) -> float:
        return float(f(Tensor(v)).data)

    if value_at(point) != value_at(point):
        raise RuntimeError("finite_difference_check: f is not deterministic")

    param = Tensor(point.copy(), requires_grad=True)
    f(param).backward()
    analytic = param.grad.reshape(-1).copy()

    flat = point.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        up = value_at(bumped.reshape(point.shape))
        bumped[i] = flat[i] - h
        down = value_at(bumped.reshape(point.shape))
        numeric[i] = (up - down) / (2.0 * h)

    rel = np.zeros_like(flat)
    for i in range(flat.size):
        a, n = analytic[i], numeric[i]
        if abs(a) < small_mag and abs(n) < small_mag:
            rel[i] = 0.0 if abs(a - n) <= abs_tolerance else np.inf
        else:
            rel[i] = abs(a - n) / max(abs(a), abs(n))
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel <= tolerance, max_rel, rel,
                           analytic.reshape(point.shape),
                           numeric.reshape(point.shape))
