"""Dense float tensors with taped reverse-mode differentiation.

The operation set is deliberately small: exactly what the video model
needs. Matrix products (2-D and batched 3-D), row-stochastic softmax,
layer normalization, exact-erf GELU, concatenation, slicing, and a few
elementwise helpers. Storage is float32; `grad_check` re-runs a graph in
float64, where central finite differences are meaningful.

Tensors are immutable after creation except for gradient accumulation.
A Tape and the tensors recorded on it belong to one thread of execution;
independent tapes may run concurrently.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class GraphError(RuntimeError):
    """Backward-pass contract violation (non-scalar loss, reused tape...)."""


class Tensor:
    """N-dimensional float array, optionally tracked for gradients.

    `data` is row-major and never mutated by operations. `grad` is
    allocated only for leaf tensors created with `requires_grad=True`
    and is filled by `Tape.backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = "param" if (self.requires_grad and not self._from_op) else "tensor"
        return f"<{tag} shape={self.shape} dtype={self.data.dtype}>"


class Parameter(Tensor):
    """Named leaf tensor; always tracked."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


_ACTIVE = threading.local()


def _current_tape() -> "Tape | None":
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered record of executed differentiable operations.

    Entering the tape makes it the active recorder for the current
    thread. `backward` walks the record once, in reverse execution
    order, accumulating gradients into tracked leaf tensors.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._used = False

    def __enter__(self) -> "Tape":
        self._outer = _current_tape()
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.tape = self._outer

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != ():
            raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
        if self._used:
            raise GraphError("tape already replayed; record a fresh forward pass")
        self._used = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        for out, inputs, backward_fn in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for tensor, contribution in zip(inputs, backward_fn(g)):
                if contribution is None:
                    continue
                if tensor._from_op:
                    key = id(tensor)
                    if key in grads:
                        grads[key] = grads[key] + contribution
                    else:
                        grads[key] = contribution
                elif tensor.requires_grad:
                    tensor.grad += contribution


def _needs_grad(inputs: Sequence[Tensor]) -> bool:
    return any(t.requires_grad for t in inputs)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it on the active tape when tracked.

    `backward_fn(g)` must return one gradient array (or None) per input.
    Exposed so tests can construct deliberately wrong gradients.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._from_op = False
    out.requires_grad = _needs_grad(inputs)
    if out.requires_grad:
        out._from_op = True
        tape = _current_tape()
        if tape is not None:
            tape._ops.append((out, tuple(inputs), backward_fn))
    return out


def _same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} and {t.data.dtype}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor, high_precision: bool = False) -> Tensor:
    """Matrix product; supports 2-D, batched 3-D, and 2-D/3-D mixes.

    With `high_precision` the contraction runs in float64 and rounds back,
    which keeps attention mixes stable under reorderings of the summed axis.
    """
    _same_dtype(a, b)
    ashape, bshape = a.data.shape, b.data.shape
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise ShapeError(f"matmul needs 2-D or 3-D operands, got {ashape} x {bshape}")
    if ashape[-1] != bshape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ashape} x {bshape}")
    if a.ndim == 3 and b.ndim == 3 and ashape[0] != bshape[0]:
        raise ShapeError(f"matmul batch dimensions disagree: {ashape} x {bshape}")

    if high_precision and a.data.dtype == np.float32:
        data = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(np.float32)
    else:
        data = a.data @ b.data

    a_arr, b_arr = a.data, b.data

    def backward(g):
        da = db = None
        if a.requires_grad:
            da = g @ np.swapaxes(b_arr, -1, -2)
            if da.ndim > a_arr.ndim:
                da = da.sum(axis=tuple(range(da.ndim - a_arr.ndim)))
        if b.requires_grad:
            db = np.swapaxes(a_arr, -1, -2) @ g
            if db.ndim > b_arr.ndim:
                db = db.sum(axis=tuple(range(db.ndim - b_arr.ndim)))
        return da, db

    return record_op(data, (a, b), backward)


def swap_last(x: Tensor) -> Tensor:
    """Transpose the trailing two axes."""
    if x.ndim < 2:
        raise ShapeError(f"swap_last needs rank >= 2, got shape {x.data.shape}")
    data = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return record_op(data, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.data.shape
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return record_op(data, (x,), backward)


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor by index."""
    if x.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D tensor, got shape {x.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    data = x.data[idx]
    xshape = x.data.shape

    def backward(g):
        dx = np.zeros(xshape, dtype=g.dtype)
        np.add.at(dx, idx, g)
        return (dx,)

    return record_op(data, (x,), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"narrow axis {axis} out of range for shape {x.data.shape}")
    if start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] exceeds axis {axis} of shape {x.data.shape}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = np.ascontiguousarray(x.data[sl])
    xshape = x.data.shape

    def backward(g):
        dx = np.zeros(xshape, dtype=g.dtype)
        dx[sl] = g
        return (dx,)

    return record_op(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    _same_dtype(*tensors)
    if not 0 <= axis < tensors[0].ndim:
        raise ShapeError(f"concat axis {axis} out of range for rank {tensors[0].ndim}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return record_op(data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# elementwise and affine


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes disagree: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        return g if a.requires_grad else None, g if b.requires_grad else None

    return record_op(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes disagree: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        return g if a.requires_grad else None, -g if b.requires_grad else None

    return record_op(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes disagree: {a.data.shape} vs {b.data.shape}")
    a_arr, b_arr = a.data, b.data

    def backward(g):
        da = g * b_arr if a.requires_grad else None
        db = g * a_arr if b.requires_grad else None
        return da, db

    return record_op(a_arr * b_arr, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return record_op(x.data * np.asarray(s, dtype=x.data.dtype), (x,), backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the trailing dimension (the only broadcast allowed)."""
    _same_dtype(x, b)
    if b.ndim != 1 or b.data.shape[0] != x.data.shape[-1]:
        raise ShapeError(
            f"bias shape {b.data.shape} does not match trailing dim of {x.data.shape}"
        )
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dx = g if x.requires_grad else None
        db = g.sum(axis=lead) if b.requires_grad else None
        return dx, db

    return record_op(x.data + b.data, (x, b), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    data = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    xshape = x.data.shape

    def backward(g):
        return (np.full(xshape, g, dtype=g.dtype),)

    return record_op(data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x_arr = x.data
    cdf = 0.5 * (1.0 + erf(x_arr * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x_arr * x_arr) * _INV_SQRT2PI
        return (g * (cdf + x_arr * pdf).astype(g.dtype),)

    return record_op((x_arr * cdf).astype(x_arr.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# normalization


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along `axis`; rows are positive and sum to 1.

    The exponentials are accumulated in float64 so that permuting entries
    along the reduced axis cannot perturb the normalizer.
    """
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.data.shape}")
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = p.astype(x.data.dtype)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return record_op(out, (x,), backward)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax axis {axis} out of range for shape {x.data.shape}")
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = (z - lse).astype(x.data.dtype)

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record_op(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing dimension to mean 0 / variance 1, then affine."""
    _same_dtype(x, gamma, beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match trailing dim {d} of {x.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = (xhat * gamma.data + beta.data).astype(x.data.dtype)
    g_arr = gamma.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * g_arr
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = (inv * (dxhat - m1 - xhat * m2)).astype(g.dtype)
        return dx, dgamma, dbeta

    return record_op(out, (x, gamma, beta), backward)


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm.

    Raises on (near-)zero rows: cosine similarity is undefined there.
    """
    if x.ndim != 2:
        raise ShapeError(f"normalize_rows needs a 2-D tensor, got {x.data.shape}")
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    if norms.min() < 1e-12:
        raise ValueError("normalize_rows: zero-norm row, cosine similarity undefined")
    out = (x.data / norms).astype(x.data.dtype)

    def backward(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return ((g - inner * out) / norms.astype(g.dtype),)

    return record_op(out, (x,), backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v for 2-D or batched 3-D inputs."""
    d_k = k.data.shape[-1]
    if q.data.shape[-1] != d_k:
        raise ShapeError(
            f"query dim {q.data.shape} does not match key dim {k.data.shape}"
        )
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d_k))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v, high_precision=True)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Outcome of comparing analytic gradients to central differences."""

    def __init__(self, tol: float):
        self.tol = tol
        self.max_rel_error = 0.0
        self.checked = 0
        self.failures: list[tuple[str, tuple, float, float, float]] = []

    @property
    def passed(self) -> bool:
        return not self.failures

    def __repr__(self) -> str:
        status = "pass" if self.passed else f"{len(self.failures)} failures"
        return (
            f"<GradCheckReport {status}: max_rel={self.max_rel_error:.3e} "
            f"over {self.checked} coords, tol={self.tol:.1e}>"
        )


def grad_check(
    f: Callable[[dict[str, Parameter]], Tensor],
    params: dict[str, Parameter],
    step: float = 1e-6,
    tol: float = 1e-5,
    atol: float = 1e-7,
) -> GradCheckReport:
    """Check every parameter coordinate of a scalar function `f`.

    The graph is re-executed with float64 parameter clones; analytic
    gradients come from one taped backward pass and are compared against
    central differences of two forward evaluations per coordinate.
    Relative error is measured against the largest gradient magnitude in
    the whole problem, so coordinates down in the finite-difference noise
    floor do not produce spurious flags; a coordinate is flagged only if
    both its relative error exceeds `tol` and its absolute disagreement
    exceeds `atol` (central differences of a constant are pure roundoff).
    """
    params64 = {
        name: Parameter(name, p.data.astype(np.float64), dtype=np.float64)
        for name, p in params.items()
    }
    with Tape() as tape:
        loss = f(params64)
    tape.backward(loss)
    analytic = {name: p.grad.copy() for name, p in params64.items()}

    numeric: dict[str, np.ndarray] = {}
    for name, p in params64.items():
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(params64).item()
            flat[i] = orig - step
            down = f(params64).item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * step)
        numeric[name] = num

    gmax = max(
        (max(float(np.abs(analytic[n]).max()), float(np.abs(numeric[n]).max()))
         for n in params64 if analytic[n].size),
        default=0.0,
    )
    floor = max(1e-3 * gmax, 1e-8)

    report = GradCheckReport(tol)
    for name in params64:
        a, n = analytic[name], numeric[name]
        gap = np.abs(a - n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        rel = gap / denom
        report.checked += rel.size
        report.max_rel_error = max(report.max_rel_error, float(rel.max()))
        for idx in zip(*np.nonzero((rel > tol) & (gap > atol))):
            report.failures.append(
                (name, idx, float(a[idx]), float(n[idx]), float(rel[idx]))
            )
    return report
