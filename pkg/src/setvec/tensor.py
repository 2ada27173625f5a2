"""Dense tensors with a small reverse-mode autodiff engine.

Every primitive is a plain function that takes :class:`Tensor` inputs and
returns a new :class:`Tensor`. When any input requires a gradient, the result
remembers its parents and a closure mapping the upstream gradient to one
gradient per parent. :meth:`Tensor.backward` walks the graph in reverse
topological order.

Arrays held by a tensor are never modified by an op; callers must not mutate
them either.
"""

from __future__ import annotations

from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NumericError

DEFAULT_DTYPE = np.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every node that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(f"gradient shape {pg.shape} does not match input shape {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _topological_order(root: Tensor) -> list:
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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reduction glue
# ---------------------------------------------------------------------------


def _pair(a, b) -> tuple:
    """Promote Python scalars to the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _result(out, (x,), backward, "sqrt")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def total(x: Tensor, axis=None) -> Tensor:
    """Sum over ``axis`` (all axes when None)."""
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(total(x, axis), 1.0 / float(count))


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _result(np.array(out), (x,), backward, "take")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def colmax(x: Tensor) -> Tensor:
    """Column-wise max over rows, keeping a leading axis of length 1.

    Gradient is routed to the first row attaining the maximum.
    """
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"colmax expects a non-empty matrix, got shape {x.shape}")
    arg = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])

    def backward(g):
        full = np.zeros_like(x.data)
        full[arg, cols] = g[0]
        return (full,)

    return _result(x.data[arg, cols][None, :], (x,), backward, "colmax")


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------


def _rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` where each output row depends only on the matching row of ``a``.

    BLAS kernels may round a column differently depending on its position, and
    matrix-vector products may do the same for rows. Keeping the batch on the
    row axis of a matrix-matrix product (or using a plain per-row reduction for
    a single output column) makes results independent of where a sample sits
    in the batch.
    """
    if b.shape[1] == 1:
        return (a * b[:, 0]).sum(axis=1, keepdims=True)
    return a @ b


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Row-wise ``W @ x_k + b`` for ``x`` of shape [n, in] and ``W`` of shape [out, in]."""
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[1] or W.shape[0] != b.shape[0]:
        raise DimensionError(f"affine: x{x.shape}, W{W.shape}, b{b.shape} do not agree")

    def backward(g):
        return g @ W.data, g.T @ x.data, g.sum(axis=0)

    return _result(_rowwise_matmul(x.data, W.data.T) + b.data, (x, W, b), backward, "affine")


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1; the derivative at 0 is taken as 1."""
    neg = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, neg)
    return _result(out, (x,), lambda g: (g * np.where(x.data >= 0, 1.0, neg + 1.0),), "elu")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(v: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by max subtraction."""
    if v.data.size == 0 or v.shape[-1] == 0:
        raise DomainError("softmax of an empty vector")
    e = np.exp(v.data - v.data.max(axis=-1, keepdims=True))
    # summing in sorted order makes the normaliser independent of element order,
    # so permuting the input permutes the output bit for bit
    out = e / np.sort(e, axis=-1).sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (v,), backward, "softmax")


# convolution ---------------------------------------------------------------


def _conv_out(extent: int, k: int, stride: int) -> int:
    return (extent - k) // stride + 1


def _window(offset: int, count: int, stride: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _im2col(x: np.ndarray, ksize: tuple, stride: int) -> np.ndarray:
    """[n, c, *spatial] -> [c * prod(k), n * prod(out)] patch matrix."""
    n, c = x.shape[:2]
    out_sp = tuple(_conv_out(s, k, stride) for s, k in zip(x.shape[2:], ksize))
    cols = np.empty((c, *ksize, n, *out_sp), dtype=x.dtype)
    perm = (1, 0) + tuple(range(2, x.ndim))
    for offs in product(*(range(k) for k in ksize)):
        sl = tuple(_window(o, m, stride) for o, m in zip(offs, out_sp))
        cols[(slice(None), *offs)] = x[(slice(None), slice(None), *sl)].transpose(perm)
    return cols.reshape(c * int(np.prod(ksize)), n * int(np.prod(out_sp)))


def _col2im(cols: np.ndarray, x_shape: tuple, ksize: tuple, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch columns back to an image."""
    n, c = x_shape[:2]
    out_sp = tuple(_conv_out(s, k, stride) for s, k in zip(x_shape[2:], ksize))
    cols = cols.reshape(c, *ksize, n, *out_sp)
    x = np.zeros(x_shape, dtype=cols.dtype)
    perm = (1, 0) + tuple(range(2, len(x_shape)))
    for offs in product(*(range(k) for k in ksize)):
        sl = tuple(_window(o, m, stride) for o, m in zip(offs, out_sp))
        x[(slice(None), slice(None), *sl)] += cols[(slice(None), *offs)].transpose(perm)
    return x


def _batched(x: Tensor, spatial: int) -> tuple:
    if x.ndim == spatial + 1:
        return reshape(x, (1, *x.shape)), True
    if x.ndim == spatial + 2:
        return x, False
    raise DimensionError(f"expected {spatial + 1} or {spatial + 2} dims, got shape {x.shape}")


def _conv(x: Tensor, K: Tensor, b: Tensor, stride: int, spatial: int) -> Tensor:
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    xb, squeeze = _batched(x, spatial)
    if K.ndim != spatial + 2 or b.shape != (K.shape[0],) or K.shape[1] != xb.shape[1]:
        raise DimensionError(f"conv: x{x.shape}, K{K.shape}, b{b.shape} do not agree")
    ksize = K.shape[2:]
    if any(k > s for k, s in zip(ksize, xb.shape[2:])):
        raise DimensionError(f"kernel {ksize} larger than input {xb.shape[2:]}")
    n = xb.shape[0]
    c_out = K.shape[0]
    out_sp = tuple(_conv_out(s, k, stride) for s, k in zip(xb.shape[2:], ksize))
    cols = _im2col(xb.data, ksize, stride)
    K2 = K.data.reshape(c_out, -1)
    out = _rowwise_matmul(cols.T, K2.T).T.reshape(c_out, n, *out_sp).swapaxes(0, 1)
    out = out + b.data.reshape(1, c_out, *([1] * spatial))

    def backward(g):
        g2 = g.swapaxes(0, 1).reshape(c_out, -1)
        dx = _col2im(K2.T @ g2, xb.shape, ksize, stride)
        dK = (g2 @ cols.T).reshape(K.shape)
        db = g2.sum(axis=1)
        return dx, dK, db

    res = _result(np.ascontiguousarray(out), (xb, K, b), backward, "conv")
    return reshape(res, res.shape[1:]) if squeeze else res


def _conv_transpose(z: Tensor, K: Tensor, b: Tensor, stride: int, spatial: int, output_shape=None) -> Tensor:
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    zb, squeeze = _batched(z, spatial)
    if K.ndim != spatial + 2 or K.shape[0] != zb.shape[1] or b.shape != (K.shape[1],):
        raise DimensionError(f"conv_transpose: z{z.shape}, K{K.shape}, b{b.shape} do not agree")
    ksize = K.shape[2:]
    in_sp = zb.shape[2:]
    minimal = tuple((m - 1) * stride + k for m, k in zip(in_sp, ksize))
    out_sp = minimal if output_shape is None else tuple(output_shape)
    if len(out_sp) != spatial or any(_conv_out(o, k, stride) != m for o, k, m in zip(out_sp, ksize, in_sp)):
        raise DimensionError(f"output shape {out_sp} is not consistent with input {in_sp}, kernel {ksize}, stride {stride}")
    n = zb.shape[0]
    c_in, c_out = K.shape[:2]
    K2 = K.data.reshape(c_in, -1)
    z2 = zb.data.swapaxes(0, 1).reshape(c_in, -1)
    full_shape = (n, c_out, *out_sp)
    out = _col2im(_rowwise_matmul(z2.T, K2).T, full_shape, ksize, stride) + b.data.reshape(1, c_out, *([1] * spatial))

    def backward(g):
        gcols = _im2col(g, ksize, stride)
        dz = (K2 @ gcols).reshape(c_in, n, *in_sp).swapaxes(0, 1)
        dK = (z2 @ gcols.T).reshape(K.shape)
        db = g.sum(axis=(0, *range(2, g.ndim)))
        return np.ascontiguousarray(dz), dK, db

    res = _result(out, (zb, K, b), backward, "conv_transpose")
    return reshape(res, res.shape[1:]) if squeeze else res


def conv2d(x: Tensor, K: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation. ``x`` is [c_in, h, w] or batched [n, c_in, h, w]."""
    return _conv(x, K, b, stride, 2)


def conv3d(x: Tensor, K: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation. ``x`` is [c_in, d, h, w] or batched [n, c_in, d, h, w]."""
    return _conv(x, K, b, stride, 3)


def conv_transpose2d(z: Tensor, K: Tensor, b: Tensor, stride: int = 1, output_shape=None) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel layout [c_out, c_in, kh, kw].

    ``output_shape`` selects among the spatial sizes that map back to ``z`` under
    the forward conv; the smallest one is used by default.
    """
    return _conv_transpose(z, K, b, stride, 2, output_shape)


def conv_transpose3d(z: Tensor, K: Tensor, b: Tensor, stride: int = 1, output_shape=None) -> Tensor:
    return _conv_transpose(z, K, b, stride, 3, output_shape)


# batch normalisation -------------------------------------------------------


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Per-channel batch normalisation of ``x`` with shape [n, c, ...].

    Returns ``(y, (new_mean, new_var))``. In eval mode the running statistics
    are returned unchanged.
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise DimensionError(f"batchnorm: x{x.shape}, gamma{gamma.shape}, beta{beta.shape} do not agree")
    if x.shape[0] == 0:
        raise DomainError("batchnorm on an empty batch")
    axes = (0, *range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if not training:
        scale = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * scale.reshape(bshape)
        out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

        def backward_eval(g):
            return (g * (gamma.data * scale).reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return _result(out, (x, gamma, beta), backward_eval, "batchnorm"), (running_mean, running_var)

    count = x.data.size // x.shape[1]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        dxhat = g * gamma.data.reshape(bshape)
        dx = inv.reshape(bshape) * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    unbiased = var * count / (count - 1) if count > 1 else var
    new_mean = (1.0 - momentum) * running_mean + momentum * mu
    new_var = (1.0 - momentum) * running_var + momentum * unbiased
    return _result(out, (x, gamma, beta), backward, "batchnorm"), (new_mean, new_var)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(op: Callable[..., Tensor], inputs: Sequence, step: float = 1e-3, seed: int = 0) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    ``op`` maps tensors to a tensor; non-scalar outputs are reduced by a fixed
    random projection so the whole Jacobian is exercised. Every coordinate of
    every input is perturbed.
    """
    if step <= 0:
        raise DomainError("step must be positive")
    arrays = [np.array(np.asarray(a.data if isinstance(a, Tensor) else a), dtype=np.float64) for a in inputs]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("grad_check inputs must be finite")

    probe = None

    def scalar(values) -> Tensor:
        nonlocal probe
        out = op(*[v if isinstance(v, Tensor) else Tensor(v) for v in values])
        if probe is None:
            probe = np.random.default_rng(seed).standard_normal(out.shape)
        return total(mul(out, Tensor(probe)))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    scalar(leaves).backward()
    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += step
            minus[i][idx] -= step
            central = (scalar(plus).item() - scalar(minus).item()) / (2.0 * step)
            if not np.isfinite(central):
                raise NumericError("non-finite value during finite differencing")
            an = float(analytic[idx])
            err = abs(an - central) / max(abs(an), abs(central), 1e-8)
            worst = max(worst, err)
    return worst
