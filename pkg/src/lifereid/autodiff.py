"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

Every differentiable value is a :class:`Tensor` wrapping a ``float64`` ndarray.
Operations build an implicit DAG: each result keeps references to its parent
tensors and a closure that maps the result's gradient to parent-gradient
contributions.  :func:`backward` topologically sorts that DAG from a scalar
loss and runs the closures in reverse, accumulating into ``.grad``.

Conventions
-----------
* Images and feature maps are channels-first: ``[C, H, W]`` or ``[B, C, H, W]``.
* A graph is single-use.  ``backward`` marks every visited node as consumed;
  a second backward through any part of it raises :class:`GraphStateError`.
* Kinked functions use one-sided subgradients: ``relu``/``clamp_min`` take 0
  at the kink, ``sqrt`` takes 0 at 0.  This keeps losses built from hinges
  finite and exact at their closed-form points instead of producing NaN.
* Elementwise results and all reduction outputs of at most ``_CHECK_LIMIT``
  elements are eagerly checked for NaN/Inf (a non-finite value raises
  :class:`NumericError`).  Large convolution activations are exempt for
  speed; any overflow there still surfaces at the pooled/reduced stage,
  which is always checked.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import (
    DegenerateInputError,
    DimensionError,
    GraphStateError,
    LabelError,
    NumericError,
)

_CHECK_LIMIT = 4096


def _check_finite(arr: np.ndarray, where: str) -> None:
    if arr.size <= _CHECK_LIMIT and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value produced by {where}")


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: Sequence["Tensor"], backward_fn, name: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._consumed = False
        grad_parents = tuple(p for p in parents if p.requires_grad)
        out.requires_grad = bool(grad_parents)
        if out.requires_grad:
            out._parents = grad_parents
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        _check_finite(data, name)
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            data = self.data + other.data
            a, b = self, other

            def bwd(g):
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g, b.data.shape))

            return Tensor._op(data, (self, other), bwd, "add")
        c = float(other)
        data = self.data + c
        a = self

        def bwd(g):
            a._accum(g)

        return Tensor._op(data, (self,), bwd, "add")

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bwd(g):
            a._accum(-g)

        return Tensor._op(-self.data, (self,), bwd, "neg")

    def __sub__(self, other):
        if isinstance(other, Tensor):
            data = self.data - other.data
            a, b = self, other

            def bwd(g):
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accum(-_unbroadcast(g, b.data.shape))

            return Tensor._op(data, (self, other), bwd, "sub")
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            data = self.data * other.data
            a, b = self, other

            def bwd(g):
                if a.requires_grad:
                    a._accum(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g * a.data, b.data.shape))

            return Tensor._op(data, (self, other), bwd, "mul")
        c = float(other)
        a = self

        def bwd(g):
            a._accum(g * c)

        return Tensor._op(self.data * c, (self,), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            data = self.data / other.data
            a, b = self, other

            def bwd(g):
                if a.requires_grad:
                    a._accum(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

            return Tensor._op(data, (self, other), bwd, "div")
        return self * (1.0 / float(other))

    def __rtruediv__(self, other):
        c = float(other)
        data = c / self.data
        a = self

        def bwd(g):
            a._accum(-g * c / (a.data * a.data))

        return Tensor._op(data, (self,), bwd, "rdiv")

    def __pow__(self, exponent):
        c = float(exponent)
        data = self.data ** c
        a = self

        def bwd(g):
            a._accum(g * c * a.data ** (c - 1.0))

        return Tensor._op(data, (self,), bwd, "pow")

    # -- nonlinearities -------------------------------------------------------

    def relu(self) -> "Tensor":
        data = np.maximum(self.data, 0.0)
        a = self

        def bwd(g):
            a._accum(g * (a.data > 0.0))

        return Tensor._op(data, (self,), bwd, "relu")

    def sigmoid(self) -> "Tensor":
        x = self.data
        # Two-branch form: never exponentiates a large positive argument.
        e = np.exp(-np.abs(x))
        data = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
        a = self

        def bwd(g):
            a._accum(g * data * (1.0 - data))

        return Tensor._op(data, (self,), bwd, "sigmoid")

    def exp(self) -> "Tensor":
        data = np.exp(self.data)
        a = self

        def bwd(g):
            a._accum(g * data)

        return Tensor._op(data, (self,), bwd, "exp")

    def log(self) -> "Tensor":
        data = np.log(self.data)
        a = self

        def bwd(g):
            a._accum(g / a.data)

        return Tensor._op(data, (self,), bwd, "log")

    def sqrt(self) -> "Tensor":
        data = np.sqrt(self.data)
        a = self

        def bwd(g):
            # Subgradient 0 at the origin so hinge-style losses that bottom
            # out at exactly zero distance stay differentiable in practice.
            denom = 2.0 * data
            safe = denom > 0.0
            contrib = np.zeros_like(g)
            np.divide(g, denom, out=contrib, where=safe)
            a._accum(contrib)

        return Tensor._op(data, (self,), bwd, "sqrt")

    def clamp_min(self, lo: float) -> "Tensor":
        lo = float(lo)
        data = np.maximum(self.data, lo)
        a = self

        def bwd(g):
            a._accum(g * (a.data > lo))

        return Tensor._op(data, (self,), bwd, "clamp_min")

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        a = self
        orig = self.data.shape

        def bwd(g):
            a._accum(g.reshape(orig))

        return Tensor._op(data, (self,), bwd, "reshape")

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise DimensionError("transpose expects a 2-D tensor")
        a = self

        def bwd(g):
            a._accum(g.T)

        return Tensor._op(self.data.T.copy(), (self,), bwd, "transpose")

    def take_rows(self, idx) -> "Tensor":
        idx = np.asarray(idx, dtype=np.intp)
        if idx.ndim != 1:
            raise DimensionError("take_rows expects a 1-D index array")
        if self.data.ndim < 1:
            raise DimensionError("take_rows needs at least one axis")
        if idx.size and (idx.min() < 0 or idx.max() >= self.data.shape[0]):
            raise DimensionError("row index out of range")
        data = self.data[idx]
        a = self

        def bwd(g):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)  # duplicate indices accumulate

        return Tensor._op(data, (self,), bwd, "take_rows")

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        nd = self.data.ndim
        if not -nd <= axis < nd:
            raise DimensionError("narrow axis out of range")
        axis = axis % nd
        if start < 0 or length <= 0 or start + length > self.data.shape[axis]:
            raise DimensionError("narrow window out of bounds")
        sl = [slice(None)] * nd
        sl[axis] = slice(start, start + length)
        sl = tuple(sl)
        data = self.data[sl].copy()
        a = self

        def bwd(g):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[sl] += g

        return Tensor._op(data, (self,), bwd, "narrow")

    # -- linear algebra -------------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            raise TypeError("matmul needs a Tensor operand")
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise DimensionError("matmul expects 2-D tensors")
        if self.data.shape[1] != other.data.shape[0]:
            raise DimensionError(
                f"matmul inner dims differ: {self.data.shape} @ {other.data.shape}")
        data = self.data @ other.data
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)

        return Tensor._op(data, (self, other), bwd, "matmul")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        data = np.asarray(data)
        a = self
        in_shape = self.data.shape

        def bwd(g):
            a._accum(np.broadcast_to(_restore_dims(g, in_shape, axis, keepdims), in_shape))

        return Tensor._op(data, (self,), bwd, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in _axis_tuple(axis, self.data.ndim)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))


def _axis_tuple(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _restore_dims(g: np.ndarray, in_shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if keepdims or axis is None:
        return g
    shape = list(in_shape)
    for ax in _axis_tuple(axis, len(in_shape)):
        shape[ax] = 1
    return g.reshape(shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- convolution --------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int):
    """Extract k x k patches from padded NCHW input as rows [B*OH*OW, C*k*k]."""
    bsz, ch, hp, wp = xp.shape
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (bsz, ch, oh, ow, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * oh * ow, ch * k * k)
    return cols, oh, ow


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of a channels-first image batch with a kernel bank.

    ``x`` is ``[C_in, H, W]`` (a single image) or ``[B, C_in, H, W]``;
    ``w`` is ``[C_out, C_in, k, k]`` with odd square ``k``.  Output spatial
    size is ``floor((H + 2*pad - k) / stride) + 1`` per axis.  No bias term.
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    wd = w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError("conv2d expects [B,C,H,W] input and [Cout,Cin,k,k] kernel")
    bsz, cin, h, wdt = xd.shape
    cout, cin_w, k, k2 = wd.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError("kernel must be square with odd side")
    if cin != cin_w:
        raise DimensionError(f"channel mismatch: input {cin}, kernel {cin_w}")
    if stride < 1 or pad < 0:
        raise DimensionError("stride must be >= 1 and pad >= 0")
    if h + 2 * pad < k or wdt + 2 * pad < k:
        raise DimensionError("padded input smaller than kernel")

    if pad:
        xp = np.zeros((bsz, cin, h + 2 * pad, wdt + 2 * pad))
        xp[:, :, pad:-pad, pad:-pad] = xd
    else:
        xp = xd
    cols, oh, ow = _im2col(xp, k, stride)
    wmat = wd.reshape(cout, cin * k * k).T
    flat = cols @ wmat                                # [B*OH*OW, Cout]
    data = flat.reshape(bsz, oh, ow, cout).transpose(0, 3, 1, 2)
    if single:
        data = data[0]

    a, b = x, w

    def bwd(g):
        gd = g[None] if single else g
        gflat = gd.transpose(0, 2, 3, 1).reshape(bsz * oh * ow, cout)
        if b.requires_grad:
            b._accum((gflat.T @ cols).reshape(cout, cin, k, k))
        if a.requires_grad:
            dcols = gflat @ wmat.T
            dwin = dcols.reshape(bsz, oh, ow, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros(xp.shape)
            for ki in range(k):
                hi = ki + stride * (oh - 1) + 1
                for kj in range(k):
                    wj = kj + stride * (ow - 1) + 1
                    dxp[:, :, ki:hi:stride, kj:wj:stride] += dwin[:, :, :, :, ki, kj]
            dx = dxp[:, :, pad:pad + h, pad:pad + wdt] if pad else dxp
            a._accum(dx[0] if single else dx)

    out = Tensor._op(data, (x, w), bwd, "conv2d")
    return out


# -- fused pooling / normalization / loss kernels -----------------------------


def gem_pool(x: Tensor, p: float = 3.0, eps: float = 1e-6) -> Tensor:
    """Generalized-mean pooling over the two trailing spatial axes.

    ``[C, H, W] -> [C]`` or ``[B, C, H, W] -> [B, C]``; each channel becomes
    ``(mean(max(x, eps)^p))^(1/p)``.  ``p`` is a fixed scalar >= 1.
    """
    if float(p) < 1.0:
        raise DimensionError("gem_pool needs p >= 1")
    if eps <= 0.0:
        raise DimensionError("gem_pool needs eps > 0")
    if x.data.ndim not in (3, 4):
        raise DimensionError("gem_pool expects [C,H,W] or [B,C,H,W]")
    h, wdt = x.data.shape[-2], x.data.shape[-1]
    if h == 0 or wdt == 0:
        raise DimensionError("gem_pool over empty spatial extent")
    p = float(p)
    clamped = np.maximum(x.data, eps)
    powed = clamped ** p
    pooled = powed.mean(axis=(-2, -1))
    data = pooled ** (1.0 / p)
    a = x

    def bwd(g):
        # d out/d pooled = (1/p) pooled^(1/p-1); d pooled/d x = p x^(p-1)/(HW) on x>eps
        douter = g * (1.0 / p) * pooled ** (1.0 / p - 1.0)
        dcl = douter[..., None, None] * (p / (h * wdt)) * clamped ** (p - 1.0)
        a._accum(dcl * (x.data > eps))

    return Tensor._op(data, (x,), bwd, "gem_pool")


def l2_normalize(v: Tensor) -> Tensor:
    """Scale a vector ([C]) or each row of a matrix ([B, C]) to unit L2 norm."""
    if v.data.ndim not in (1, 2):
        raise DimensionError("l2_normalize expects [C] or [B,C]")
    norms = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    if (norms == 0.0).any():
        raise DegenerateInputError("cannot normalize a zero vector")
    data = v.data / norms
    a = v

    def bwd(g):
        proj = (data * g).sum(axis=-1, keepdims=True)
        a._accum((g - data * proj) / norms)

    return Tensor._op(data, (v,), bwd, "l2_normalize")


def softmax_cross_entropy(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``[B, Z]`` logits against one-hot rows.

    Uses the max-subtraction trick; the gradient is the exact closed form
    ``(softmax - onehot) / B``.
    """
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects [B,Z] logits")
    bsz, z = logits.data.shape
    if z < 2:
        raise DimensionError("need at least two classes")
    t = np.asarray(onehot, dtype=np.float64)
    if t.shape != (bsz, z):
        raise DimensionError(f"targets shape {t.shape} != logits shape {(bsz, z)}")
    if not (np.isin(t, (0.0, 1.0)).all() and (t.sum(axis=1) == 1.0).all()):
        raise LabelError("each target row must be exactly one-hot")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    data = np.asarray(-(t * logp).sum() / bsz)
    a = logits

    def bwd(g):
        a._accum(g * (expd / denom - t) / bsz)

    return Tensor._op(data, (logits,), bwd, "softmax_cross_entropy")


# -- graph execution ----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss through its graph.

    Gradients accumulate into ``.grad`` of every reachable tensor that
    requires one.  The visited graph is marked consumed; reusing any part of
    it in a later backward raises :class:`GraphStateError`.
    """
    if loss.data.shape != ():
        raise DimensionError("backward needs a scalar loss")
    if not np.isfinite(loss.data):
        raise NumericError("loss is not finite")
    if loss._consumed:
        raise GraphStateError("backward already ran through this graph")
    if not loss.requires_grad:
        raise GraphStateError("loss does not depend on any trainable tensor")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise GraphStateError("graph shares nodes with an already-consumed graph")
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss._accum(np.ones(()))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
            node._backward = None
            node._consumed = True


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def grad_check(f, inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    Returns the worst relative error ``|a - n| / max(1, |a|, |n|)`` over every
    element of every input that requires a gradient.  ``h`` must lie in
    ``[1e-7, 1e-3]``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step size h out of the supported range [1e-7, 1e-3]")
    leaves = [t for t in inputs if t.requires_grad]
    if not leaves:
        raise ValueError("grad_check needs at least one input requiring grad")
    for t in leaves:
        t.zero_grad()
    loss = f(*inputs)
    if loss.data.shape != ():
        raise DimensionError("grad_check expects a scalar-valued function")
    backward(loss)
    analytic = [t.grad.copy() for t in leaves]

    # Numeric passes run with gradients off so no graphs get built.
    for t in leaves:
        t.requires_grad = False
    try:
        worst = 0.0
        for t, a in zip(leaves, analytic):
            flat = t.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = float(f(*inputs).data)
                flat[i] = orig - h
                lm = float(f(*inputs).data)
                flat[i] = orig
                if not (np.isfinite(lp) and np.isfinite(lm)):
                    raise NumericError("non-finite value during numeric differentiation")
                num = (lp - lm) / (2.0 * h)
                err = abs(aflat[i] - num) / max(1.0, abs(aflat[i]), abs(num))
                if err > worst:
                    worst = err
    finally:
        for t in leaves:
            t.requires_grad = True
    return worst
