"""Minimal reverse-mode autodiff over numpy arrays.

Float64 is the working precision for training and all gradient checks;
float32 is supported as an inference-only option. Every public op checks
its output for NaN/Inf and raises NumericError instead of letting bad
values propagate silently.
"""

from __future__ import annotations

import numpy as np


class NumericError(ArithmeticError):
    """Non-finite value produced or consumed by a public op."""


class RngState:
    """Deterministic random stream identified by (seed, counter).

    Each draw derives a fresh generator from the pair, so the sample
    sequence depends only on the seed and the number of prior calls.
    State round-trips through two integers.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def _next(self) -> np.random.Generator:
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, self.counter]))
        )
        self.counter += 1
        return rng

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._next().uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._next().normal(loc, scale, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._next().integers(low, high, size)

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)

    def __repr__(self):
        return f"RngState(seed={self.seed}, counter={self.counter})"


class Tensor:
    """Array node in a computation graph.

    Treated as immutable after construction; `grad` is the only field
    mutated (accumulated) during a backward pass. Read-only tensors may
    be shared across threads, but a graph belongs to one thread.
    """

    def __init__(self, data, requires_grad: bool = False, _ctx=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._ctx = _ctx

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar tensor")
            grad = np.ones_like(self.data)

        # Iterative topo sort; training graphs exceed the recursion limit.
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for p in node._ctx.parents:
                    if p.requires_grad:
                        stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._ctx is None or node.grad is None:
                continue
            grads = node._ctx.backward(node._ctx, node.grad)
            if not isinstance(grads, tuple):
                grads = (grads,)
            for parent, g in zip(node._ctx.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if parent._ctx is None else g
                else:
                    parent.grad = parent.grad + g

    # operator sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return Slice.apply(self, idx=idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Function:
    @classmethod
    def apply(cls, *args, **kwargs):
        ctx = cls()
        # raw scalars/arrays adopt float32 when every tensor operand is
        # float32, so inference precision survives mixed expressions
        dtypes = [a.dtype for a in args if isinstance(a, Tensor)]
        raw_dtype = (np.float32 if dtypes and all(d == np.float32 for d in dtypes)
                     else np.float64)
        ctx.parents = tuple(
            a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=raw_dtype))
            for a in args)
        ctx.saved = ()
        out_data = ctx.forward(ctx, *(p.data for p in ctx.parents), **kwargs)
        if not np.all(np.isfinite(out_data)):
            raise NumericError(f"{cls.__name__} produced a non-finite value")
        requires_grad = any(p.requires_grad for p in ctx.parents)
        return Tensor(out_data, requires_grad=requires_grad,
                      _ctx=ctx if requires_grad else None)

    def save(self, *items):
        self.saved = items

    @staticmethod
    def forward(ctx, *args, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad_out):
        raise NotImplementedError


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.saved
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.saved
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return (_unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape))


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return -g


class Pow(Function):
    @staticmethod
    def forward(ctx, a, exponent=2.0):
        ctx.save(a, exponent)
        return a ** exponent

    @staticmethod
    def backward(ctx, g):
        a, p = ctx.saved
        return g * p * a ** (p - 1.0)


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        if a.ndim == 1 and b.ndim == 1:
            return g * b, g * a
        if b.ndim == 1:
            return np.outer(g, b), a.T @ g
        if a.ndim == 1:
            return g @ b.T, np.outer(a, g)
        return g @ b.T, a.T @ g


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.maximum(a, 0.0)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return g * (a > 0)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, a):
        # two-branch form avoids exp overflow for large |a|
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return g * y * (1.0 - y)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return g * y


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return g / a


class Sqrt(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.sqrt(a)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        # derivative at 0 taken as 0 (subgradient choice) so that
        # zero-variance box estimates do not poison training steps
        (y,) = ctx.saved
        return np.where(y > 0, g / (2.0 * np.where(y > 0, y, 1.0)), 0.0)


class Abs(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.abs(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return g * np.sign(a)


class Maximum(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return np.maximum(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        take_a = a >= b
        return (_unbroadcast(g * take_a, a.shape),
                _unbroadcast(g * ~take_a, b.shape))


class Minimum(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return np.minimum(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        take_a = a <= b
        return (_unbroadcast(g * take_a, a.shape),
                _unbroadcast(g * ~take_a, b.shape))


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(a.shape, axis, keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims = ctx.saved
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()


class Mean(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(a.shape, axis, keepdims)
        return np.mean(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims = ctx.saved
        if axis is None:
            n = int(np.prod(shape))
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([shape[i] for i in axes]))
            if not keepdims:
                g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, shape).copy()


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx.save(axis, [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        axis, sizes = ctx.saved
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape=None):
        ctx.save(a.shape)
        return np.reshape(a, shape)

    @staticmethod
    def backward(ctx, g):
        (shape,) = ctx.saved
        return np.reshape(g, shape)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes=None):
        ctx.save(axes)
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g):
        (axes,) = ctx.saved
        if axes is None:
            return np.transpose(g)
        return np.transpose(g, np.argsort(axes))


class Slice(Function):
    @staticmethod
    def forward(ctx, a, idx=None):
        ctx.save(a.shape, idx)
        return a[idx].copy() if isinstance(a[idx], np.ndarray) else np.asarray(a[idx])

    @staticmethod
    def backward(ctx, g):
        shape, idx = ctx.saved
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return out


class Softmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        shifted = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / np.sum(e, axis=axis, keepdims=True)
        ctx.save(y, axis)
        return y

    @staticmethod
    def backward(ctx, g):
        y, axis = ctx.saved
        return y * (g - np.sum(g * y, axis=axis, keepdims=True))


class Conv2d(Function):
    """3x3-class strided convolution on an HWC image, weight (kh, kw, Cin, Cout)."""

    @staticmethod
    def forward(ctx, img, weight, stride=1, padding=0):
        kh, kw, cin, cout = weight.shape
        padded = np.pad(img, ((padding, padding), (padding, padding), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(0, 1))
        win = win[::stride, ::stride]            # (Ho, Wo, Cin, kh, kw)
        ho, wo = win.shape[:2]
        cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
        out = cols @ weight.reshape(kh * kw * cin, cout)
        ctx.save(img.shape, cols, weight, stride, padding)
        return out.reshape(ho, wo, cout)

    @staticmethod
    def backward(ctx, g):
        img_shape, cols, weight, stride, padding = ctx.saved
        kh, kw, cin, cout = weight.shape
        ho, wo = g.shape[:2]
        g2 = g.reshape(ho * wo, cout)
        gw = (cols.T @ g2).reshape(kh, kw, cin, cout)
        gcols = (g2 @ weight.reshape(kh * kw * cin, cout).T)
        gcols = gcols.reshape(ho, wo, kh, kw, cin)
        h, w, _ = img_shape
        gpad = np.zeros((h + 2 * padding, w + 2 * padding, cin), dtype=g.dtype)
        for ki in range(kh):
            for kj in range(kw):
                gpad[ki:ki + stride * ho:stride,
                     kj:kj + stride * wo:stride] += gcols[:, :, ki, kj]
        gimg = gpad[padding:padding + h, padding:padding + w]
        return gimg, gw


# functional surface

def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def neg(a):
    return Neg.apply(a)


def power(a, exponent):
    return Pow.apply(a, exponent=exponent)


def matmul(a, b):
    return MatMul.apply(a, b)


def relu(a):
    return Relu.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def sqrt(a):
    return Sqrt.apply(a)


def abs_(a):
    return Abs.apply(a)


def maximum(a, b):
    return Maximum.apply(a, b)


def minimum(a, b):
    return Minimum.apply(a, b)


def sum_(a, axis=None, keepdims=False):
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def reshape(a, shape):
    return Reshape.apply(a, shape=shape)


def transpose(a, axes=None):
    return Transpose.apply(a, axes=axes)


def conv2d(img, weight, stride=1, padding=0):
    return Conv2d.apply(img, weight, stride=stride, padding=padding)


def softmax(v, axis=-1):
    """Numerically stable softmax; output sums to 1 along `axis`."""
    v = as_tensor(v)
    if not np.all(np.isfinite(v.data)):
        raise NumericError("softmax received a non-finite input")
    return Softmax.apply(v, axis=axis)


def layer_norm(x, eps: float = 1e-5):
    """Normalize over the last axis to zero mean / unit variance."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    return div(centered, sqrt(add(var, eps)))


def l1_distance(a, b, axis=None):
    """Sum of absolute differences, optionally along one axis."""
    return sum_(abs_(sub(a, b)), axis=axis)


def attention(q, k, v, scale: float | None = None, key_mask=None):
    """Scaled dot-product attention: softmax(q kᵀ · scale) v.

    `key_mask`, when given, is a 0/1 vector over keys; zero entries are
    excluded from the softmax support.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    logits = mul(matmul(q, transpose(k)), scale)
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask) > 0, 0.0, -1e30)
        logits = add(logits, constant(bias))
    return matmul(Softmax.apply(logits, axis=-1), v)


def gumbel_softmax(logits, tau: float, hard: bool, rng: RngState):
    """Gumbel-softmax sample along the last axis.

    With `hard=True` the forward value is an exact one-hot vector while
    the gradient is that of the underlying soft sample (straight-through).
    Deterministic given `rng`.
    """
    if tau <= 0:
        raise ValueError(f"gumbel temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    u = rng.uniform(size=logits.shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    noise = -np.log(-np.log(u))
    y = Softmax.apply(div(add(logits, constant(noise)), tau), axis=-1)
    if not hard:
        return y
    idx = np.argmax(y.data, axis=-1)
    one_hot = np.zeros_like(y.data)
    np.put_along_axis(one_hot, np.expand_dims(idx, -1), 1.0, axis=-1)
    return add(y, constant(one_hot - y.data))


def argmax_one_hot(logits) -> Tensor:
    """Hard one-hot of the row-wise argmax, with no gradient. Inference path."""
    data = as_tensor(logits).data
    idx = np.argmax(data, axis=-1)
    one_hot = np.zeros_like(data)
    np.put_along_axis(one_hot, np.expand_dims(idx, -1), 1.0, axis=-1)
    return constant(one_hot)


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar f against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    work = Tensor(np.array(x.data, dtype=np.float64, copy=True), requires_grad=True)
    out = f(work)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("grad_check requires f to return a scalar tensor")
    out.backward()
    analytic = (work.grad if work.grad is not None
                else np.zeros_like(work.data)).copy()

    numeric = np.zeros_like(work.data)
    flat = work.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(work.data)).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(work.data)).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())
