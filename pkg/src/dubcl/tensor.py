"""Dense float64 tensors with reverse-mode automatic differentiation.

Graphs are define-by-run: every operation records its inputs and a closure
that propagates the output gradient back to them. `backward()` walks the
graph in reverse topological order, accumulates gradients additively into
`requires_grad` leaves, and then drops the gradient buffers of non-leaf
nodes.

All reductions use numpy's native row-major order on a single execution
context, so results are bitwise reproducible for identical inputs.
"""

from __future__ import annotations

import numpy as np

# Rows whose norm falls below this are replaced by the e_0 basis vector
# instead of dividing by ~0.
NORM_EPS = 1e-12

_normalize_fallbacks = 0


def normalize_fallback_count() -> int:
    return _normalize_fallbacks


def reset_normalize_fallback_count() -> None:
    global _normalize_fallbacks
    _normalize_fallbacks = 0


class Tensor:
    """N-d float64 array node in an autodiff graph.

    `grad` is allocated lazily and only retained on `requires_grad` leaves
    after a backward pass. Gradient accumulation is additive: two backward
    passes without `zero_grad` double the leaf gradients exactly.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph bookkeeping -------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def _accumulate_owned(self, g):
        # for gradients the caller freshly allocated and will not reuse
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    @property
    def is_leaf(self):
        return not self._prev

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from a scalar output to all requires_grad leaves."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if not node.is_leaf or not node.requires_grad:
                node.grad = None  # release intermediate buffers

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out = _node(self.data + other.data, (self, other))

        def back(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,))
        out._backward = lambda g: self._accumulate_owned(-g)
        return out

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        out = _node(self.data * other.data, (self, other))

        def back(g):
            self._accumulate_owned(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate_owned(_unbroadcast(g * self.data, other.data.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out = _node(self.data / other.data, (self, other))

        def back(g):
            self._accumulate_owned(_unbroadcast(g / other.data, self.data.shape))
            other._accumulate_owned(
                _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
            )

        out._backward = back
        return out

    def __matmul__(self, other):
        other = _wrap(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        out = _node(self.data @ other.data, (self, other))

        def back(g):
            self._accumulate_owned(g @ other.data.T)
            other._accumulate_owned(self.data.T @ g)

        out._backward = back
        return out

    def __getitem__(self, idx):
        out = _node(self.data[idx], (self,))

        def back(g):
            full = np.zeros_like(self.data)
            full[idx] += g
            self._accumulate_owned(full)

        out._backward = back
        return out

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,))
        out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out

    def transpose(self, axes=None):
        out = _node(np.transpose(self.data, axes), (self,))
        inv = None if axes is None else np.argsort(axes)
        out._backward = lambda g: self._accumulate(np.transpose(g, inv))
        return out

    @property
    def T(self):
        return self.transpose()

    # -- elementwise nonlinear ops ------------------------------------------

    def relu(self):
        out = _node(np.maximum(self.data, 0.0), (self,))
        out._backward = lambda g: self._accumulate_owned(g * (self.data > 0))
        return out

    def exp(self):
        out = _node(np.exp(self.data), (self,))
        out._backward = lambda g: self._accumulate_owned(g * out.data)
        return out

    def log(self):
        out = _node(np.log(self.data), (self,))
        out._backward = lambda g: self._accumulate_owned(g / self.data)
        return out

    def sqrt(self):
        out = _node(np.sqrt(self.data), (self,))
        out._backward = lambda g: self._accumulate_owned(g * 0.5 / out.data)
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def back(g):
            self._accumulate_owned(_expand_reduced(g, self.data.shape, axis, keepdims))

        out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else _axis_count(self.data.shape, axis)
        out = _node(self.data.mean(axis=axis, keepdims=keepdims), (self,))

        def back(g):
            self._accumulate_owned(_expand_reduced(g, self.data.shape, axis, keepdims) / count)

        out._backward = back
        return out

    def item(self):
        return float(self.data.reshape(()))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, prev):
    out = Tensor(data)
    out._prev = prev
    return out


def _toposort(root):
    order = []
    # 0 = entered, 1 = done; a node revisited while still "entered" closes a cycle
    state = {}
    stack = [(root, iter(root._prev))]
    state[id(root)] = 0
    while stack:
        node, children = stack[-1]
        advanced = False
        for child in children:
            s = state.get(id(child))
            if s == 0:
                raise RuntimeError("cycle detected in autodiff graph")
            if s is None:
                state[id(child)] = 0
                stack.append((child, iter(child._prev)))
                advanced = True
                break
        if not advanced:
            state[id(node)] = 1
            order.append(node)
            stack.pop()
    return order


def _unbroadcast(g, shape):
    """Reduce gradient `g` back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _axis_count(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


def backprop(output):
    """Run backward() and return the gradient map over requires_grad leaves."""
    grads = {}
    output.backward()
    for node in _toposort(output):
        if node.is_leaf and node.requires_grad and node.grad is not None:
            grads[id(node)] = (node, node.grad)
    return {tensor: grad for tensor, grad in grads.values()}


def concatenate(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    out._backward = back
    return out


def logsumexp(x, axis=-1, mask=None):
    """Numerically stable log-sum-exp, optionally over a 0/1-masked subset.

    `mask` is a constant array broadcastable to x; masked-out entries do not
    contribute to the sum and receive zero gradient.
    """
    x = _wrap(x)
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        shifted = np.where(mask > 0, xd, -np.inf)
    else:
        shifted = xd
    m = np.max(shifted, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(xd - m)
    if mask is not None:
        e = e * mask
    s = e.sum(axis=axis, keepdims=True)
    out_data = (m + np.log(s)).squeeze(axis=axis)
    out = _node(out_data, (x,))

    def back(g):
        softmax = e / s
        x._accumulate_owned(np.expand_dims(g, axis) * softmax)

    out._backward = back
    return out


def conv2d(x, w, stride=1, padding=0):
    """2-D convolution (cross-correlation): (N,H,W,C) * (F,kh,kw,C) -> (N,Ho,Wo,F).

    `stride` may be an int or an (sh, sw) pair. Computed by gathering kernel
    patches into a matrix and running one BLAS contraction per direction.
    """
    x = _wrap(x)
    w = _wrap(w)
    n, h, width, c = x.data.shape
    f, kh, kw, c2 = w.data.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {c2}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x.data
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output would be empty: input {h}x{width}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    sn, srow, scol, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, srow * sh, scol * sw, srow, scol, sc),
        writeable=False,
    )
    cols = np.ascontiguousarray(view).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.reshape(f, kh * kw * c)
    out = _node((cols @ wmat.T).reshape(n, ho, wo, f), (x, w))

    def back(g):
        gn = g.reshape(n * ho * wo, f)
        w._accumulate_owned((gn.T @ cols).reshape(w.data.shape))
        gcols = (gn @ wmat).reshape(n, ho, wo, kh, kw, c)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gxp[:, u : u + sh * ho : sh, v : v + sw * wo : sw, :] += gcols[:, :, :, u, v, :]
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding, :]
        x._accumulate_owned(gxp)

    out._backward = back
    return out


def l2_normalize(x, axis=1):
    """Scale rows of x to unit Euclidean norm; differentiable.

    Rows with norm below NORM_EPS are replaced by the constant e_0 basis
    vector (zero gradient) and counted in normalize_fallback_count().
    """
    global _normalize_fallbacks
    x = _wrap(x)
    norms = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    degenerate = norms < NORM_EPS
    n_bad = int(degenerate.sum())
    if n_bad == 0:
        sq = (x * x).sum(axis=axis, keepdims=True)
        return x / sq.sqrt()
    _normalize_fallbacks += n_bad
    keep = (~degenerate).astype(np.float64)
    fallback = np.zeros_like(x.data)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = 0
    fallback[tuple(sl)] = 1.0
    # degenerate rows contribute the constant fallback; keep-mask zeroes their grad
    x_safe = x * keep + Tensor(fallback * degenerate)
    sq = (x_safe * x_safe).sum(axis=axis, keepdims=True)
    return x_safe / sq.sqrt()
