"""Dense-tensor autodiff core.

Define-by-run reverse mode on numpy arrays: each op records a backward
closure on its output node, and ``Tensor.backward`` walks the graph once in
reverse topological order.  The graph is rebuilt on every forward pass, so
there is no persistent tape to invalidate.  Only the operations the
colorization network needs are provided; float32 is the working precision,
float64 is accepted everywhere for high-accuracy gradient checks.

Gradients accumulate additively: using a tensor in two branches, or calling
``backward`` twice without clearing, sums contributions.
"""

import numpy as np
from scipy.special import erf

from . import kernels

_grad_enabled = True

# Test hook: when set, conv2d's input gradient is deliberately corrupted so
# that gradient-check tooling can prove it catches a broken backward pass.
_conv_backward_fault = False


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(()))

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate ``grad`` on every requires_grad leaf ancestor of this scalar.

        Leaf gradients accumulate across calls; op outputs have their
        gradient buffers freed as soon as they have been propagated.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                if node.grad is not None:
                    node._backward(node.grad)
                node.grad = None  # op output: free once propagated

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def abs(self):
        return absolute(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)


def _toposort(root):
    """Iterative post-order DFS; each node appears exactly once."""
    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return topo


def _make(data, parents, backward):
    """Wrap an op result; records the closure only when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    if not isinstance(b, Tensor):
        a_t = a
        data = a.data + a.data.dtype.type(b)

        def backward(g):
            if a_t.requires_grad:
                a_t.accumulate_grad(g)

        return _make(data, (a,), backward)

    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    if not isinstance(b, Tensor):
        s = a.data.dtype.type(b)
        data = a.data * s

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g * s)

        return _make(data, (a,), backward)

    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def absolute(x):
    sign = np.sign(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * sign)

    return _make(np.abs(x.data), (x,), backward)


def square(x):
    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (2.0 * x.data))

    return _make(x.data * x.data, (x,), backward)


def sqrt(x):
    root = np.sqrt(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (0.5 / root))

    return _make(root, (x,), backward)


# -- reductions -----------------------------------------------------------


def reduce_sum(x, axis=None):
    data = x.data.sum(axis=axis)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.shape))
        else:
            x.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(data, (x,), backward)


def reduce_mean(x, axis=None):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis), 1.0 / count)


# -- shape manipulation ----------------------------------------------------


def reshape(x, shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.shape

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(old))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x, axes):
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def take(x, idx):
    """Basic slicing with gradient scatter; index regions must not repeat."""

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[idx] += g
            x.accumulate_grad(gx)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), backward)


def concat(tensors, axis):
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                t.accumulate_grad(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def concat_channels(a, b):
    """Channel-axis concatenation of two NCHW feature maps."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects NCHW tensors")
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ValueError(
                f"concat_channels {name} mismatch: {a.shape[axis]} vs {b.shape[axis]}"
            )
    return concat([a, b], axis=1)


def roll2d(x, shift, axes):
    """Toroidal roll over two axes; the gradient rolls back the other way."""
    sy, sx = shift
    ay, ax = axes

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.roll(g, (-sy, -sx), axis=(ay, ax)))

    return _make(np.roll(x.data, (sy, sx), axis=(ay, ax)), (x,), backward)


def gather_rows(table, idx):
    """Row lookup ``table[idx]``; backward scatter-adds into the table."""
    idx = np.asarray(idx)

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table.accumulate_grad(gt)

    return _make(np.ascontiguousarray(table.data[idx]), (table,), backward)


def elementwise(x, fn, dfn):
    """Differentiable elementwise op from a value function and its derivative.

    Both callables receive the raw ndarray; ``dfn`` must return the local
    derivative evaluated at the input.
    """
    deriv = None

    def backward(g):
        nonlocal deriv
        if x.requires_grad:
            if deriv is None:
                deriv = dfn(x.data)
            x.accumulate_grad(g * deriv)

    return _make(fn(x.data), (x,), backward)


# -- activations ------------------------------------------------------------

_SQRT1_2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x):
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * xd.dtype.type(_SQRT1_2)))
    data = xd * cdf

    def backward(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT_2PI)
            x.accumulate_grad(g * (cdf + xd * pdf))

    return _make(data, (x,), backward)


def leaky_relu(x, slope=0.2):
    factor = np.where(x.data > 0, x.data.dtype.type(1), x.data.dtype.type(slope))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * factor)

    return _make(x.data * factor, (x,), backward)


def tanh(x):
    data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (1.0 - data * data))

    return _make(data, (x,), backward)


def activation(x, kind):
    if kind == "gelu":
        return gelu(x)
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation kind: {kind!r}")


# -- normalization / attention math ------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Standardize over the trailing dimension, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(
            f"layer_norm parameter shape {gamma.shape}/{beta.shape} does not "
            f"match feature dim {x.shape[-1]}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xd - mu) * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gamma.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gx_hat - m1 - xhat * m2))

    return _make(data, (x, gamma, beta), backward)


def softmax(x):
    """Stable softmax over the trailing dimension."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            x.accumulate_grad(data * (g - inner))

    return _make(data, (x,), backward)


def matmul(a, b):
    """Batched matrix product over the two trailing dimensions."""
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def linear(x, w, b=None):
    """Affine map over the trailing dimension: ``x @ w.T + b``."""
    din = x.shape[-1]
    if w.shape[1] != din:
        raise ValueError(f"linear weight expects input dim {w.shape[1]}, got {din}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = x2 @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ValueError(f"linear bias shape {b.shape} does not match out dim {w.shape[0]}")
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        if x.requires_grad:
            x.accumulate_grad((g2 @ w.data).reshape(x.shape))
        if w.requires_grad:
            w.accumulate_grad(g2.T @ x2)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(*lead, w.shape[0]), parents, backward)


# -- convolution family -------------------------------------------------------


def _check_conv_shapes(x, w, b):
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got {x.data.ndim} dims")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d weight must be (Cout,Cin,kh,kw), got {w.data.ndim} dims")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"weight expects {w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"conv2d bias shape {b.shape} does not match Cout={w.shape[0]}")


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation plus bias over NCHW input; differentiable in x, w, b."""
    _check_conv_shapes(x, w, b)
    n, cin, h, win = x.shape
    cout, _, kh, kw = w.shape
    oh = kernels.numpy_backend.conv_out_size(h, kh, stride, pad)
    ow = kernels.numpy_backend.conv_out_size(win, kw, stride, pad)
    w2 = w.data.reshape(cout, cin * kh * kw)

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = x.data.reshape(n, cin, h * win)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, pad)
    out = np.matmul(w2, cols).reshape(n, cout, oh, ow)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, cout, oh * ow)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g2.sum(axis=(0, 2)))
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(gw.reshape(w.shape))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if kh == 1 and kw == 1 and stride == 1 and pad == 0:
                gx = gcols.reshape(x.shape)
            else:
                gx = kernels.col2im(gcols, x.shape, kh, kw, stride, pad)
            if _conv_backward_fault:
                gx = gx * 1.01 + 1e-3
            x.accumulate_grad(gx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def conv2d_transpose(g, w, stride, pad, out_hw):
    """Adjoint of conv2d w.r.t. its input, as a differentiable op.

    Maps patch-score gradients ``g`` (N,Cout,OH,OW) back to the conv input
    grid (N,Cin,H,W).  Used to express a critic's input gradient as a graph
    so that a gradient penalty can itself be differentiated.
    """
    n, cout, oh, ow = g.shape
    if w.shape[0] != cout:
        raise ValueError(f"conv2d_transpose weight Cout={w.shape[0]} does not match input {cout}")
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    h, win = out_hw
    w2 = w.data.reshape(cout, cin * kh * kw)
    g2 = g.data.reshape(n, cout, oh * ow)
    cols = np.matmul(w2.T, g2)
    data = kernels.col2im(cols, (n, cin, h, win), kh, kw, stride, pad)

    def backward(gr):
        dcols = kernels.im2col(gr, kh, kw, stride, pad)
        if g.requires_grad:
            g.accumulate_grad(np.matmul(w2, dcols).reshape(g.shape))
        if w.requires_grad:
            gw = np.matmul(g2, dcols.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(gw.reshape(w.shape))

    return _make(data, (g, w), backward)


def upsample2x(x):
    """Nearest-neighbor 2x upsample; backward sums each 2x2 block."""
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(data, (x,), backward)


def resize_nearest(x, out_hw):
    """Nearest-neighbor resize of an NCHW map to (H', W')."""
    n, c, h, w = x.shape
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return x
    iy = (np.arange(oh) * h // oh).astype(np.intp)
    ix = (np.arange(ow) * w // ow).astype(np.intp)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None), slice(None), iy[:, None], ix[None, :]), g)
            x.accumulate_grad(gx)

    return _make(np.ascontiguousarray(x.data[:, :, iy[:, None], ix[None, :]]), (x,), backward)


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Adam with bias correction; moment state is keyed by parameter name."""

    def __init__(self, lr, beta1=0.5, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        """Apply one update to every named parameter that holds a gradient."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {name} {p.data.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + p.data.dtype.type(self.eps))

    def state_dict(self):
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.lr = state["lr"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.t = state["t"]
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


def zero_grads(params):
    for p in params.values():
        p.zero_grad()
