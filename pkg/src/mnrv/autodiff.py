"""Dense tensors with reverse-mode automatic differentiation.

Feature maps are single images laid out (C, H, W); parameter vectors are 1-D;
losses are 0-d scalars. Batching is done by the caller (loop + mean), so no
op here carries a batch axis. The default precision is float32; gradient
checks switch the whole module to float64 via `using_dtype`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily change the dtype given to newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus the bookkeeping needed to run a backward pass.

    `grad` accumulates across backward calls until `zero_grad` is called,
    which is what lets the trainer average gradients over a frame batch.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ---------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(t) into `t.grad` for every tensor in the graph.

        Only defined for scalars. Each call adds this graph's contribution,
        so two backwards on the same loss double the gradients.
        """
        if self.data.ndim != 0:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        order = _toposort(self)
        flight: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = flight.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                # 0-d results come back as immutable numpy scalars; flight
                # entries must be writable arrays so += lands in the dict.
                pg = np.asarray(pg)
                acc = flight.get(id(parent))
                if acc is None:
                    flight[id(parent)] = pg.copy() if _is_view(pg) else pg
                else:
                    acc += pg

    # -- operator sugar ----------------------------------------------------

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

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._grad_fn is not None


def _is_view(a: np.ndarray) -> bool:
    return a.base is not None or not a.flags.writeable


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; recursion would overflow on deep elementwise chains.
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=dtype)
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._grad_fn = None
    return t


def _result(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(_needs_grad(p) for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(a.data / b.data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p) -> Tensor:
    p = float(p)

    def grad_fn(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _result(np.power(a.data, p), (a,), grad_fn)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def grad_fn(g):
        return (g / (2.0 * y),)

    return _result(y, (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def absolute(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (g * (a.data > 0),)

    return _result(np.maximum(a.data, 0), (a,), grad_fn)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))  # always <= 1, no overflow on either tail
    y = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    y = y.astype(x.dtype, copy=False)

    def grad_fn(g):
        return (g * y * (1.0 - y),)

    return _result(y, (a,), grad_fn)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh formulation (fused single node)."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)
    y = y.astype(x.dtype, copy=False)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * dy,)

    return _result(y, (a,), grad_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(y), (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), grad_fn)


# -- structured ops ---------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over a single image.

    x: (C_in, H, W); weight: (C_out, C_in/groups, k, k); bias: (C_out,).
    Output spatial size is floor((H + 2*padding - k) / stride) + 1.
    """
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be non-negative, got {padding}")
    if x.ndim != 3 or weight.ndim != 4:
        raise ConfigError(
            f"conv2d expects (C,H,W) input and (O,I,k,k) weight, "
            f"got {x.shape} and {weight.shape}"
        )
    cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if kh != kw:
        raise ConfigError(f"only square kernels supported, got {kh}x{kw}")
    k = kh
    if cin % groups or cout % groups:
        raise ConfigError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cin_g * groups != cin:
        raise ConfigError(
            f"weight expects {cin_g * groups} input channels, input has {cin}"
        )
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ConfigError(f"kernel {k} larger than padded input {h}x{w}+{padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    if k == 1 and stride == 1 and padding == 0 and groups == 1:
        return _conv2d_pointwise(x, weight, bias, ho, wo)

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    s0, s1, s2 = xp.strides
    win = as_strided(xp, (cin, k, k, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride))
    cols = np.ascontiguousarray(win).reshape(groups, cin_g * k * k, ho * wo)
    wg = weight.data.reshape(groups, cout // groups, cin_g * k * k)
    out = np.matmul(wg, cols).reshape(cout, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None]

    def grad_fn(g):
        go = g.reshape(groups, cout // groups, ho * wo)
        gw = np.matmul(go, cols.transpose(0, 2, 1)).reshape(weight.shape)
        gcols = np.matmul(wg.transpose(0, 2, 1), go)
        gwin = gcols.reshape(cin, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gwin[:, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(1, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn)


def _conv2d_pointwise(x: Tensor, weight: Tensor, bias: Tensor | None,
                      ho: int, wo: int) -> Tensor:
    # 1x1 stride-1 convs dominate the encoder blocks; skip the window build.
    cin = x.shape[0]
    cout = weight.shape[0]
    w2 = weight.data.reshape(cout, cin)
    flat = x.data.reshape(cin, ho * wo)
    out = (w2 @ flat).reshape(cout, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None]

    def grad_fn(g):
        gflat = g.reshape(cout, ho * wo)
        gx = (w2.T @ gflat).reshape(x.shape)
        gw = (gflat @ flat.T).reshape(weight.shape)
        gb = g.sum(axis=(1, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Rearrange (C*s^2, H, W) into (C, H*s, W*s); pure permutation."""
    if s < 1:
        raise ConfigError(f"upscale factor must be positive, got {s}")
    c2, h, w = x.shape
    if c2 % (s * s):
        raise ConfigError(f"channels {c2} not divisible by s^2={s * s}")
    c = c2 // (s * s)
    out = x.data.reshape(c, s, s, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * s, w * s)

    def grad_fn(g):
        return (_unshuffle_array(g, s),)

    return _result(np.ascontiguousarray(out), (x,), grad_fn)


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Inverse of pixel_shuffle: (C, H*s, W*s) back to (C*s^2, H, W)."""
    if s < 1:
        raise ConfigError(f"downscale factor must be positive, got {s}")
    c, hs, ws = x.shape
    if hs % s or ws % s:
        raise ConfigError(f"spatial dims {hs}x{ws} not divisible by s={s}")
    out = _unshuffle_array(x.data, s)

    def grad_fn(g):
        c2, h, w = g.shape
        cc = c2 // (s * s)
        back = g.reshape(cc, s, s, h, w).transpose(0, 3, 1, 4, 2).reshape(cc, h * s, w * s)
        return (np.ascontiguousarray(back),)

    return _result(out, (x,), grad_fn)


def _unshuffle_array(a: np.ndarray, s: int) -> np.ndarray:
    c, hs, ws = a.shape
    h, w = hs // s, ws // s
    out = a.reshape(c, h, s, w, s).transpose(0, 2, 4, 1, 3).reshape(c * s * s, h, w)
    return np.ascontiguousarray(out)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k*k mean pooling; trailing rows/cols that do not fill
    a window are dropped."""
    c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ConfigError(f"pool size {k} exceeds input {h}x{w}")
    win = x.data[:, :ho * k, :wo * k].reshape(c, ho, k, wo, k)
    out = win.mean(axis=(2, 4))

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        spread = np.broadcast_to(
            g[:, :, None, :, None] / (k * k), (c, ho, k, wo, k)
        ).reshape(c, ho * k, wo * k)
        gx[:, :ho * k, :wo * k] = spread
        return (gx,)

    return _result(out, (x,), grad_fn)


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor,
                        eps: float = 1e-6) -> Tensor:
    """Normalize each spatial position across channels, then scale/shift."""
    if x.ndim != 3 or gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise ConfigError(
            f"layer_norm_channels: input {x.shape} with affine "
            f"{gamma.shape}/{beta.shape}"
        )
    c = x.shape[0]
    mu = tmean(x, axis=0, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=0, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    normed = mul(centered, inv)
    return add(mul(normed, reshape(gamma, (c, 1, 1))), reshape(beta, (c, 1, 1)))


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    per_input: list[float]


def grad_check(op, input_shapes, tolerance: float = 1e-4, seed: int = 0,
               step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of `op` against central finite differences.

    `op` takes len(input_shapes) tensors and returns one tensor. Runs in
    float64 regardless of the ambient default. The loss is a fixed random
    projection of the output so every output element influences the check.
    """
    rng = np.random.default_rng(seed)
    with using_dtype(np.float64):
        inputs = [
            Tensor(rng.standard_normal(s), requires_grad=True)
            for s in input_shapes
        ]
        out = op(*inputs)
        proj = rng.standard_normal(out.shape)

        def objective() -> float:
            with no_grad():
                return float((op(*inputs).data * proj).sum())

        loss = tsum(mul(out, Tensor(proj)))
        loss.backward()

        errors = []
        for t in inputs:
            analytic = t.grad.copy()
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = objective()
                flat[i] = orig - step
                down = objective()
                flat[i] = orig
                nflat[i] = (up - down) / (2.0 * step)
            denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
            errors.append(float(np.max(np.abs(analytic - numeric) / denom)))

    worst = max(errors) if errors else 0.0
    return GradCheckReport(
        max_rel_error=worst,
        tolerance=tolerance,
        passed=worst < tolerance,
        per_input=errors,
    )
