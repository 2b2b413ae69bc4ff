"""Dense float64 tensors with reverse-mode differentiation.

Only the operations needed by the small classifiers in :mod:`spalab.models`
and by the mask expansion of the structured attack are provided.  Every
product that mixes instances keeps an explicit leading batch axis and goes
through batched ``matmul`` so that the value computed for instance ``i`` is
bit-identical no matter which other instances share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "as_tensor",
    "conv2d",
    "tconv2d",
    "conv_map",
    "tconv_map",
    "backward",
    "grad_check",
    "GradCheckReport",
]


class Tensor:
    """A node in a dynamically built compute graph.

    ``data`` is always a float64 ndarray.  ``grad`` is populated by
    :func:`backward` for every node with ``requires_grad`` set.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        _check_same_shape(self, other, "add")
        out = self.data + other.data

        def bw(g):
            return g, g

        return Tensor(out, _parents=(self, other), _backward=bw, op="add")

    def __sub__(self, other):
        other = as_tensor(other)
        _check_same_shape(self, other, "sub")

        def bw(g):
            return g, -g

        return Tensor(self.data - other.data, _parents=(self, other), _backward=bw, op="sub")

    def __mul__(self, other):
        other = as_tensor(other)
        _check_same_shape(self, other, "mul")
        a, b = self.data, other.data

        def bw(g):
            return g * b, g * a

        return Tensor(a * b, _parents=(self, other), _backward=bw, op="mul")

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: (-g,), op="neg")

    def scale(self, c: float):
        c = float(c)
        return Tensor(self.data * c, _parents=(self,), _backward=lambda g: (g * c,), op="scale")

    # shape ----------------------------------------------------------------
    def reshape(self, *shape):
        old = self.data.shape
        return Tensor(
            self.data.reshape(*shape),
            _parents=(self,),
            _backward=lambda g: (g.reshape(old),),
            op="reshape",
        )

    def expand_last(self, n: int):
        """Repeat a trailing singleton axis ``n`` times (explicit broadcast)."""
        if self.data.shape[-1] != 1:
            raise ValueError("expand_last needs a trailing axis of size 1")
        out = np.repeat(self.data, n, axis=-1)
        return Tensor(
            out,
            _parents=(self,),
            _backward=lambda g: (g.sum(axis=-1, keepdims=True),),
            op="expand_last",
        )

    def add_bias(self, b: "Tensor"):
        """``self[..., j] + b[j]`` with ``b`` a vector over the last axis."""
        b = as_tensor(b)
        if b.ndim != 1 or b.shape[0] != self.shape[-1]:
            raise ValueError(f"bias shape {b.shape} does not match {self.shape}")
        red = tuple(range(self.ndim - 1))

        def bw(g):
            return g, g.sum(axis=red)

        return Tensor(self.data + b.data, _parents=(self, b), _backward=bw, op="add_bias")

    # reductions -----------------------------------------------------------
    def sum(self):
        shape = self.data.shape

        def bw(g):
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(np.sum(self.data), _parents=(self,), _backward=bw, op="sum")

    def mean(self):
        return self.sum().scale(1.0 / max(self.size, 1))

    def sum_rows(self):
        """Sum over every axis except the leading one: ``[n, ...] -> [n]``."""
        n = self.shape[0]
        shape = self.data.shape
        out = self.data.reshape(n, -1).sum(axis=1)

        def bw(g):
            return (np.broadcast_to(g.reshape((n,) + (1,) * (len(shape) - 1)), shape).copy(),)

        return Tensor(out, _parents=(self,), _backward=bw, op="sum_rows")

    # elementwise nonlinearities --------------------------------------------
    def softplus(self):
        x = self.data
        return Tensor(
            np.logaddexp(0.0, x),
            _parents=(self,),
            _backward=lambda g: (g * expit(x),),
            op="softplus",
        )

    def relu(self):
        x = self.data
        return Tensor(
            np.maximum(x, 0.0),
            _parents=(self,),
            _backward=lambda g: (g * (x > 0),),
            op="relu",
        )

    def square(self):
        x = self.data
        return Tensor(x * x, _parents=(self,), _backward=lambda g: (2.0 * g * x,), op="square")

    def exp(self):
        y = np.exp(self.data)
        return Tensor(y, _parents=(self,), _backward=lambda g: (g * y,), op="exp")

    def log_softmax(self):
        """Row-wise log-softmax over the last axis."""
        x = self.data
        z = x - x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse
        soft = np.exp(out)

        def bw(g):
            return (g - soft * g.sum(axis=-1, keepdims=True),)

        return Tensor(out, _parents=(self,), _backward=bw, op="log_softmax")

    def pick(self, idx):
        """``out[i] = self[i, idx[i]]`` for a 2-D tensor."""
        idx = np.asarray(idx, dtype=np.intp)
        rows = np.arange(self.shape[0])
        shape = self.data.shape

        def bw(g):
            full = np.zeros(shape)
            full[rows, idx] = g
            return (full,)

        return Tensor(self.data[rows, idx], _parents=(self,), _backward=bw, op="pick")

    # layers ---------------------------------------------------------------
    def matmul(self, w: "Tensor"):
        """Per-row affine map ``[n, d] @ [d, k] -> [n, k]``.

        Evaluated as ``n`` independent products so each output row only
        depends on its own input row, bit for bit.
        """
        w = as_tensor(w)
        if self.ndim != 2 or w.ndim != 2 or self.shape[1] != w.shape[0]:
            raise ValueError(f"matmul shape mismatch {self.shape} @ {w.shape}")
        a, b = self.data, w.data
        out = np.matmul(a[:, None, :], b)[:, 0, :]

        def bw(g):
            ga = np.matmul(g[:, None, :], b.T)[:, 0, :] if self.requires_grad else None
            gb = a.T @ g if w.requires_grad else None
            return ga, gb

        return Tensor(out, _parents=(self, w), _backward=bw, op="matmul")

    def avg_pool(self, size: int = 2):
        """Non-overlapping average pooling over ``[n, h, w, c]``."""
        n, h, w, c = self.shape
        if h % size or w % size:
            raise ValueError(f"spatial dims {(h, w)} not divisible by pool size {size}")
        out = self.data.reshape(n, h // size, size, w // size, size, c).mean(axis=(2, 4))
        inv = 1.0 / (size * size)

        def bw(g):
            up = np.repeat(np.repeat(g, size, axis=1), size, axis=2)
            return (up * inv,)

        return Tensor(out, _parents=(self,), _backward=bw, op="avg_pool")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# 2-D maps: single-channel convolution and its transpose
# ---------------------------------------------------------------------------


def _kernel2d(k) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2:
        raise ValueError(f"map kernel must be 2-D, got shape {k.shape}")
    return k


def conv_map(g: np.ndarray, k, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation of ``[..., h, w]`` maps with a 2-D kernel."""
    k = _kernel2d(k)
    g = np.asarray(g, dtype=np.float64)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    kh, kw = k.shape
    h, w = g.shape[-2:]
    if kh > h or kw > w:
        raise ValueError(f"kernel {k.shape} larger than map {(h, w)}")
    win = sliding_window_view(g, (kh, kw), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    return np.einsum("...ij,ij->...", win, k)


def tconv_map(v: np.ndarray, k, stride: int = 1) -> np.ndarray:
    """Transposed convolution: stamp ``v[i, j] * k`` at ``(i*stride, j*stride)``."""
    k = _kernel2d(k)
    v = np.asarray(v, dtype=np.float64)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    kh, kw = k.shape
    a, b = v.shape[-2:]
    out = np.zeros(v.shape[:-2] + ((a - 1) * stride + kh, (b - 1) * stride + kw))
    for di in range(kh):
        for dj in range(kw):
            if k[di, dj] == 0.0:
                continue
            out[..., di : di + (a - 1) * stride + 1 : stride, dj : dj + (b - 1) * stride + 1 : stride] += (
                v * k[di, dj]
            )
    return out


# ---------------------------------------------------------------------------
# multi-channel convolution for networks: x [n, h, w, cin], k [kh, kw, cin, cout]
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    n, h, w, c = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    # win: [n, oh, ow, c, kh, kw] -> [n, oh*ow, kh*kw*c]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, oh * ow, kh * kw * c)
    return cols, oh, ow


def _conv_nn(x: Tensor, k: Tensor, stride: int) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be [n, h, w, c], got {x.shape}")
    kh, kw, cin, cout = k.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    if kh > h or kw > w:
        raise ValueError(f"kernel {(kh, kw)} larger than input {(h, w)}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride)
    wmat = k.data.reshape(kh * kw * cin, cout)
    out = np.matmul(cols, wmat).reshape(n, oh, ow, cout)

    def bw(g):
        g2 = g.reshape(n, oh * ow, cout)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(g2, wmat.T).reshape(n, oh, ow, kh, kw, cin)
            gx = np.zeros(x.shape)
            for di in range(kh):
                for dj in range(kw):
                    gx[:, di : di + (oh - 1) * stride + 1 : stride, dj : dj + (ow - 1) * stride + 1 : stride, :] += dcols[
                        :, :, :, di, dj, :
                    ]
        gk = None
        if k.requires_grad:
            gk = (cols.reshape(-1, kh * kw * cin).T @ g2.reshape(-1, cout)).reshape(k.shape)
        return gx, gk

    return Tensor(out, _parents=(x, k), _backward=bw, op="conv2d")


def conv2d(x, k, stride: int = 1):
    """Valid (no padding) convolution.

    With a 4-D kernel ``[kh, kw, cin, cout]`` this is the network layer on
    ``[n, h, w, cin]`` inputs.  With a 2-D kernel it is the single-channel map
    convolution on ``[..., h, w]``; a Tensor input stays differentiable and
    its backward is :func:`tconv2d`.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    kd = k.data if isinstance(k, Tensor) else np.asarray(k, dtype=np.float64)
    if kd.ndim == 4:
        return _conv_nn(as_tensor(x), as_tensor(k), stride)
    if kd.ndim != 2:
        raise ValueError(f"kernel must be 2-D or 4-D, got {kd.shape}")
    if not isinstance(x, Tensor):
        return conv_map(x, kd, stride)
    def bw(g):
        up = tconv_map(g, kd, stride)
        full = np.zeros(x.shape)
        full[..., : up.shape[-2], : up.shape[-1]] = up
        return (full,)

    return Tensor(conv_map(x.data, kd, stride), _parents=(x,), _backward=bw, op="conv_map")


def tconv2d(v, k, stride: int = 1):
    """Transposed convolution of ``[..., a, b]`` maps with a 2-D kernel."""
    kd = k.data if isinstance(k, Tensor) else np.asarray(k, dtype=np.float64)
    if not isinstance(v, Tensor):
        return tconv_map(v, kd, stride)
    a, b = v.shape[-2:]

    def bw(g):
        return (conv_map(g, kd, stride)[..., :a, :b],)

    return Tensor(tconv_map(v.data, kd, stride), _parents=(v,), _backward=bw, op="tconv_map")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor):
    """Propagate adjoints from a scalar ``root`` to every node requiring grad.

    Returns the list of leaves that received a gradient.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo(root)
    for node in order:
        node.grad = None
    root.grad = np.ones(root.shape)
    leaves = []
    for node in reversed(order):
        g = node.grad
        if node._backward is None:
            leaves.append(node)
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
    return leaves


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f, x, tol: float = 1e-4, step: float = 1e-5, floor: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    The error of each entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps entries whose true derivative is ~0 from being judged on pure
    rounding noise.  Only meaningful where ``f`` is smooth: at a ReLU kink the
    one-sided derivatives disagree and the report will (correctly) fail.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad.copy()
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - step
        fm = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
    return GradCheckReport(err, tol, analytic, numeric)
