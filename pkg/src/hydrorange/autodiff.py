"""A small reverse-mode automatic differentiation engine on numpy arrays.

Every operation builds a node holding the forward value and a closure that
scatters the output gradient to its parents.  ``Tensor.backward`` walks the
graph in reverse topological order.  Dtypes follow the input arrays, so the
same graph code runs in float32 for training and float64 for
finite-difference checks.

Most kernels are a handful of vectorized numpy operations; the 2-D
convolution delegates its arithmetic to torch's CPU kernel (numpy in,
numpy out — used the way BLAS backs matmul).  Everything is deterministic
for fixed inputs and thread counts.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import torch
from torch.nn.functional import conv2d as torch_conv2d

from .errors import DataError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    def backward(self, seed=None):
        """Accumulate gradients into every reachable tensor with requires_grad."""
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise DataError(f"seed shape {seed.shape} does not match output {self.data.shape}")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node._backward = None  # release closures and saved activations


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _track(*tensors) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _make(data, parents, backward_builder):
    """Create a node; only wire the tape when some parent needs gradients."""
    if _track(*parents):
        out = Tensor(data, requires_grad=True, parents=parents)
        out._backward = backward_builder(out)
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise / linear algebra

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        def run(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))
        return run
    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        def run(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(-g, b.shape))
        return run
    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        ad, bd = a.data, b.data
        def run(g):
            _accum(a, _unbroadcast(g * bd, a.shape))
            _accum(b, _unbroadcast(g * ad, b.shape))
        return run
    return _make(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(out):
        return lambda g: _accum(a, g * s)
    return _make(a.data * s, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        ad, bd = a.data, b.data
        def run(g):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            _accum(a, _unbroadcast(ga, a.shape))
            _accum(b, _unbroadcast(gb, b.shape))
        return run
    return _make(a.data @ b.data, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    def bwd(out):
        mask = x.data > 0
        return lambda g: _accum(x, g * mask)
    return _make(y, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    def bwd(out):
        return lambda g: _accum(x, g * s * (1.0 - s))
    return _make(s, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * s
    def bwd(out):
        xd = x.data
        return lambda g: _accum(x, g * (s * (1.0 + xd * (1.0 - s))))
    return _make(y, (x,), bwd)


def softmax_lastaxis(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    def bwd(out):
        def run(g):
            inner = (g * s).sum(axis=-1, keepdims=True)
            _accum(x, s * (g - inner))
        return run
    return _make(s, (x,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only on training paths."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.data.dtype) / (1.0 - p)
    def bwd(out):
        return lambda g: _accum(x, g * keep)
    return _make(x.data * keep, (x,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(x: Tensor, shape) -> Tensor:
    def bwd(out):
        return lambda g: _accum(x, g.reshape(x.shape))
    return _make(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    def bwd(out):
        return lambda g: _accum(x, np.ascontiguousarray(g.transpose(inv)))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    def bwd(out):
        def run(g):
            offset = 0
            for t, n in zip(tensors, sizes):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + n)
                _accum(t, np.ascontiguousarray(g[tuple(sl)]))
                offset += n
        return run
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    def bwd(out):
        def run(g):
            gx = np.zeros_like(x.data)
            gx[sl] = g
            _accum(x, gx)
        return run
    return _make(np.ascontiguousarray(x.data[sl]), (x,), bwd)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    def bwd(out):
        return lambda g: _accum(x, np.repeat(np.expand_dims(g / n, axis), n, axis=axis))
    return _make(x.data.mean(axis=axis), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    def bwd(out):
        return lambda g: _accum(x, np.full_like(x.data, 1.0 / n) * g)
    return _make(np.asarray(x.data.mean()), (x,), bwd)


# ---------------------------------------------------------------------------
# convolution stack

def assemble_kernel33(edges: Tensor, center: Tensor) -> Tensor:
    """Combine branch-private edge weights [O, I, 5] with a (possibly
    cross-branch shared) central 2x2 window [O, I, 2, 2] into a full 3x3
    kernel.  Edge order: (0,0),(0,1),(0,2),(1,0),(2,0)."""
    o, i = edges.shape[:2]
    k = np.empty((o, i, 3, 3), dtype=edges.data.dtype)
    e = edges.data
    k[:, :, 0, 0] = e[:, :, 0]
    k[:, :, 0, 1] = e[:, :, 1]
    k[:, :, 0, 2] = e[:, :, 2]
    k[:, :, 1, 0] = e[:, :, 3]
    k[:, :, 2, 0] = e[:, :, 4]
    k[:, :, 1:, 1:] = center.data
    def bwd(out):
        def run(g):
            ge = np.stack(
                [g[:, :, 0, 0], g[:, :, 0, 1], g[:, :, 0, 2], g[:, :, 1, 0], g[:, :, 2, 0]],
                axis=-1,
            )
            _accum(edges, ge)
            _accum(center, np.ascontiguousarray(g[:, :, 1:, 1:]))
        return run
    return _make(k, (edges, center), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded 2-D convolution, stride 1, square odd kernel.

    x: [B, Cin, H, W], w: [Cout, Cin, k, k].  The arithmetic is delegated
    to torch's CPU convolution kernel (used like a BLAS routine: numpy in,
    numpy out, single call per direction); the surrounding tape, parameter
    store and optimizer stay in this engine.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DataError("conv2d expects 4-D input and kernel")
    if x.shape[1] != w.shape[1]:
        raise DataError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    pad = w.shape[2] // 2
    parents = (x, w) if b is None else (x, w, b)

    if _track(*parents):
        xt = torch.from_numpy(x.data).requires_grad_(x.requires_grad)
        wt = torch.from_numpy(w.data).requires_grad_(w.requires_grad)
        bt = None
        if b is not None:
            bt = torch.from_numpy(b.data).requires_grad_(b.requires_grad)
        yt = torch_conv2d(xt, wt, bt, padding=pad)

        def bwd(out):
            def run(g):
                leaves = [t for t in (xt, wt, bt) if t is not None and t.requires_grad]
                grads = torch.autograd.grad(
                    yt, leaves, grad_outputs=torch.from_numpy(np.ascontiguousarray(g))
                )
                grads = iter(grads)
                for tensor, leaf in ((x, xt), (w, wt), (b, bt)):
                    if leaf is not None and leaf.requires_grad:
                        _accum(tensor, next(grads).numpy())
            return run

        out = Tensor(yt.detach().numpy(), requires_grad=True, parents=parents)
        out._backward = bwd(out)
        return out

    with torch.no_grad():
        yt = torch_conv2d(
            torch.from_numpy(x.data),
            torch.from_numpy(w.data),
            None if b is None else torch.from_numpy(b.data),
            padding=pad,
        )
    return Tensor(yt.numpy())


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    Arithmetic via torch's pooling kernel, tape handled here."""
    bsz, c, h, w = x.shape
    if h < 2 or w < 2:
        raise DataError(f"cannot 2x2-pool spatial dims {(h, w)}")
    if _track(x):
        xt = torch.from_numpy(x.data).requires_grad_(True)
        yt = torch.nn.functional.max_pool2d(xt, 2)

        def bwd(out):
            def run(g):
                (gx,) = torch.autograd.grad(
                    yt, [xt], grad_outputs=torch.from_numpy(np.ascontiguousarray(g))
                )
                _accum(x, gx.numpy())
            return run

        out = Tensor(yt.detach().numpy(), requires_grad=True, parents=(x,))
        out._backward = bwd(out)
        return out
    with torch.no_grad():
        return Tensor(torch.nn.functional.max_pool2d(torch.from_numpy(x.data), 2).numpy())


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel standardization over (batch, H, W); batch statistics in
    training, running statistics in evaluation.  Running buffers are plain
    arrays that torch's kernel updates in place during training (they share
    memory with the torch views)."""
    parents = (x, gamma, beta)
    rm = torch.from_numpy(running_mean)
    rv = torch.from_numpy(running_var)
    if _track(*parents):
        xt = torch.from_numpy(x.data).requires_grad_(x.requires_grad)
        gt = torch.from_numpy(gamma.data).requires_grad_(gamma.requires_grad)
        bt = torch.from_numpy(beta.data).requires_grad_(beta.requires_grad)
        yt = torch.nn.functional.batch_norm(xt, rm, rv, gt, bt, train, momentum, eps)

        def bwd(out):
            def run(g):
                leaves = [t for t in (xt, gt, bt) if t.requires_grad]
                grads = iter(
                    torch.autograd.grad(
                        yt, leaves, grad_outputs=torch.from_numpy(np.ascontiguousarray(g))
                    )
                )
                for tensor, leaf in ((x, xt), (gamma, gt), (beta, bt)):
                    if leaf.requires_grad:
                        _accum(tensor, next(grads).numpy())
            return run

        out = Tensor(yt.detach().numpy(), requires_grad=True, parents=parents)
        out._backward = bwd(out)
        return out
    with torch.no_grad():
        yt = torch.nn.functional.batch_norm(
            torch.from_numpy(x.data),
            rm,
            rv,
            torch.from_numpy(gamma.data),
            torch.from_numpy(beta.data),
            train,
            momentum,
            eps,
        )
    return Tensor(yt.numpy())


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learnable scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gamma.data * xhat + beta.data

    def bwd(out):
        def run(g):
            axes = tuple(range(g.ndim - 1))
            _accum(gamma, (g * xhat).sum(axis=axes))
            _accum(beta, g.sum(axis=axes))
            if x.requires_grad:
                gi = g * gamma.data
                m1 = gi.mean(axis=-1, keepdims=True)
                m2 = (gi * xhat).mean(axis=-1, keepdims=True)
                _accum(x, inv * (gi - m1 - xhat * m2))
        return run

    return _make(y, (x, gamma, beta), bwd)


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded depthwise temporal convolution.

    x: [B, T, D], w: [k, D]; each feature dimension is filtered with its own
    k-tap kernel along the frame axis.
    """
    bsz, t, d = x.shape
    k = w.shape[0]
    pad = k // 2
    xp = np.zeros((bsz, t + 2 * pad, d), dtype=x.data.dtype)
    xp[:, pad : pad + t, :] = x.data
    y = np.zeros((bsz, t, d), dtype=x.data.dtype)
    for j in range(k):
        y += xp[:, j : j + t, :] * w.data[j]
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(out):
        def run(g):
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for j in range(k):
                    gw[j] = (g * xp[:, j : j + t, :]).sum(axis=(0, 1))
                _accum(w, gw)
            if b is not None and b.requires_grad:
                _accum(b, g.sum(axis=(0, 1)))
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[:, j : j + t, :] += g * w.data[j]
                _accum(x, gxp[:, pad : pad + t, :])
        return run

    return _make(y, parents, bwd)


def glu_lastaxis(x: Tensor) -> Tensor:
    """Gated linear unit: split the last axis in half, gate with a sigmoid."""
    d = x.shape[-1]
    if d % 2:
        raise DataError("GLU needs an even last axis")
    a = narrow(x, x.ndim - 1, 0, d // 2)
    g = narrow(x, x.ndim - 1, d // 2, d // 2)
    return mul(a, sigmoid(g))
