"""Minimal reverse-mode automatic differentiation over numpy arrays.

The prediction pipeline is trained end to end, so every numerical stage is
written in terms of the primitives below.  Each primitive accepts plain
ndarrays or :class:`Var` nodes; with plain inputs it computes and returns
plain numpy (zero tape overhead), with at least one ``Var`` input it records
the operation so :func:`backward` can accumulate gradients later.

Complex arrays are supported.  The cotangent of a complex-valued node is the
complex array whose real/imaginary parts are the partial derivatives of the
(real, scalar) loss with respect to the node's real/imaginary parts.  Under
this convention the adjoint of a C-linear map ``y = A x`` is ``A^H``, which
is what the FFT rules below implement.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A node in the computation graph: a value plus recorded parents."""

    __slots__ = ("value", "parents")

    def __init__(self, value, parents=()):
        self.value = value
        self.parents = parents  # tuple of (Var, vjp_callable)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def dtype(self):
        return np.asarray(self.value).dtype

    def __repr__(self):
        return f"Var(shape={self.shape}, dtype={self.dtype}, nparents={len(self.parents)})"


def value_of(x):
    return x.value if isinstance(x, Var) else x


def leaf(x):
    """Wrap an array as a differentiable graph leaf."""
    return Var(np.asarray(x))


def _tracing(*xs):
    return any(isinstance(x, Var) for x in xs)


def _node(value, *pairs):
    parents = tuple((x, f) for x, f in pairs if isinstance(x, Var))
    return Var(value, parents)


def custom(value, *pairs):
    """Register a hand-written op on the tape.

    ``pairs`` are ``(input, vjp)`` tuples; each ``vjp`` maps the output
    cotangent to that input's cotangent.  Inputs that are not ``Var`` are
    treated as constants.
    """
    return _node(value, *pairs)


def _fit(grad, ref):
    """Reduce a cotangent onto the shape/realness of the input it feeds."""
    ref = np.asarray(ref)
    grad = np.asarray(grad)
    # sum out broadcast dimensions
    extra = grad.ndim - ref.ndim
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(ref.shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    if not np.iscomplexobj(ref) and np.iscomplexobj(grad):
        grad = grad.real
    return grad


def backward(root, seed=None):
    """Accumulate gradients of a scalar ``root`` into a ``{Var: grad}`` dict."""
    if not isinstance(root, Var):
        raise TypeError("backward() needs a Var root")
    if seed is None:
        if np.size(root.value) != 1:
            raise ValueError("backward() without a seed requires a scalar root")
        seed = np.ones_like(np.real(np.asarray(root.value)), dtype=float)

    # iterative topological order (graphs can be thousands of nodes deep)
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    grads = {id(root): np.asarray(seed)}
    result = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:  # leaf: report, nothing to propagate
            result[node] = g
            continue
        for parent, vjp in node.parents:
            contribution = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contribution
            else:
                grads[pid] = contribution
    return result


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not _tracing(a, b):
        return out
    return _node(out, (a, lambda g: _fit(g, av)), (b, lambda g: _fit(g, bv)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not _tracing(a, b):
        return out
    return _node(out, (a, lambda g: _fit(g, av)), (b, lambda g: _fit(-g, bv)))


def neg(a):
    av = value_of(a)
    if not _tracing(a):
        return -av
    return _node(-av, (a, lambda g: -g))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not _tracing(a, b):
        return out
    return _node(
        out,
        (a, lambda g: _fit(g * np.conj(bv), av)),
        (b, lambda g: _fit(g * np.conj(av), bv)),
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if not _tracing(a, b):
        return out
    return _node(
        out,
        (a, lambda g: _fit(g / np.conj(bv), av)),
        (b, lambda g: _fit(-g * np.conj(av / (bv * bv)), bv)),
    )


def square(a):
    av = value_of(a)
    if not _tracing(a):
        return av * av
    return _node(av * av, (a, lambda g: _fit(g * np.conj(2.0 * av), av)))


def sqrt(a):
    av = value_of(a)
    out = np.sqrt(av)
    if not _tracing(a):
        return out
    denom = np.where(out == 0.0, np.inf, 2.0 * out)
    return _node(out, (a, lambda g: g / denom))


def maximum(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.maximum(av, bv)
    if not _tracing(a, b):
        return out
    mask = av >= bv
    return _node(
        out,
        (a, lambda g: _fit(g * mask, av)),
        (b, lambda g: _fit(g * ~mask, bv)),
    )


def minimum(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.minimum(av, bv)
    if not _tracing(a, b):
        return out
    mask = av <= bv
    return _node(
        out,
        (a, lambda g: _fit(g * mask, av)),
        (b, lambda g: _fit(g * ~mask, bv)),
    )


def where(cond, a, b):
    """Select per element by a *constant* boolean mask."""
    cond = np.asarray(value_of(cond), dtype=bool)
    av, bv = value_of(a), value_of(b)
    out = np.where(cond, av, bv)
    if not _tracing(a, b):
        return out
    return _node(
        out,
        (a, lambda g: _fit(g * cond, av)),
        (b, lambda g: _fit(g * ~cond, bv)),
    )


# ---------------------------------------------------------------------------
# complex structure


def conj(a):
    av = value_of(a)
    if not _tracing(a):
        return np.conj(av)
    return _node(np.conj(av), (a, lambda g: np.conj(g)))


def real(a):
    av = value_of(a)
    if not _tracing(a):
        return np.real(av)
    return _node(np.real(av), (a, lambda g: _fit(g.astype(complex), av) if np.iscomplexobj(av) else g))


def imag(a):
    av = value_of(a)
    if not _tracing(a):
        return np.imag(av)
    return _node(np.imag(av), (a, lambda g: 1j * g))


def make_complex(re, im):
    rv, iv = value_of(re), value_of(im)
    out = rv + 1j * iv
    if not _tracing(re, im):
        return out
    return _node(
        out,
        (re, lambda g: _fit(np.real(g), rv)),
        (im, lambda g: _fit(np.imag(g), iv)),
    )


def absolute(a):
    """|a| for real or complex a."""
    av = value_of(a)
    out = np.abs(av)
    if not _tracing(a):
        return out
    safe = np.where(out == 0.0, 1.0, out)
    phase = av / safe
    return _node(out, (a, lambda g: _fit(g * phase, av)))


def angle(a):
    """atan2(Im a, Re a), zero where a == 0."""
    av = value_of(a)
    out = np.angle(av)
    if not _tracing(a):
        return out
    r2 = (av.real * av.real + av.imag * av.imag) if np.iscomplexobj(av) else av * av
    safe = np.where(r2 == 0.0, np.inf, r2)
    return _node(out, (a, lambda g: _fit(g * (1j * av) / safe, av)))


def unit_phasor(theta):
    """exp(1j * theta) for real theta."""
    tv = value_of(theta)
    out = np.exp(1j * tv)
    if not _tracing(theta):
        return out
    return _node(out, (theta, lambda g: np.imag(np.conj(out) * g)))


# ---------------------------------------------------------------------------
# reductions and shaping


def asum(a, axis=None, keepdims=False):
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not _tracing(a):
        return out

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, np.shape(av)).copy()

    return _node(out, (a, vjp))


def amax(a, axis=None, keepdims=False):
    av = value_of(a)
    out = np.max(av, axis=axis, keepdims=keepdims)
    if not _tracing(a):
        return out

    def vjp(g):
        full = np.max(av, axis=axis, keepdims=True)
        mask = av == full
        mask = mask / mask.sum(axis=axis, keepdims=True)  # split ties evenly
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return g * mask

    return _node(out, (a, vjp))


def amean(a, axis=None, keepdims=False):
    av = value_of(a)
    count = np.size(av) if axis is None else np.prod([np.shape(av)[ax] for ax in np.atleast_1d(axis)])
    return div(asum(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape):
    av = value_of(a)
    if not _tracing(a):
        return np.reshape(av, shape)
    return _node(np.reshape(av, shape), (a, lambda g: np.reshape(g, np.shape(av))))


def getitem(a, idx):
    av = value_of(a)
    if not _tracing(a):
        return av[idx]

    def vjp(g):
        out = np.zeros_like(av)
        out[idx] = g
        return out

    return _node(av[idx], (a, vjp))


def concat(parts, axis=0):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    if not _tracing(*parts):
        return out
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    pairs = []
    for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        idx = [slice(None)] * out.ndim
        idx[axis] = slice(int(lo), int(hi))
        idx = tuple(idx)
        pairs.append((part, lambda g, idx=idx: g[idx]))
    return _node(out, *pairs)


def pad2d(a, pad):
    """Zero padding of the last two axes by ``pad`` on each side."""
    av = value_of(a)
    widths = [(0, 0)] * (np.ndim(av) - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(av, widths)
    if not _tracing(a):
        return out
    sl = (Ellipsis, slice(pad, pad + np.shape(av)[-2]), slice(pad, pad + np.shape(av)[-1]))
    return _node(out, (a, lambda g: g[sl]))


# ---------------------------------------------------------------------------
# FFT (unitary up to the usual numpy 1/(N1*N2) on the inverse)


def fft2(a):
    av = value_of(a)
    out = np.fft.fft2(av)
    if not _tracing(a):
        return out
    scale = np.shape(av)[-1] * np.shape(av)[-2]
    return _node(out, (a, lambda g: _fit(scale * np.fft.ifft2(g), av)))


def ifft2(a):
    av = value_of(a)
    out = np.fft.ifft2(av)
    if not _tracing(a):
        return out
    scale = np.shape(av)[-1] * np.shape(av)[-2]
    return _node(out, (a, lambda g: _fit(np.fft.fft2(g) / scale, av)))


def fftshift2(a):
    av = value_of(a)
    out = np.fft.fftshift(av, axes=(-2, -1))
    if not _tracing(a):
        return out
    return _node(out, (a, lambda g: np.fft.ifftshift(g, axes=(-2, -1))))


def ifftshift2(a):
    av = value_of(a)
    out = np.fft.ifftshift(av, axes=(-2, -1))
    if not _tracing(a):
        return out
    return _node(out, (a, lambda g: np.fft.fftshift(g, axes=(-2, -1))))


# ---------------------------------------------------------------------------
# cell extraction / overlap-add (exact adjoints of each other)


def _extract(img, size, hop, l_u, l_v):
    view = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    return view[::hop, ::hop][:l_u, :l_v].copy()


def _scatter(cells, hop, out_shape):
    l_u, l_v, size, _ = cells.shape
    out = np.zeros(out_shape, dtype=cells.dtype)
    for u in range(l_u):
        r = u * hop
        for v in range(l_v):
            c = v * hop
            out[r : r + size, c : c + size] += cells[u, v]
    return out


def extract_cells(img, size, hop, l_u, l_v):
    """Slice a 2-D canvas into an (l_u, l_v, size, size) grid at stride hop."""
    iv = value_of(img)
    out = _extract(iv, size, hop, l_u, l_v)
    if not _tracing(img):
        return out
    return _node(out, (img, lambda g: _fit(_scatter(np.asarray(g), hop, iv.shape), iv)))


def overlap_add(cells, hop, out_shape):
    """Sum (l_u, l_v, size, size) blocks onto a canvas, block (u,v) at (u*hop, v*hop)."""
    cv = value_of(cells)
    out = _scatter(cv, hop, out_shape)
    if not _tracing(cells):
        return out
    l_u, l_v, size, _ = cv.shape
    return _node(out, (cells, lambda g: _fit(_extract(np.asarray(g), size, hop, l_u, l_v), cv)))


# ---------------------------------------------------------------------------
# convolutions (stride 1)


def _windows(x, kh, kw):
    return np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(-2, -1))


def conv2d(x, k, bias=None):
    """Multi-channel 2-D correlation with 'same' zero padding.

    x: (C_in, H, W); k: (C_out, C_in, kh, kw) with odd kh, kw; bias: (C_out,).
    """
    xv, kv = value_of(x), value_of(k)
    c_out, c_in, kh, kw = kv.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xv, ((0, 0), (ph, ph), (pw, pw)))
    win = _windows(xp, kh, kw)  # (C_in, H, W, kh, kw)
    out = np.einsum("cijuv,ocuv->oij", win, kv)
    bv = None
    if bias is not None:
        bv = value_of(bias)
        out = out + bv[:, None, None]
    if not _tracing(x, k, bias):
        return out

    def vjp_x(g):
        gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = _windows(gp, kh, kw)  # (C_out, H+2ph, W+2pw, kh, kw)
        kf = kv[:, :, ::-1, ::-1]
        gx_p = np.einsum("oijuv,ocuv->cij", gwin, kf)
        h, w = xv.shape[-2:]
        return _fit(gx_p[:, ph : ph + h, pw : pw + w], xv)

    def vjp_k(g):
        return _fit(np.einsum("oij,cijuv->ocuv", g, win), kv)

    pairs = [(x, vjp_x), (k, vjp_k)]
    if bias is not None:
        pairs.append((bias, lambda g: _fit(g.sum(axis=(-2, -1)), bv)))
    return _node(out, *pairs)


def conv2_valid(x, k):
    """Single-channel valid-mode correlation with a constant kernel k."""
    xv = value_of(x)
    k = np.asarray(value_of(k))
    kh, kw = k.shape
    win = _windows(xv, kh, kw)
    out = np.einsum("ijuv,uv->ij", win, k)
    if not _tracing(x):
        return out

    def vjp(g):
        gp = np.pad(g, ((kh - 1, kh - 1), (kw - 1, kw - 1)))
        return np.einsum("ijuv,uv->ij", _windows(gp, kh, kw), k[::-1, ::-1])

    return _node(out, (x, vjp))


# ---------------------------------------------------------------------------
# finite differences (test oracle; kept here so scripts can reuse it)


def numerical_grad(f, x, eps=1e-6):
    """Central finite differences of scalar f at real array x."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
