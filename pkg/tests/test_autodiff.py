"""Gradient checks for every tape primitive against central finite differences."""

import numpy as np
import pytest

from phasecast import autodiff as ad


RNG = np.random.default_rng(0)


def fd_check(build, x0, rtol=1e-5, atol=1e-7, eps=1e-6):
    """Compare tape gradients with finite differences for a real leaf.

    ``build(var)`` must return a real scalar Var.
    """
    x0 = np.asarray(x0, dtype=float)
    leaf = ad.leaf(x0.copy())
    out = build(leaf)
    assert isinstance(out, ad.Var)
    assert np.size(out.value) == 1
    grads = ad.backward(out)
    got = np.asarray(grads[leaf], dtype=float)

    want = ad.numerical_grad(lambda x: float(ad.value_of(build(ad.leaf(x)))), x0, eps=eps)
    np.testing.assert_allclose(got, want, rtol=rtol, atol=atol)


def fd_check_complex(build, z0, rtol=1e-5, atol=1e-7):
    """Same, for a complex leaf: checks d/dRe and d/dIm separately."""
    z0 = np.asarray(z0, dtype=complex)
    leaf = ad.leaf(z0.copy())
    grads = ad.backward(build(leaf))
    got = np.asarray(grads[leaf])

    packed = np.stack([z0.real, z0.imag])

    def f(p):
        return float(np.real(ad.value_of(build(ad.leaf(p[0] + 1j * p[1])))))

    want = ad.numerical_grad(f, packed)
    np.testing.assert_allclose(got.real, want[0], rtol=rtol, atol=atol)
    np.testing.assert_allclose(got.imag, want[1], rtol=rtol, atol=atol)


def _sumsq(v):
    return ad.asum(ad.mul(v, ad.conj(v))) if np.iscomplexobj(ad.value_of(v)) else ad.asum(ad.square(v))


def _realize(v):
    return ad.real(v) if np.iscomplexobj(ad.value_of(v)) else v


# ---------------------------------------------------------------------------


def test_untaped_passthrough_returns_ndarray():
    x = RNG.normal(size=(3, 3))
    assert isinstance(ad.add(x, x), np.ndarray)
    assert isinstance(ad.fft2(x), np.ndarray)
    assert isinstance(ad.asum(x), np.floating) or np.isscalar(ad.asum(x))


def test_add_sub_neg():
    x = RNG.normal(size=(4, 3))
    c = RNG.normal(size=(4, 3))
    fd_check(lambda v: ad.asum(ad.add(v, c)), x)
    fd_check(lambda v: ad.asum(ad.sub(c, v)), x)
    fd_check(lambda v: ad.asum(ad.neg(v)), x)


def test_add_broadcast():
    x = RNG.normal(size=(3,))
    c = RNG.normal(size=(4, 3))
    fd_check(lambda v: ad.asum(ad.square(ad.add(v, c))), x)


def test_mul_div_square_sqrt():
    x = RNG.normal(size=(4, 3)) + 2.5
    c = RNG.normal(size=(4, 3)) + 2.5
    fd_check(lambda v: ad.asum(ad.mul(v, c)), x)
    fd_check(lambda v: ad.asum(ad.mul(v, v)), x)
    fd_check(lambda v: ad.asum(ad.div(c, v)), x)
    fd_check(lambda v: ad.asum(ad.div(v, c)), x)
    fd_check(lambda v: ad.asum(ad.square(v)), x)
    fd_check(lambda v: ad.asum(ad.sqrt(v)), x, eps=1e-7, rtol=1e-4)


def test_complex_mul_conj():
    z = RNG.normal(size=(3, 3)) + 1j * RNG.normal(size=(3, 3))
    w = RNG.normal(size=(3, 3)) + 1j * RNG.normal(size=(3, 3))
    fd_check_complex(lambda v: ad.real(ad.asum(ad.mul(v, w))), z)
    fd_check_complex(lambda v: ad.imag(ad.asum(ad.mul(ad.conj(v), w))), z)
    fd_check_complex(lambda v: _sumsq(v), z)


def test_real_imag_make_complex():
    z = RNG.normal(size=(3, 2)) + 1j * RNG.normal(size=(3, 2))
    fd_check_complex(lambda v: ad.asum(ad.square(ad.real(v))), z)
    fd_check_complex(lambda v: ad.asum(ad.square(ad.imag(v))), z)
    x = RNG.normal(size=(3, 2))
    fd_check(lambda v: ad.real(ad.asum(ad.mul(ad.make_complex(v, ad.square(v)), 1 - 2j))), x)


def test_absolute_real_and_complex():
    x = RNG.normal(size=(4, 4)) + 3.0  # keep away from the kink at 0
    fd_check(lambda v: ad.asum(ad.absolute(v)), x)
    z = RNG.normal(size=(4, 4)) + 1j * RNG.normal(size=(4, 4)) + (2 + 2j)
    fd_check_complex(lambda v: ad.asum(ad.absolute(v)), z)


def test_angle():
    z = (RNG.normal(size=(3, 3)) + 3.0) + 1j * RNG.normal(size=(3, 3))
    fd_check_complex(lambda v: ad.asum(ad.square(ad.angle(v))), z)


def test_unit_phasor():
    th = RNG.normal(size=(3, 3))
    target = RNG.normal(size=(3, 3)) + 1j * RNG.normal(size=(3, 3))
    fd_check(lambda v: ad.real(ad.asum(ad.mul(ad.unit_phasor(v), target))), th)


def test_min_max_where():
    x = RNG.normal(size=(5, 5))
    c = RNG.normal(size=(5, 5))
    fd_check(lambda v: ad.asum(ad.square(ad.maximum(v, c))), x)
    fd_check(lambda v: ad.asum(ad.square(ad.minimum(v, c))), x)
    mask = RNG.random(size=(5, 5)) > 0.5
    fd_check(lambda v: ad.asum(ad.square(ad.where(mask, v, c))), x)


def test_sum_mean_axes():
    x = RNG.normal(size=(3, 4))
    fd_check(lambda v: ad.asum(ad.square(ad.asum(v, axis=0))), x)
    fd_check(lambda v: ad.asum(ad.square(ad.asum(v, axis=1, keepdims=True))), x)
    fd_check(lambda v: ad.square(ad.amean(v)), x)
    fd_check(lambda v: ad.asum(ad.square(ad.amean(v, axis=1))), x)


def test_amax_gradient():
    x = RNG.normal(size=(3, 4)) + np.arange(12).reshape(3, 4) * 0.37  # unique maxima
    fd_check(lambda v: ad.square(ad.amax(v)), x)
    fd_check(lambda v: ad.asum(ad.square(ad.amax(v, axis=1))), x)
    fd_check(lambda v: ad.asum(ad.div(v, ad.amax(v, axis=(-2, -1), keepdims=True))), x)


def test_amax_splits_ties_evenly():
    x = ad.leaf(np.array([1.0, 3.0, 3.0]))
    g = ad.backward(ad.amax(x))[x]
    np.testing.assert_allclose(g, [0.0, 0.5, 0.5])


def test_reshape_getitem_concat_pad():
    x = RNG.normal(size=(4, 6))
    fd_check(lambda v: ad.asum(ad.square(ad.reshape(v, (2, 12)))), x)
    fd_check(lambda v: ad.asum(ad.square(ad.getitem(v, (slice(1, 3), slice(2, 5))))), x)
    c = RNG.normal(size=(2, 6))
    fd_check(lambda v: ad.asum(ad.square(ad.concat([v, c], axis=0))), x)
    fd_check(lambda v: ad.asum(ad.square(ad.concat([c, v, c], axis=0))), x)
    fd_check(lambda v: ad.asum(ad.square(ad.pad2d(v, 2))), x)


def test_fft_ifft_shift():
    z = RNG.normal(size=(4, 4)) + 1j * RNG.normal(size=(4, 4))
    w = RNG.normal(size=(4, 4)) + 1j * RNG.normal(size=(4, 4))

    fd_check_complex(lambda v: ad.real(ad.asum(ad.mul(ad.fft2(v), w))), z)
    fd_check_complex(lambda v: ad.real(ad.asum(ad.mul(ad.ifft2(v), w))), z)
    fd_check_complex(lambda v: _sumsq(ad.fft2(v)), z)
    fd_check_complex(lambda v: ad.real(ad.asum(ad.mul(ad.fftshift2(v), w))), z)
    fd_check_complex(lambda v: ad.real(ad.asum(ad.mul(ad.ifftshift2(v), w))), z)
    # real input to fft2: cotangent must come back real
    x = RNG.normal(size=(4, 4))
    fd_check(lambda v: _realize(_sumsq(ad.fft2(v))), x)


def test_fft_roundtrip_identity():
    x = RNG.normal(size=(8, 8))
    np.testing.assert_allclose(ad.ifft2(ad.fft2(x)).real, x, atol=1e-12)


def test_extract_overlap_adjoint():
    rng = np.random.default_rng(3)
    size, hop, l_u, l_v = 6, 3, 4, 5
    canvas_shape = ((l_u - 1) * hop + size, (l_v - 1) * hop + size)
    x = rng.normal(size=canvas_shape)
    cells = rng.normal(size=(l_u, l_v, size, size))
    # <extract(x), cells> == <x, overlap_add(cells)>
    lhs = np.sum(ad.extract_cells(x, size, hop, l_u, l_v) * cells)
    rhs = np.sum(x * ad.overlap_add(cells, hop, canvas_shape))
    assert lhs == pytest.approx(rhs)


def test_extract_cells_grad():
    size, hop, l_u, l_v = 4, 2, 3, 3
    shape = ((l_u - 1) * hop + size, (l_v - 1) * hop + size)
    x = RNG.normal(size=shape)
    w = RNG.normal(size=(l_u, l_v, size, size))
    fd_check(lambda v: ad.asum(ad.square(ad.mul(ad.extract_cells(v, size, hop, l_u, l_v), w))), x)


def test_overlap_add_grad():
    size, hop, l_u, l_v = 4, 2, 3, 3
    shape = ((l_u - 1) * hop + size, (l_v - 1) * hop + size)
    cells = RNG.normal(size=(l_u, l_v, size, size))
    fd_check(lambda v: ad.asum(ad.square(ad.overlap_add(v, hop, shape))), cells)


def test_conv2d_grads():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 6, 7))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))
    t = rng.normal(size=(3, 6, 7))

    def loss_x(v):
        return ad.asum(ad.square(ad.sub(ad.conv2d(v, k, b), t)))

    def loss_k(v):
        return ad.asum(ad.square(ad.sub(ad.conv2d(x, v, b), t)))

    def loss_b(v):
        return ad.asum(ad.square(ad.sub(ad.conv2d(x, k, v), t)))

    fd_check(loss_x, x, rtol=1e-4)
    fd_check(loss_k, k, rtol=1e-4)
    fd_check(loss_b, b, rtol=1e-4)


def test_conv2d_shape_and_identity_kernel():
    x = RNG.normal(size=(1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_allclose(ad.conv2d(x, k), x, atol=1e-12)


def test_conv2_valid_grad():
    x = RNG.normal(size=(7, 7))
    k = RNG.normal(size=(3, 3))
    fd_check(lambda v: ad.asum(ad.square(ad.conv2_valid(v, k))), x, rtol=1e-4)
    # shape: valid mode shrinks by kernel-1
    assert ad.conv2_valid(x, k).shape == (5, 5)


def test_backward_accumulates_shared_nodes():
    x = ad.leaf(np.array(3.0))
    y = ad.mul(x, x)  # x appears twice
    z = ad.add(y, x)
    grads = ad.backward(z)
    assert grads[x] == pytest.approx(2 * 3.0 + 1.0)


def test_backward_deep_chain_iterative():
    x = ad.leaf(np.array(1.0))
    y = x
    for _ in range(5000):  # would overflow a recursive traversal
        y = ad.add(y, 0.0)
    grads = ad.backward(y)
    assert grads[x] == pytest.approx(1.0)


def test_backward_rejects_nonscalar_root():
    x = ad.leaf(np.zeros(3))
    with pytest.raises(ValueError):
        ad.backward(ad.add(x, 1.0))
