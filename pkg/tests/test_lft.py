"""Grid planning, windows, NOLA, and analysis/synthesis round trips."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phasecast.errors import ReconstructionError, ValidationError
from phasecast.lft import (
    check_nola,
    ilft,
    lft,
    m_ilft,
    make_window,
    plan_grid,
)


# ---------------------------------------------------------------------------
# plan_grid


def test_plan_grid_64_15_7_4():
    g = plan_grid(64, 64, 15, 7, 4)
    assert g.k == 1
    assert g.L_U == 12 and g.L_V == 12 and g.L == 144
    assert g.image_pad == 14
    assert g.n_prime == 23


def test_plan_grid_65_9_4():
    g = plan_grid(65, 65, 9, 4, 0)
    assert g.k == 1
    assert g.L_U == 19
    assert g.image_pad == 8


def test_plan_grid_cells_cover_padded_canvas():
    g = plan_grid(64, 64, 15, 7, 4)
    last_edge = (g.L_U - 1) * g.H + g.N
    assert last_edge <= g.padded_shape[0]
    assert g.padded_shape[0] - last_edge <= 1


def test_plan_grid_rejects_hop_larger_than_cell():
    with pytest.raises(ValidationError, match="exceeds"):
        plan_grid(64, 64, 8, 9)


def test_plan_grid_rejects_nondivisor_hop():
    with pytest.raises(ValidationError, match="mod"):
        plan_grid(64, 64, 9, 5)


def test_plan_grid_rejects_negative_pad():
    with pytest.raises(ValidationError):
        plan_grid(64, 64, 15, 7, -1)


@given(
    H=st.integers(1, 8),
    extra=st.integers(0, 8),
    m=st.integers(1, 5),
)
def test_plan_grid_invariants(H, extra, m):
    N = max(2, H + extra)
    U = m * H + 1
    g = plan_grid(U, U, N, H, 0)
    assert g.k * H <= N // 2 < (g.k + 1) * H
    assert g.L_U == (U - 1) // H + 1 + 2 * g.k
    # every image pixel (r, c) lies under the cell whose center is nearest
    center = N // 2
    assert g.image_pad == center + g.k * H


# ---------------------------------------------------------------------------
# windows


def test_rectangular_window_all_ones():
    w = make_window("rectangular", 4)
    np.testing.assert_array_equal(w.taps, np.ones((4, 4)))


def test_gaussian_window_peak_and_symmetry():
    w = make_window("gaussian", 5, 0.3)
    assert w.taps[2, 2] == pytest.approx(1.0)
    assert w.taps[0, 0] == pytest.approx(w.taps[4, 4])
    np.testing.assert_allclose(w.taps, w.taps[::-1, :])
    np.testing.assert_allclose(w.taps, w.taps[:, ::-1])


def test_confined_gaussian_taps_against_closed_form():
    N, sig = 16, 0.14
    w = make_window("confined_gaussian", N, sig)

    # independent transcription of the closed form
    def G(x):
        return np.exp(-0.5 * ((np.asarray(x, float) - (N - 1) / 2) / (sig * N)) ** 2)

    n = np.arange(N)
    ref1d = G(n) - G(-0.5) * (G(n + N) + G(n - N)) / (G(N - 0.5) + G(-N - 0.5))
    ref = np.outer(ref1d, ref1d)
    ref /= ref.max()
    np.testing.assert_allclose(w.taps, ref, atol=1e-12)

    assert (w.taps > 0).all()
    assert w.taps[0, 0] < 0.1 * w.taps.max()
    np.testing.assert_allclose(w.taps, w.taps[::-1, ::-1])


def test_window_rejects_bad_sigma():
    with pytest.raises(ValidationError):
        make_window("gaussian", 8, 0.0)
    with pytest.raises(ValidationError):
        make_window("confined_gaussian", 8, -1.0)


def test_window_rejects_unknown_kind():
    with pytest.raises(ValidationError):
        make_window("hann", 8)


def test_window_outer_product_structure():
    w = make_window("confined_gaussian", 9, 0.2)
    np.testing.assert_allclose(w.taps, np.outer(w.taps1d, w.taps1d), atol=1e-12)


# ---------------------------------------------------------------------------
# NOLA


def test_nola_rect_hop_equals_size():
    rep = check_nola(make_window("rectangular", 8), H=8)
    assert rep.ok
    assert rep.min_denominator == 1.0


def test_nola_rect_half_hop():
    rep = check_nola(make_window("rectangular", 8), H=4)
    assert rep.ok
    assert rep.min_denominator == pytest.approx(4.0)


def test_nola_zero_row_fails():
    w = make_window("rectangular", 8)
    taps = w.taps.copy()
    taps[3, :] = 0.0
    broken = type(w)(kind=w.kind, N=w.N, sigma_t=None, taps1d=w.taps1d, taps=taps)
    rep = check_nola(broken, H=8)
    assert not rep.ok


def test_nola_default_pipeline_window():
    rep = check_nola(make_window("confined_gaussian", 15, 0.14), H=7)
    assert rep.ok
    assert rep.min_denominator > 1e-4


# ---------------------------------------------------------------------------
# lft


def _default_setup(P=4):
    grid = plan_grid(64, 64, 15, 7, P)
    window = make_window("confined_gaussian", 15, 0.14)
    return grid, window


def test_lft_constant_frame_rect_window():
    grid = plan_grid(64, 64, 15, 7, 0)
    window = make_window("rectangular", 15)
    c = 0.7
    spectra = lft(np.full((64, 64), c), grid, window)
    cell = spectra.values[5, 6]
    assert cell[0, 0] == pytest.approx(c * grid.N**2, rel=1e-12)
    rest = np.abs(cell.ravel()[1:])
    assert rest.max() < 1e-9


def test_lft_zero_frame():
    grid, window = _default_setup()
    spectra = lft(np.zeros((64, 64)), grid, window)
    assert np.abs(spectra.values).max() == 0.0


def test_lft_impulse_flat_magnitude():
    grid, window = _default_setup()
    frame = np.zeros((64, 64))
    frame[32, 32] = 1.0
    spectra = lft(frame, grid, window)
    mags = np.abs(spectra.values)
    cell_energy = mags.sum(axis=(2, 3))
    u, v = np.unravel_index(np.argmax(cell_energy), cell_energy.shape)
    m = mags[u, v]
    spread = (m.max() - m.min()) / m.mean()
    assert spread < 1e-6


def test_lft_rejects_wrong_shape():
    grid, window = _default_setup()
    with pytest.raises(ValidationError):
        lft(np.zeros((63, 64)), grid, window)


def test_lft_linearity():
    grid, window = _default_setup()
    rng = np.random.default_rng(1)
    x = rng.random((64, 64))
    y = rng.random((64, 64))
    a, b = 1.7, -0.4
    lhs = lft(a * x + b * y, grid, window).values
    rhs = a * lft(x, grid, window).values + b * lft(y, grid, window).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_lft_conjugate_symmetry():
    grid, window = _default_setup()
    rng = np.random.default_rng(2)
    x = rng.random((64, 64))
    X = lft(x, grid, window).values
    # X[w1, w2] == conj(X[-w1 mod N', -w2 mod N'])
    flipped = np.roll(X[:, :, ::-1, ::-1], shift=(1, 1), axis=(2, 3))
    np.testing.assert_allclose(X, np.conj(flipped), atol=1e-9)


def test_lft_parseval_per_cell():
    grid, window = _default_setup()
    rng = np.random.default_rng(3)
    x = rng.random((64, 64))
    X = lft(x, grid, window).values
    # recompute the tapered padded cells directly
    pad = grid.image_pad
    xp = np.pad(x, pad)
    for u, v in [(0, 0), (5, 7), (grid.L_U - 1, grid.L_V - 1)]:
        cell = xp[u * grid.H : u * grid.H + grid.N, v * grid.H : v * grid.H + grid.N] * window.taps
        e_space = np.sum(cell**2)
        e_freq = np.sum(np.abs(X[u, v]) ** 2) / grid.n_prime**2
        assert e_freq == pytest.approx(e_space, rel=1e-6, abs=1e-12)


# ---------------------------------------------------------------------------
# ilft


def test_round_trip_default_config():
    grid, window = _default_setup()
    rng = np.random.default_rng(4)
    for _ in range(5):
        x = rng.random((64, 64))
        out = ilft(lft(x, grid, window), grid, window)
        assert np.abs(out - x).max() <= 1e-5


def test_round_trip_one_cell_dominant():
    grid = plan_grid(17, 17, 17, 16, 0)
    window = make_window("confined_gaussian", 17, 0.2)
    rng = np.random.default_rng(5)
    x = rng.random((17, 17))
    out = ilft(lft(x, grid, window), grid, window)
    assert np.abs(out - x).max() <= 1e-5


def test_ilft_zero_spectra():
    grid, window = _default_setup()
    zero = lft(np.zeros((64, 64)), grid, window)
    np.testing.assert_array_equal(ilft(zero, grid, window), np.zeros((64, 64)))


def test_ilft_nola_failure_raises():
    grid = plan_grid(17, 17, 8, 8, 0)
    window = make_window("rectangular", 8)
    taps = window.taps.copy()
    taps[:, 3] = 0.0
    broken = type(window)(kind=window.kind, N=8, sigma_t=None, taps1d=window.taps1d, taps=taps)
    spectra = lft(np.ones((17, 17)), grid, broken)
    with pytest.raises(ReconstructionError, match="rows"):
        ilft(spectra, grid, broken)


@settings(max_examples=25, deadline=None)
@given(
    H=st.integers(2, 8),
    extra=st.integers(0, 6),
    m=st.integers(2, 4),
    P=st.integers(0, 3),
    rect=st.booleans(),
    seed=st.integers(0, 2**31 - 1),
)
def test_round_trip_property(H, extra, m, P, rect, seed):
    N = H + extra
    if N < 2:
        N = 2
    U = m * H + 1
    grid = plan_grid(U, U, N, H, P)
    window = make_window("rectangular", N) if rect else make_window("confined_gaussian", N, 0.2)
    assert check_nola(window, H).ok
    x = np.random.default_rng(seed).random((U, U))
    out = ilft(lft(x, grid, window), grid, window)
    assert np.abs(out - x).max() <= 1e-5


# ---------------------------------------------------------------------------
# m_ilft


def _unit_pd(grid):
    return np.ones((grid.L_U, grid.L_V, grid.n_prime, grid.n_prime), dtype=complex)


def _integer_shift_pd(grid, drow, dcol):
    n_p = grid.n_prime
    fr = np.fft.fftfreq(n_p)[:, None]
    fc = np.fft.fftfreq(n_p)[None, :]
    ramp = np.exp(-2j * np.pi * (fr * drow + fc * dcol))
    return np.broadcast_to(ramp, (grid.L_U, grid.L_V, n_p, n_p)).copy()


def test_m_ilft_zero_shift_matches_ilft():
    grid, window = _default_setup()
    rng = np.random.default_rng(6)
    x = rng.random((64, 64))
    spectra = lft(x, grid, window)
    a = ilft(spectra, grid, window)
    b = m_ilft(spectra, window, _unit_pd(grid), grid)
    assert np.abs(a - b).max() <= 1e-6


def test_m_ilft_uniform_integer_shift_is_exact():
    grid, window = _default_setup(P=4)
    rng = np.random.default_rng(7)
    x = rng.random((64, 64))
    pd = _integer_shift_pd(grid, 2, 0)
    spectra = lft(x, grid, window)
    shifted_cells = spectra.cells * pd
    out = m_ilft(shifted_cells, window, pd, grid)
    want = np.roll(x, 2, axis=0)
    margin = 4
    err = np.abs(out - want)[margin:-margin, margin:-margin]
    assert err.max() <= 1e-4


def test_m_ilft_diagonal_shift():
    grid, window = _default_setup(P=4)
    rng = np.random.default_rng(8)
    x = rng.random((64, 64))
    pd = _integer_shift_pd(grid, 3, -2)
    spectra = lft(x, grid, window)
    out = m_ilft(spectra.cells * pd, window, pd, grid)
    want = np.roll(x, (3, -2), axis=(0, 1))
    err = np.abs(out - want)[6:-6, 6:-6]
    assert err.max() <= 1e-4


def test_m_ilft_pathological_window_raises():
    grid = plan_grid(33, 33, 8, 8, 2)
    window = make_window("rectangular", 8)
    taps = np.zeros((8, 8))
    taps[3:5, 3:5] = 1.0  # minuscule support: hop 8 leaves holes
    tiny = type(window)(kind="rectangular", N=8, sigma_t=None, taps1d=window.taps1d, taps=taps)
    x = np.random.default_rng(9).random((33, 33))
    spectra = lft(x, grid, tiny)
    pd = _integer_shift_pd(grid, 2, 2)
    with pytest.raises(ReconstructionError):
        m_ilft(spectra.cells * pd, tiny, pd, grid)
