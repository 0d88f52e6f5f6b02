"""Windowed local Fourier analysis and overlap-add synthesis.

A frame is covered by overlapping N x N cells laid out on a regular grid
with hop H.  The grid is extended k cells beyond each image edge so that
every image pixel is covered by a full complement of overlapping windows,
and the frame is zero-padded accordingly.  Each cell is tapered, zero-padded
spectrally by P per side (N' = N + 2P) and transformed with a 2-D FFT.

Synthesis comes in two flavours:

* :func:`ilft` - the exact overlap-add inverse (weighted by the analysis
  window, normalized by the summed squared window).
* :func:`m_ilft` - synthesis with *per-cell shifted* windows: each cell's
  window is translated by the same phase ramp that was applied to the cell
  spectrum, so that moved content is re-normalized where it lands.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import autodiff as ad
from .errors import ReconstructionError, ValidationError

DENOM_EPS = 1e-8

WINDOW_KINDS = ("rectangular", "gaussian", "confined_gaussian")


@dataclass(frozen=True)
class GridSpec:
    """Cell layout for one frame size.

    ``image_pad`` is the per-side zero padding of the frame; cell ``(u, v)``
    has its top-left corner at ``(u*H, v*H)`` in padded coordinates, so the
    interior cell centers coincide with image pixels ``((u-k)*H, (v-k)*H)``.
    """

    U: int
    V: int
    N: int
    H: int
    P: int
    k: int
    L_U: int
    L_V: int
    image_pad: int

    @property
    def L(self) -> int:
        return self.L_U * self.L_V

    @property
    def n_prime(self) -> int:
        return self.N + 2 * self.P

    @property
    def padded_shape(self) -> tuple[int, int]:
        return (self.U + 2 * self.image_pad, self.V + 2 * self.image_pad)

    @property
    def canvas_shape(self) -> tuple[int, int]:
        """Overlap-add canvas when cells keep their P-ring (shifted synthesis)."""
        ph, pw = self.padded_shape
        return (ph + 2 * self.P, pw + 2 * self.P)


def plan_grid(U: int, V: int, N: int, H: int, P: int = 0) -> GridSpec:
    if U < 2 or V < 2:
        raise ValidationError(f"image size must be at least 2x2, got {U}x{V}")
    if N < 2:
        raise ValidationError(f"cell size N must be >= 2, got {N}")
    if H < 1:
        raise ValidationError(f"hop H must be >= 1, got {H}")
    if H > N:
        raise ValidationError(f"hop H={H} exceeds cell size N={N}")
    if (U - 1) % H != 0:
        raise ValidationError(f"H={H} must divide U-1={U - 1} ((U-1) mod H = {(U - 1) % H})")
    if (V - 1) % H != 0:
        raise ValidationError(f"H={H} must divide V-1={V - 1} ((V-1) mod H = {(V - 1) % H})")
    if P < 0:
        raise ValidationError(f"spectral pad P must be >= 0, got {P}")
    k = (N // 2) // H
    L_U = (U - 1) // H + 1 + 2 * k
    L_V = (V - 1) // H + 1 + 2 * k
    image_pad = N // 2 + k * H
    return GridSpec(U=U, V=V, N=N, H=H, P=P, k=k, L_U=L_U, L_V=L_V, image_pad=image_pad)


@dataclass(frozen=True)
class Window:
    """Separable nonnegative taper, peak-normalized to 1."""

    kind: str
    N: int
    sigma_t: Optional[float]
    taps1d: np.ndarray = field(repr=False)
    taps: np.ndarray = field(repr=False)  # N x N outer product


def _gauss(x: np.ndarray, N: int, sigma_t: float) -> np.ndarray:
    return np.exp(-0.5 * ((x - (N - 1) / 2.0) / (sigma_t * N)) ** 2)


def make_window(kind: str, N: int, sigma_t: Optional[float] = None) -> Window:
    if kind not in WINDOW_KINDS:
        raise ValidationError(f"unknown window kind {kind!r}, expected one of {WINDOW_KINDS}")
    if N < 2:
        raise ValidationError(f"window size N must be >= 2, got {N}")
    n = np.arange(N, dtype=float)
    if kind == "rectangular":
        taps1d = np.ones(N)
    else:
        if sigma_t is None or sigma_t <= 0:
            raise ValidationError(f"sigma_t must be positive for {kind}, got {sigma_t}")
        if kind == "gaussian":
            taps1d = _gauss(n, N, sigma_t)
        else:  # confined_gaussian: subtract the tail leakage of the periodic extension
            g = lambda x: _gauss(np.asarray(x, dtype=float), N, sigma_t)
            numer = g(-0.5) * (g(n + N) + g(n - N))
            denom = g(-0.5 + N) + g(-0.5 - N)
            taps1d = g(n) - numer / denom
    taps = np.outer(taps1d, taps1d)
    peak = taps.max()
    if peak <= 0:
        raise ValidationError("window peak is not positive")
    taps = taps / peak
    taps1d = taps1d / np.sqrt(peak)
    return Window(kind=kind, N=N, sigma_t=sigma_t, taps1d=taps1d, taps=taps)


@dataclass(frozen=True)
class NolaReport:
    ok: bool
    min_denominator: float


def check_nola(window: Window, H: int, a: int = 1, eps: float = DENOM_EPS) -> NolaReport:
    """Fold w^(a+1) over the hop lattice and report the worst coverage.

    On an unbounded grid the overlap-add denominator is H-periodic, so folding
    every tap into an H x H accumulator gives its exact interior values.
    """
    if H > window.N:
        raise ValidationError(f"hop H={H} exceeds window size N={window.N}")
    acc = np.zeros((H, H))
    w_pow = window.taps ** (a + 1)
    for i in range(window.N):
        for j in range(window.N):
            acc[i % H, j % H] += w_pow[i, j]
    min_d = float(acc.min())
    return NolaReport(ok=min_d >= eps, min_denominator=min_d)


@dataclass
class LocalSpectra:
    """Per-cell complex spectra, shape (L_U, L_V, N', N'); DC at bin (0, 0).

    ``cells`` may be a plain ndarray or an autodiff node when the spectra sit
    inside a traced computation.
    """

    grid: GridSpec
    cells: Any

    @property
    def values(self) -> np.ndarray:
        return ad.value_of(self.cells)


def _check_grid(given: GridSpec, other: Optional[GridSpec], what: str) -> None:
    if other is not None and other != given:
        raise ValidationError(f"{what} grid does not match the supplied grid")


def lft(frame, grid: GridSpec, window: Window) -> LocalSpectra:
    """Analyze a (U, V) frame into local cell spectra."""
    shape = np.shape(ad.value_of(frame))
    if shape != (grid.U, grid.V):
        raise ValidationError(f"frame shape {shape} does not match grid {(grid.U, grid.V)}")
    if window.N != grid.N:
        raise ValidationError(f"window size {window.N} does not match grid N={grid.N}")
    padded = ad.pad2d(frame, grid.image_pad)
    cells = ad.extract_cells(padded, grid.N, grid.H, grid.L_U, grid.L_V)
    tapered = ad.mul(cells, window.taps)
    if grid.P:
        tapered = ad.pad2d(tapered, grid.P)
    return LocalSpectra(grid=grid, cells=ad.fft2(tapered))


def _cells_of(spectra) -> Any:
    return spectra.cells if isinstance(spectra, LocalSpectra) else spectra


def _crop(arr, r0: int, nr: int, c0: int, nc: int):
    return ad.getitem(arr, (Ellipsis, slice(r0, r0 + nr), slice(c0, c0 + nc)))


def ilft(spectra, grid: GridSpec, window: Window, eps: float = DENOM_EPS):
    """Overlap-add inverse of :func:`lft`; exact when NOLA holds."""
    if isinstance(spectra, LocalSpectra):
        _check_grid(grid, spectra.grid, "spectra")
    cells = _cells_of(spectra)
    spatial = ad.real(ad.ifft2(cells))
    if grid.P:
        spatial = _crop(spatial, grid.P, grid.N, grid.P, grid.N)
    num = ad.overlap_add(ad.mul(spatial, window.taps), grid.H, grid.padded_shape)

    w2 = np.broadcast_to(window.taps**2, (grid.L_U, grid.L_V, grid.N, grid.N)).copy()
    den = ad.overlap_add(w2, grid.H, grid.padded_shape)
    p = grid.image_pad
    support = den[p : p + grid.U, p : p + grid.V]
    if (support < eps).any():
        rows, cols = np.nonzero(support < eps)
        raise ReconstructionError(
            "overlap-add denominator below "
            f"{eps} inside image support (rows {rows.min()}..{rows.max()}, "
            f"cols {cols.min()}..{cols.max()}); window/hop pair fails NOLA"
        )
    out = ad.div(num, np.maximum(den, eps))
    return ad.getitem(out, (slice(p, p + grid.U), slice(p, p + grid.V)))


def shifted_windows(window: Window, pd, grid: GridSpec):
    """Translate the analysis window per cell by the phase ramp ``pd``.

    Returns nonnegative (L_U, L_V, N', N') window stacks: the real part of
    the inverse FFT of the ramped window spectrum, clamped at zero to remove
    interpolation ripple.
    """
    w_pad = np.pad(window.taps, grid.P)
    w_spec = np.fft.fft2(w_pad)
    shifted = ad.real(ad.ifft2(ad.mul(pd, w_spec)))
    return ad.maximum(shifted, 0.0)


def m_ilft(spectra, window: Window, pd, grid: GridSpec, eps: float = DENOM_EPS):
    """Synthesis with per-cell shifted windows.

    ``pd`` holds one unit-phasor ramp per cell (same ramp that moved the
    content of the corresponding spectrum).  Cells keep their P-ring so that
    content shifted beyond the original N x N support still lands on the
    canvas; the image is cropped from the enlarged canvas at the end.
    """
    if isinstance(spectra, LocalSpectra):
        _check_grid(grid, spectra.grid, "spectra")
    cells = _cells_of(spectra)
    pd_cells = getattr(pd, "pd", pd)

    w_hat = shifted_windows(window, pd_cells, grid)
    spatial = ad.real(ad.ifft2(cells))
    num = ad.overlap_add(ad.mul(spatial, w_hat), grid.H, grid.canvas_shape)
    den = ad.overlap_add(ad.square(w_hat), grid.H, grid.canvas_shape)

    # Escalate only where the unshifted denominator would fail too: transient
    # holes opened by large shifts are floored, a broken window/hop pair is not.
    w_pad2 = np.pad(window.taps, grid.P) ** 2
    ideal = ad.overlap_add(
        np.broadcast_to(w_pad2, (grid.L_U, grid.L_V, grid.n_prime, grid.n_prime)).copy(),
        grid.H,
        grid.canvas_shape,
    )
    off = grid.image_pad + grid.P
    den_v = ad.value_of(den)
    bad = (den_v[off : off + grid.U, off : off + grid.V] < eps) & (
        ideal[off : off + grid.U, off : off + grid.V] < eps
    )
    if bad.any():
        rows, cols = np.nonzero(bad)
        raise ReconstructionError(
            "shifted-window overlap-add denominator below "
            f"{eps} inside image support (rows {rows.min()}..{rows.max()}, "
            f"cols {cols.min()}..{cols.max()})"
        )
    out = ad.div(num, ad.maximum(den, eps))
    return ad.getitem(out, (slice(off, off + grid.U), slice(off, off + grid.V)))
