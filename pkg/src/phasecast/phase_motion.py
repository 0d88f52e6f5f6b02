"""Phase differences, phase-only correlation, and the velocity bottleneck.

Local motion between two frames lives in the phase of the ratio of their
cell spectra.  This module turns those per-bin phasors into per-cell
velocity 2-vectors (with a circular-dispersion confidence) and back into
plane-wave phasor ramps that :func:`phasecast.lft.m_ilft` can consume.

Conventions (pinned by the shift oracle, i.e. by requiring that
``phase_add(lft(x), velocity_to_pd(v))`` moves content by exactly ``+v``):

* ``vx`` is pixels/frame along increasing column index, ``vy`` along
  increasing row index;
* a velocity ``v`` maps to the centered-layout plane wave
  ``exp(-j*(2*pi/N')*(vx*rx + vy*ry))``;
* all phasor grids use the canonical DC-at-(0,0) FFT layout except where
  the centered template matrix requires a shifted view internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Optional

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .lft import GridSpec, LocalSpectra

ENERGY_EPS = 1e-12


@dataclass
class PhaseDiffSet:
    """Per-cell, per-bin unit phasors (..., N', N'), DC at bin (0, 0).

    ``low_energy`` marks bins whose defining product had magnitude below the
    guard threshold (those carry phasor 1+0j).  ``saturated`` marks cells
    whose requested velocity had to be clamped into the representable range.
    """

    grid: Optional[GridSpec]
    pd: Any
    low_energy: Optional[np.ndarray] = None
    saturated: Optional[np.ndarray] = None

    @property
    def values(self) -> np.ndarray:
        return ad.value_of(self.pd)


@dataclass
class VelocityField:
    """Per-cell pixel velocities with circular-dispersion confidences.

    ``var_x``/``var_y`` live in [0, 1]: 0 means every spectral bin agreed on
    the phase slope, 1 means no usable signal (``flagged`` cells).
    """

    grid: Optional[GridSpec]
    vx: Any
    vy: Any
    var_x: Any = None
    var_y: Any = None
    flagged: Optional[np.ndarray] = None

    @property
    def values(self) -> tuple[np.ndarray, np.ndarray]:
        return ad.value_of(self.vx), ad.value_of(self.vy)


@dataclass(frozen=True)
class TemplateMatrix:
    """Centered frequency-index offsets: rx counts columns, ry counts rows."""

    n_prime: int
    rx: np.ndarray
    ry: np.ndarray


@lru_cache(maxsize=None)
def build_template_matrix(n_prime: int) -> TemplateMatrix:
    if n_prime < 2:
        raise ValidationError(f"template size must be >= 2, got {n_prime}")
    offs = np.arange(n_prime, dtype=float) - n_prime // 2
    ry, rx = np.meshgrid(offs, offs, indexing="ij")
    rx.flags.writeable = False
    ry.flags.writeable = False
    return TemplateMatrix(n_prime=n_prime, rx=rx, ry=ry)


def _cells_of(x) -> Any:
    if isinstance(x, LocalSpectra):
        return x.cells
    if isinstance(x, PhaseDiffSet):
        return x.pd
    return x


def _grid_of(x) -> Optional[GridSpec]:
    return x.grid if isinstance(x, (LocalSpectra, PhaseDiffSet)) else None


def _check_same_grid(a, b) -> Optional[GridSpec]:
    ga, gb = _grid_of(a), _grid_of(b)
    if ga is not None and gb is not None and ga != gb:
        raise ValidationError("operands were analyzed on different grids")
    return ga or gb


def phase_diff(X_t, X_prev, eps_energy: float = ENERGY_EPS) -> PhaseDiffSet:
    """Unit phasors X_t * conj(X_prev) / |X_t * X_prev| per bin.

    Bins with product magnitude below ``eps_energy`` are forced to 1+0j and
    flagged: their phase is numerical noise.
    """
    grid = _check_same_grid(X_t, X_prev)
    num = ad.mul(_cells_of(X_t), ad.conj(_cells_of(X_prev)))
    mag = ad.absolute(num)
    low = ad.value_of(mag) < eps_energy
    safe = ad.where(low, 1.0, mag)
    pd = ad.where(low, 1.0 + 0.0j, ad.div(num, safe))
    return PhaseDiffSet(grid=grid, pd=pd, low_energy=low)


def phase_add(X, pd):
    """Apply a phase difference to spectra: element-wise product (|X| kept)."""
    grid = _check_same_grid(X, pd)
    cells = ad.mul(_cells_of(X), _cells_of(pd))
    if isinstance(X, LocalSpectra) or grid is not None:
        return LocalSpectra(grid=grid, cells=cells)
    return cells


def _signed_index(i: int, n: int) -> int:
    return i if i <= n // 2 else i - n


def poc(pd_cell) -> tuple[int, int, float]:
    """Phase-only correlation: dominant integer shift of one phasor grid.

    Returns (delta_row, delta_col, peak) with shifts in (-N'/2, N'/2] and
    peak in [0, 1]; peak near 1 means a single clean translation.
    """
    cell = np.asarray(ad.value_of(_cells_of(pd_cell)))
    if cell.ndim != 2 or cell.shape[0] != cell.shape[1]:
        raise ValidationError(f"expected one square phasor grid, got shape {cell.shape}")
    corr = np.fft.ifft2(cell).real
    r, c = np.unravel_index(np.argmax(corr), corr.shape)
    n = cell.shape[0]
    return _signed_index(int(r), n), _signed_index(int(c), n), float(corr[r, c])


def _solve_peak(s, n_p, iters=60, tol=1e-11):
    """Per-cell argmax of F(v) = Re sum_w s(w) * exp(+j*c*(vx*rx + vy*ry)).

    ``s`` is a (..., N', N') complex grid in canonical layout with any bin
    weights already folded in.  A coarse peak on the 2x-upsampled correlation
    surface (half-bin resolution, always inside the main lobe) seeds a Newton
    iteration on the smooth objective; steps are taken only where the local
    curvature says "definite maximum" and are clamped to half a bin.

    Returns ``(vx, vy, ok, (hxx, hxy, hyy, det), ramp)`` where ``ok`` marks
    cells that converged onto a definite interior maximum and the trailing
    entries are the curvature and demodulating ramp at the solution (reused
    by the implicit-function gradient).
    """
    tm = build_template_matrix(n_p)
    rx = np.fft.ifftshift(tm.rx)
    ry = np.fft.ifftshift(tm.ry)
    c = 2.0 * np.pi / n_p

    # Embed the centered spectrum so its DC bin lands on index M//2 of the
    # padded grid (and hence on index 0 after the inverse shift): the block
    # starts at M//2 - n_p//2 = n_p - n_p//2.
    sc = np.fft.fftshift(s, axes=(-2, -1))
    pad = [(0, 0)] * (sc.ndim - 2) + [(n_p - n_p // 2, n_p // 2)] * 2
    surf = np.fft.ifft2(np.fft.ifftshift(np.pad(sc, pad), axes=(-2, -1))).real
    m = 2 * n_p
    flat = surf.reshape(surf.shape[:-2] + (-1,)).argmax(axis=-1)
    iy, ix = np.unravel_index(flat, (m, m))

    def signed(i):
        return np.where(i <= m // 2, i, i - m).astype(np.float64) / 2.0

    vy = signed(iy)
    vx = signed(ix)

    jx = 1j * c * rx
    jy = 1j * c * ry
    last = np.full(np.shape(vx), np.inf)
    for _ in range(iters):
        ramp = np.exp(1j * c * (vx[..., None, None] * rx + vy[..., None, None] * ry))
        z = s * ramp
        gx = np.real(z * jx).sum(axis=(-2, -1))
        gy = np.real(z * jy).sum(axis=(-2, -1))
        hxx = np.real(z * jx * jx).sum(axis=(-2, -1))
        hyy = np.real(z * jy * jy).sum(axis=(-2, -1))
        hxy = np.real(z * jx * jy).sum(axis=(-2, -1))
        det = hxx * hyy - hxy * hxy
        concave = (hxx < 0.0) & (det > 0.0)
        sd = np.where(concave, det, 1.0)
        dx = np.clip(np.where(concave, -(hyy * gx - hxy * gy) / sd, 0.0), -0.5, 0.5)
        dy = np.clip(np.where(concave, -(-hxy * gx + hxx * gy) / sd, 0.0), -0.5, 0.5)
        vx = vx + dx
        vy = vy + dy
        last = np.maximum(np.abs(dx), np.abs(dy))
        if last.size == 0 or last.max() < tol:
            break

    ramp = np.exp(1j * c * (vx[..., None, None] * rx + vy[..., None, None] * ry))
    z = s * ramp
    hxx = np.real(z * jx * jx).sum(axis=(-2, -1))
    hyy = np.real(z * jy * jy).sum(axis=(-2, -1))
    hxy = np.real(z * jx * jy).sum(axis=(-2, -1))
    det = hxx * hyy - hxy * hxy
    ok = (hxx < 0.0) & (det > 0.0) & (last < 1e-8)
    return vx, vy, ok, (hxx, hxy, hyy, det), ramp


def phase_fit(s, n_prime: int):
    """Differentiable per-cell peak of the weighted phase-correlation score.

    Returns velocities stacked as ``(..., 2)`` = (vx, vy).  The gradient is
    the implicit-function rule at the stationary point: perturbing ``s``
    moves the root of the score's gradient by ``-H^-1 * d(grad)/d(s)``,
    where ``H`` is the curvature cached from the forward solve.  Cells whose
    refinement did not land on a definite interior maximum get zero gradient
    (the argmax is not differentiable there).
    """
    sv = np.asarray(ad.value_of(s))
    vx, vy, ok, (hxx, hxy, hyy, det), ramp = _solve_peak(sv, n_prime)
    out = np.stack([np.asarray(vx), np.asarray(vy)], axis=-1)
    if not isinstance(s, ad.Var):
        return out

    tm = build_template_matrix(n_prime)
    rx = np.fft.ifftshift(tm.rx)
    ry = np.fft.ifftshift(tm.ry)
    c = 2.0 * np.pi / n_prime
    safe = np.where(ok, det, 1.0)

    def vjp(g):
        g = np.asarray(g)
        ux = g[..., 0]
        uy = g[..., 1]
        px = np.where(ok, (hyy * ux - hxy * uy) / safe, 0.0)
        py = np.where(ok, (-hxy * ux + hxx * uy) / safe, 0.0)
        k = px[..., None, None] * rx + py[..., None, None] * ry
        return (1j * c) * k * np.conj(ramp)

    return ad.custom(out, (s, vjp))


SOFT_MASK_RATIO = 3e-2
HIGHPASS_RADIUS = 1.75  # bins; ~2x the analysis window's spectral leakage


def highpass_weights(n_prime: int, radius: float = HIGHPASS_RADIUS) -> np.ndarray:
    """1 - exp(-|r|^2 / (2*radius^2)) per bin, canonical (DC at [0, 0]) layout.

    The analysis window is fixed in the frame, so the cross-spectrum bins
    within its spectral leakage of DC measure the static windowed mean, not
    the motion; their phases sit near zero regardless of the true shift.
    """
    tm = build_template_matrix(n_prime)
    m = 1.0 - np.exp(-(tm.rx**2 + tm.ry**2) / (2.0 * radius**2))
    return np.fft.ifftshift(m)


def cross_energies(X_t, X_prev, radius: float = HIGHPASS_RADIUS):
    """Per-bin velocity-evidence weights |X_t * conj(X_prev)|, DC-suppressed.

    This is the canonical ``energies`` input for :func:`extract_velocity`
    when the spectra come from two consecutive frames.
    """
    a, b = _cells_of(X_t), _cells_of(X_prev)
    e = ad.absolute(ad.mul(a, ad.conj(b)))
    n_p = np.shape(ad.value_of(e))[-1]
    return ad.mul(e, highpass_weights(n_p, radius))


def extract_velocity(pd, energies=None) -> VelocityField:
    """Reduce each cell's phasor grid to a velocity 2-vector plus confidence.

    Velocity: argmax over v of Re sum_w w(w)*pd(w)*exp(+j*c*(vx*rx+vy*ry)),
    i.e. the subpixel peak of the weighted phase-only correlation surface
    (coarse half-bin peak, then safeguarded Newton).  Energies enter through
    the soft normalization e/(e + 0.03*max e), which pushes reliable bins
    toward weight 1 (keeping the correlation peak sharp) while silencing
    near-empty bins; the highest-|frequency| row and column are dropped
    because their phase is ambiguous under half-sample shifts.

    Confidence: per-axis circular dispersion of adjacent-bin slope phasors
    pd[i]*conj(pd[i+1]) (each is exp(+j*2*pi*v/N') for a clean +v plane
    wave), weighted by the geometric mean of the two bins' energies.
    var = 1 - |weighted mean phasor| is 0 when every pair agrees and grows
    toward 1 under mixed motion or noise.  Cells with no usable energy are
    flagged and report velocity 0, variance 1.
    """
    grid = _grid_of(pd)
    cells = _cells_of(pd)
    shape = np.shape(ad.value_of(cells))
    if shape[-2] != shape[-1]:
        raise ValidationError("phasor grid must be square")
    n_p = shape[-1]

    if energies is None:
        e = np.ones(shape)
    else:
        e = energies
        if np.shape(ad.value_of(e)) != shape:
            raise ValidationError("energies shape does not match phasor grid shape")
        if (np.asarray(ad.value_of(e)) < 0).any():
            raise ValidationError("energies must be nonnegative")

    tm = build_template_matrix(n_p)
    keep = ~np.fft.ifftshift(
        (np.abs(tm.rx) == np.abs(tm.rx).max()) | (np.abs(tm.ry) == np.abs(tm.ry).max())
    )
    emax = ad.amax(e, axis=(-2, -1), keepdims=True)
    # the floor must survive squaring in the quotient-rule backward pass
    soft = ad.div(e, ad.add(e, ad.maximum(ad.mul(emax, SOFT_MASK_RATIO), 1e-120)))
    v2 = phase_fit(ad.mul(cells, ad.mul(soft, keep.astype(np.float64))), n_p)
    vx = ad.getitem(v2, (Ellipsis, 0))
    vy = ad.getitem(v2, (Ellipsis, 1))

    pdc = ad.fftshift2(cells)
    ec = ad.fftshift2(e)

    def axis_dispersion(lo_idx, hi_idx):
        lo = ad.getitem(pdc, lo_idx)
        hi = ad.getitem(pdc, hi_idx)
        slope = ad.mul(lo, ad.conj(hi))  # exp(+j*2*pi*v/N') for a +v plane wave
        w = ad.sqrt(ad.mul(ad.getitem(ec, lo_idx), ad.getitem(ec, hi_idx)))
        den = ad.asum(w, axis=(-2, -1))
        zero = ad.value_of(den) <= 0.0
        m = ad.div(ad.asum(ad.mul(w, slope), axis=(-2, -1)), ad.where(zero, 1.0, den))
        var = ad.where(zero, 1.0, ad.maximum(ad.sub(1.0, ad.absolute(m)), 0.0))
        return var, zero

    var_x, zx = axis_dispersion(
        (Ellipsis, slice(None), slice(0, n_p - 1)), (Ellipsis, slice(None), slice(1, n_p))
    )
    var_y, zy = axis_dispersion(
        (Ellipsis, slice(0, n_p - 1), slice(None)), (Ellipsis, slice(1, n_p), slice(None))
    )
    return VelocityField(grid=grid, vx=vx, vy=vy, var_x=var_x, var_y=var_y, flagged=zx | zy)


def velocity_to_pd(vf: VelocityField, n_prime: Optional[int] = None) -> PhaseDiffSet:
    """Synthesize the plane-wave phasor grid of each cell's velocity.

    Velocities beyond the representable +-N'/2 are clamped (and the cell
    marked ``saturated``): a steeper ramp would alias to a smaller shift.
    """
    if n_prime is None:
        if vf.grid is None:
            raise ValidationError("velocity field carries no grid; pass n_prime explicitly")
        n_prime = vf.grid.n_prime
    tm = build_template_matrix(n_prime)
    lim = n_prime / 2.0

    vx_v, vy_v = vf.values
    saturated = (np.abs(np.asarray(vx_v)) > lim) | (np.abs(np.asarray(vy_v)) > lim)

    cell_shape = np.shape(vx_v)
    expand = cell_shape + (1, 1)

    def ramp(v):
        return ad.reshape(ad.minimum(ad.maximum(v, -lim), lim), expand)

    theta = ad.mul(
        ad.add(ad.mul(ramp(vf.vx), tm.rx), ad.mul(ramp(vf.vy), tm.ry)),
        -2.0 * np.pi / n_prime,
    )
    pd = ad.ifftshift2(ad.unit_phasor(theta))
    return PhaseDiffSet(grid=vf.grid, pd=pd, saturated=saturated)
