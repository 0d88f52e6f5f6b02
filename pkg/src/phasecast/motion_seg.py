"""Self-supervised motion segmentation as a predict/correct state machine.

State: a foreground image FG, a static background image BG, an occlusion
mask A in [0, 1], and a per-cell local transform LT (unit phasors) that moves
FG and A jointly.  Each step phase-shifts FG and A by the bottlenecked LT,
composites A*FG + (1-A)*BG, and corrects the state by the exact analytic
gradients of 0.5*sum((composite - observed)^2) + lambda_A*sum(|A|) -- a
Kalman-style cycle with fixed gains instead of learned covariances.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from pathlib import Path

from . import autodiff as ad
from .errors import ValidationError
from .lft import GridSpec, Window, lft, m_ilft
from .phase_motion import (
    PhaseDiffSet,
    cross_energies,
    extract_velocity,
    phase_add,
    phase_diff,
    velocity_to_pd,
)
from .predictor import PredictorConfig
from .transform_model import assemble_input, tm_forward


@dataclass(frozen=True)
class SegConfig:
    pcfg: PredictorConfig = field(default_factory=PredictorConfig)
    eta_fg: float = 0.5
    eta_bg: float = 0.5
    eta_a: float = 0.5
    eta_lt: float = 0.7  # blend weight toward the newly measured transform
    lambda_a: float = 1e-3  # L1 pressure that empties unused alpha
    beta0: float = 1.0  # re-init blend schedule beta_t = beta0 * rho^t
    rho: float = 0.5
    init_steps: int = 3
    alpha_tau: float = 0.22  # soft threshold center on the normalized diff
    alpha_temp: float = 0.04  # sigmoid temperature
    smooth_sigma: float = 1.2  # blur of |F_1 - F_0| before thresholding
    lt_alpha_weight: float = 0.1  # alpha's vote share in the LT measurement
    lt_pool_cells: int = 1  # phasor-vote pooling radius over the cell lattice

    def __post_init__(self):
        if not 0.0 <= self.eta_lt <= 1.0:
            raise ValidationError(f"eta_lt must be in [0, 1], got {self.eta_lt}")
        for name in ("eta_fg", "eta_bg", "eta_a", "lambda_a", "rho", "alpha_temp"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.lt_pool_cells < 0:
            raise ValidationError("lt_pool_cells must be nonnegative")


@dataclass
class SegState:
    fg: np.ndarray
    bg: np.ndarray
    a: np.ndarray
    lt: PhaseDiffSet
    step: int = 0  # completed predict/correct cycles (init counts as 0)
    clamp_count: int = 0  # alpha pixels clamped during the last prediction


@dataclass
class SegPrediction:
    fg: np.ndarray  # phase-shifted foreground FG'
    a: np.ndarray  # phase-shifted alpha A', already clamped to [0, 1]
    frame: np.ndarray  # composite(FG', BG, A')
    lt_refined: PhaseDiffSet
    clamp_count: int


def composite(fg, bg, a):
    """A*FG + (1-A)*BG element-wise."""
    fg, bg, a = (np.asarray(x, dtype=np.float64) for x in (fg, bg, a))
    if not fg.shape == bg.shape == a.shape:
        raise ValidationError(
            f"composite needs matching shapes, got {fg.shape}, {bg.shape}, {a.shape}"
        )
    return a * fg + (1.0 - a) * bg


def _state_energies(x_masked_fg, x_a):
    """Bottleneck bin weights: content energy of the masked-FG and alpha spectra."""
    return ad.value_of(cross_energies(x_masked_fg, x_masked_fg)) + ad.value_of(
        cross_energies(x_a, x_a)
    )


def seg_predict(state: SegState, cfg: SegConfig, params=None) -> SegPrediction:
    """Move FG and A by the bottlenecked LT; composite over the static BG.

    The local transform passes through the velocity bottleneck (one velocity
    per cell) before being applied, optionally refined by a transform model.
    """
    grid, window = cfg.pcfg.plan(state.fg.shape)
    x_fg = lft(state.fg, grid, window)
    x_a = lft(state.a, grid, window)
    x_vis = lft(state.a * state.fg, grid, window)

    vf = extract_velocity(state.lt, energies=_state_energies(x_vis, x_a))
    if params is not None:
        vf = tm_forward(params, assemble_input([vf], params.r))
    lt_refined = velocity_to_pd(vf, grid.n_prime)

    fg_new = np.asarray(
        ad.value_of(m_ilft(phase_add(x_fg, lt_refined), window, lt_refined.pd, grid))
    )
    a_raw = np.asarray(
        ad.value_of(m_ilft(phase_add(x_a, lt_refined), window, lt_refined.pd, grid))
    )
    clamped = int(((a_raw < 0.0) | (a_raw > 1.0)).sum())
    a_new = np.clip(a_raw, 0.0, 1.0)
    return SegPrediction(
        fg=fg_new,
        a=a_new,
        frame=composite(fg_new, state.bg, a_new),
        lt_refined=lt_refined,
        clamp_count=clamped,
    )


def seg_loss(pred_frame, observed, a, lambda_a: float) -> float:
    """0.5*sum(e^2) + lambda_A*sum(|A|): the function the correction descends."""
    e = np.asarray(pred_frame, dtype=np.float64) - np.asarray(observed, dtype=np.float64)
    return 0.5 * float((e * e).sum()) + lambda_a * float(np.abs(a).sum())


def seg_correct(
    state: SegState, pred: SegPrediction, observed, cfg: SegConfig
) -> SegState:
    """One gradient step of the compositing loss on (FG, BG, A).

    The updates are the exact per-pixel derivatives of
    0.5*sum((A'*FG' + (1-A')*BG - F)^2) + lambda_A*sum(|A'|):
    dFG = e*A', dBG = e*(1-A'), dA = e*(FG'-BG) + lambda_A*sign(A').
    """
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != pred.frame.shape:
        raise ValidationError("observed frame shape does not match the prediction")
    e = pred.frame - observed
    fg = pred.fg - cfg.eta_fg * (e * pred.a)
    bg = state.bg - cfg.eta_bg * (e * (1.0 - pred.a))
    a = np.clip(
        pred.a - cfg.eta_a * (e * (pred.fg - state.bg)) - cfg.eta_a * cfg.lambda_a * np.sign(pred.a),
        0.0,
        1.0,
    )
    return SegState(
        fg=fg,
        bg=bg,
        a=a,
        lt=state.lt,
        step=state.step + 1,
        clamp_count=pred.clamp_count,
    )


def _renormalize(pd_cells):
    mag = np.abs(pd_cells)
    return np.where(mag < 1e-12, 1.0 + 0.0j, pd_cells / np.where(mag < 1e-12, 1.0, mag))


def _pool_cells(field: np.ndarray, radius: int) -> np.ndarray:
    """Sum a (L_U, L_V, ...) field over a triangular-weighted cell neighborhood.

    Phasor votes for a rigid shift are identical across cells (the phase ramp
    depends on the bin, not the cell), so pooling is motion-consistent; it
    lets cells whose own content is static or weak inherit the motion evidence
    of their strong neighbors instead of voting for zero velocity.
    """
    if radius == 0:
        return field
    out = np.zeros_like(field)
    l_u, l_v = field.shape[:2]
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            w = (1.0 - abs(dy) / (radius + 1)) * (1.0 - abs(dx) / (radius + 1))
            ys = slice(max(0, dy), min(l_u, l_u + dy))
            yd = slice(max(0, -dy), min(l_u, l_u - dy))
            xs = slice(max(0, dx), min(l_v, l_v + dx))
            xd = slice(max(0, -dx), min(l_v, l_v - dx))
            out[yd, xd] += w * field[ys, xs]
    return out


def seg_update_lt(
    lt_prev: PhaseDiffSet,
    fg_new,
    a_new,
    fg_old,
    a_old,
    cfg: SegConfig,
) -> PhaseDiffSet:
    """Blend the previous transform toward the newly measured one.

    The measurement combines the foreground and alpha phase differences per
    bin by an energy-weighted phasor sum, then
    LT <- normalize(eta_LT*measured + (1-eta_LT)*LT_prev).  Three choices
    keep the measurement honest on evolving states:
      * the foreground is measured through its visible part A*FG -- where
        A ~ 0 the layer is unconstrained by observations and its stale
        content would vote for zero motion;
      * each source's energies are normalized to a common scale and alpha is
        further discounted (``lt_alpha_weight``): the mask is smooth, so its
        raw spectral energy dwarfs the texture evidence while carrying less
        motion information;
      * votes are pooled over neighboring cells (``lt_pool_cells``) so cells
        that see only a sliver of the object inherit their neighbors' motion
        instead of measuring their own static remainder.
    """
    grid, window = cfg.pcfg.plan(np.shape(np.asarray(fg_new)))
    a_new = np.asarray(a_new, dtype=np.float64)
    a_old = np.asarray(a_old, dtype=np.float64)
    xf_new = lft(a_new * np.asarray(fg_new), grid, window)
    xf_old = lft(a_old * np.asarray(fg_old), grid, window)
    xa_new, xa_old = lft(a_new, grid, window), lft(a_old, grid, window)
    pd_fg = phase_diff(xf_new, xf_old)
    pd_a = phase_diff(xa_new, xa_old)
    e_fg = ad.value_of(cross_energies(xf_new, xf_old))
    e_a = ad.value_of(cross_energies(xa_new, xa_old))
    w_fg = e_fg / max(e_fg.mean(), 1e-30)
    w_a = cfg.lt_alpha_weight * e_a / max(e_a.mean(), 1e-30)
    votes = _pool_cells(w_fg * pd_fg.values + w_a * pd_a.values, cfg.lt_pool_cells)
    measured = _renormalize(votes)
    blended = _renormalize(cfg.eta_lt * measured + (1.0 - cfg.eta_lt) * lt_prev.values)
    return PhaseDiffSet(grid=grid, pd=blended)


# ---------------------------------------------------------------------------
# heuristic initialization


def _gauss_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return x
    radius = max(int(round(3.0 * sigma)), 1)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(x, ((radius, radius), (0, 0)), mode="edge")
    x = np.stack([np.convolve(pad[:, j], k, mode="valid") for j in range(x.shape[1])], axis=1)
    pad = np.pad(x, ((0, 0), (radius, radius)), mode="edge")
    return np.stack([np.convolve(pad[i, :], k, mode="valid") for i in range(x.shape[0])], axis=0)


def _alpha_estimate(f_new, f_ref, cfg: SegConfig) -> np.ndarray:
    """Soft mask of "what moved": normalized blurred |f_new - f_ref|."""
    diff = _gauss_blur(np.abs(np.asarray(f_new) - np.asarray(f_ref)), cfg.smooth_sigma)
    top = diff.max()
    if top > 0:
        diff = diff / top
    return 1.0 / (1.0 + np.exp(-(diff - cfg.alpha_tau) / cfg.alpha_temp))


def heuristic_init(frames: Sequence[np.ndarray], cfg: SegConfig) -> SegState:
    """Bootstrap the state from >= 2 observed frames.

    BG is the pixel-wise median (a moving sprite rarely occupies the same
    pixel in most frames), A is a soft threshold of a smoothed difference
    image, FG is the newest frame, and LT is measured from the FG/A estimates
    of the last two frames.  With only two frames the difference image is the
    frame pair's: it lights up both the departure and the arrival region.
    With three or more, differencing against the median background lights up
    only where the sprite currently is, so re-initialized estimates get
    tighter as frames accumulate.
    """
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if len(frames) < 2:
        raise ValidationError(f"initialization needs at least 2 frames, got {len(frames)}")
    bg = np.median(np.stack(frames), axis=0)
    if len(frames) == 2:
        a_old = _alpha_estimate(frames[-2], frames[-1], cfg)
        a_new = _alpha_estimate(frames[-1], frames[-2], cfg)
    else:
        a_old = _alpha_estimate(frames[-2], bg, cfg)
        a_new = _alpha_estimate(frames[-1], bg, cfg)
    fg_old, fg_new = frames[-2], frames[-1]
    grid, _ = cfg.pcfg.plan(fg_new.shape)
    identity = PhaseDiffSet(
        grid=grid, pd=np.ones((grid.L_U, grid.L_V, grid.n_prime, grid.n_prime), complex)
    )
    lt = seg_update_lt(identity, fg_new, a_new, fg_old, a_old, replace(cfg, eta_lt=1.0))
    return SegState(fg=fg_new.copy(), bg=bg, a=a_new, lt=lt)


def _blend_states(corrected: SegState, reinit: SegState, beta: float) -> SegState:
    lt = _renormalize(beta * reinit.lt.values + (1.0 - beta) * corrected.lt.values)
    return SegState(
        fg=beta * reinit.fg + (1.0 - beta) * corrected.fg,
        bg=beta * reinit.bg + (1.0 - beta) * corrected.bg,
        a=beta * reinit.a + (1.0 - beta) * corrected.a,
        lt=PhaseDiffSet(grid=corrected.lt.grid, pd=lt),
        step=corrected.step,
        clamp_count=corrected.clamp_count,
    )


@dataclass
class SegRun:
    states: List[SegState]  # state after each corrected (or open-loop) step
    predictions: List[np.ndarray]  # composite frames, aligned with states
    corrected_steps: int  # how many steps had an observed frame


def seg_run(
    frames,
    seed_count: int,
    cfg: Optional[SegConfig] = None,
    horizon: int = 0,
    params=None,
) -> SegRun:
    """Initialize on the seeds, predict/correct through the observed frames,
    then continue open-loop (prediction only) for ``horizon`` extra steps."""
    if cfg is None:
        cfg = SegConfig()
    arr = frames.as_array() if hasattr(frames, "as_array") else frames
    arr = np.asarray(ad.value_of(arr), dtype=np.float64)
    if seed_count < 2:
        raise ValidationError(f"segmentation needs at least 2 seed frames, got {seed_count}")
    if arr.shape[0] < seed_count:
        raise ValidationError("fewer frames than seed_count")

    state = heuristic_init(list(arr[:seed_count]), cfg)
    states, preds = [], []
    for t in range(seed_count, arr.shape[0]):
        pred = seg_predict(state, cfg, params=params)
        old_fg, old_a = state.fg, state.a
        corrected = seg_correct(state, pred, arr[t], cfg)
        corrected.lt = seg_update_lt(state.lt, corrected.fg, corrected.a, old_fg, old_a, cfg)
        if corrected.step < cfg.init_steps:
            beta = cfg.beta0 * cfg.rho**corrected.step
            corrected = _blend_states(corrected, heuristic_init(list(arr[: t + 1]), cfg), beta)
        state = corrected
        states.append(state)
        preds.append(pred.frame)
    for _ in range(horizon):
        pred = seg_predict(state, cfg, params=params)
        state = SegState(
            fg=pred.fg,
            bg=state.bg,
            a=pred.a,
            lt=state.lt,
            step=state.step + 1,
            clamp_count=pred.clamp_count,
        )
        states.append(state)
        preds.append(pred.frame)
    return SegRun(states=states, predictions=preds, corrected_steps=arr.shape[0] - seed_count)


def dump_run(run: SegRun, outdir, cfg: Optional[SegConfig] = None) -> List[dict]:
    """Write per-step state images and LT velocity tables for inspection.

    Each step gets a directory ``step_%02d`` holding fg/bg/alpha/composite as
    PGM plus the bottlenecked LT velocities as CSV and an arrow overlay on
    the composite.  Returns the written-path records, one dict per step.
    """
    from .tensor_io import make_frame, write_pgm, write_velocity_artifacts

    if cfg is None:
        cfg = SegConfig()
    out = Path(outdir)
    records = []
    for k, (state, frame) in enumerate(zip(run.states, run.predictions)):
        step_dir = out / f"step_{k:02d}"
        step_dir.mkdir(parents=True, exist_ok=True)
        grid, window = cfg.pcfg.plan(state.fg.shape)
        x_vis = lft(state.a * state.fg, grid, window)
        x_a = lft(state.a, grid, window)
        vf = extract_velocity(state.lt, energies=_state_energies(x_vis, x_a))
        rec = {"step": k, "clamp_count": state.clamp_count}
        for name, img in (
            ("fg", state.fg),
            ("bg", state.bg),
            ("alpha", state.a),
            ("composite", frame),
        ):
            path = step_dir / f"{name}.pgm"
            write_pgm(make_frame(np.clip(img, 0.0, 1.0)), path)
            rec[name] = str(path)
        rec.update(
            write_velocity_artifacts(
                vf,
                make_frame(np.clip(frame, 0.0, 1.0)),
                {
                    "csv": step_dir / "lt_velocity.csv",
                    "overlay": step_dir / "lt_overlay.pgm",
                },
                arrow_scale=3.0,
            )
        )
        records.append(rec)
    return records
