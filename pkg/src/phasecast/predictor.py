"""Closed-loop frame prediction.

One step: analyze the two newest frames into local spectra, measure per-cell
velocities from the cross-spectrum phase, optionally refine them with the
learned filtering model, synthesize the velocity back into per-cell phase
ramps, advance the newest spectra by those ramps, and overlap-add with
matching shifted windows.  Rollouts feed predictions back as inputs, so the
whole multi-step computation stays differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .lft import GridSpec, Window, lft, m_ilft, make_window, plan_grid
from .phase_motion import (
    VelocityField,
    cross_energies,
    extract_velocity,
    phase_add,
    phase_diff,
    velocity_to_pd,
)
from .transform_model import TMParams, assemble_input, tm_forward


@dataclass(frozen=True)
class PredictorConfig:
    window_n: int = 15
    hop: int = 7
    pad: int = 4
    window_kind: str = "confined_gaussian"
    sigma_t: float = 0.3
    clamp_output: bool = True  # keep predictions in the frame value range

    def plan(self, shape) -> Tuple[GridSpec, Window]:
        u, v = shape
        grid = plan_grid(u, v, self.window_n, self.hop, self.pad)
        window = make_window(self.window_kind, self.window_n, sigma_t=self.sigma_t)
        return grid, window


@dataclass
class PredictionStep:
    frame: Any  # (U, V) predicted next frame
    raw: VelocityField  # measured from the two input frames
    refined: VelocityField  # after the filtering model (== raw without one)
    history: List[VelocityField]  # raw fields, chronological, trimmed


def measure_velocity(x_prev, x_t, grid: GridSpec, window: Window) -> VelocityField:
    """Per-cell velocity of x_prev -> x_t with cross-spectrum energy weights."""
    s_prev = lft(x_prev, grid, window)
    s_t = lft(x_t, grid, window)
    pd = phase_diff(s_t, s_prev)
    return extract_velocity(pd, energies=cross_energies(s_t, s_prev))


def predict_next_frame(
    x_prev,
    x_t,
    pcfg: Optional[PredictorConfig] = None,
    params: Optional[TMParams] = None,
    history: Sequence[VelocityField] = (),
) -> PredictionStep:
    """Advance one step: x(t-1), x(t) -> x(t+1) estimate.

    Without ``params`` the measured velocities are used directly, which is
    exactly what the untrained (zero-residual) model computes.
    """
    if pcfg is None:
        pcfg = PredictorConfig()
    shape = np.shape(ad.value_of(x_t))
    if np.shape(ad.value_of(x_prev)) != shape:
        raise ValidationError("consecutive frames differ in shape")
    grid, window = pcfg.plan(shape)

    s_prev = lft(x_prev, grid, window)
    s_t = lft(x_t, grid, window)
    pd = phase_diff(s_t, s_prev)
    raw = extract_velocity(pd, energies=cross_energies(s_t, s_prev))

    new_history = list(history) + [raw]
    if params is not None:
        new_history = new_history[-(params.r + 1) :]
        refined = tm_forward(params, assemble_input(new_history, params.r))
    else:
        new_history = new_history[-1:]
        refined = raw

    pd_hat = velocity_to_pd(refined, grid.n_prime)
    shifted = phase_add(s_t, pd_hat)
    frame = m_ilft(shifted, window, pd_hat.pd, grid)
    if pcfg.clamp_output:
        frame = ad.minimum(ad.maximum(frame, 0.0), 1.0)
    return PredictionStep(frame=frame, raw=raw, refined=refined, history=new_history)


def rollout(
    frames,
    seed_count: int,
    params: Optional[TMParams] = None,
    pcfg: Optional[PredictorConfig] = None,
    traced: bool = False,
) -> Tuple[list, List[PredictionStep]]:
    """Predict every frame past the seeds, feeding predictions back in.

    ``frames`` is (T, U, V); the first ``seed_count`` frames are real inputs,
    the remaining T - seed_count are prediction targets.  Returns the list of
    predicted frames (traced values when ``traced``) and the per-step records.
    Tracing starts wherever the first traced quantity (usually the model
    parameters) enters; seed frames stay plain data.
    """
    arr = frames.as_array() if hasattr(frames, "as_array") else frames
    values = np.asarray(ad.value_of(arr), dtype=np.float64)
    total = values.shape[0]
    if seed_count < 2:
        raise ValidationError(f"rollouts need at least 2 seed frames, got {seed_count}")
    if total <= seed_count:
        raise ValidationError(
            f"nothing to predict: {total} frames with seed_count={seed_count}"
        )
    if pcfg is None:
        pcfg = PredictorConfig()

    x_prev: Any = values[seed_count - 2]
    x_t: Any = values[seed_count - 1]
    history: List[VelocityField] = []
    if params is not None and params.r and seed_count > 2:
        # warm the velocity history on the seed prefix
        grid, window = pcfg.plan(values.shape[1:])
        for t in range(1, seed_count - 1):
            history.append(measure_velocity(values[t - 1], values[t], grid, window))
        history = history[-params.r :]

    preds = []
    steps = []
    for _ in range(total - seed_count):
        step = predict_next_frame(x_prev, x_t, pcfg=pcfg, params=params, history=history)
        out = step.frame if traced else np.asarray(ad.value_of(step.frame))
        preds.append(out)
        steps.append(step)
        history = step.history
        x_prev, x_t = x_t, out
    return preds, steps
