"""Image-comparison metrics: L1, MSE, DSSIM, BCE, PSNR.

``ssim_index``/``dssim`` run through the autodiff ops, so they can sit inside
a training loss; handed plain arrays they reduce to plain numpy.  BCE is
reported for completeness even on non-binary frames (informational only:
treat it as a shape-comparison signal, not a calibrated likelihood).
"""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0
BCE_CLAMP = 1e-7


def _pixels(x):
    return getattr(x, "pixels", x)


def _gauss_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_KERNEL = _gauss_kernel()


def ssim_index(a, b):
    """Mean SSIM over valid window positions (dynamic range 1.0).

    Accepts arrays or traced values; the Gaussian window is a constant, so
    gradients flow only through the two images.
    """
    av, bv = ad.value_of(a), ad.value_of(b)
    if np.shape(av) != np.shape(bv):
        raise ValidationError(f"frame shapes differ: {np.shape(av)} vs {np.shape(bv)}")
    if min(np.shape(av)) < SSIM_WINDOW:
        raise ValidationError(
            f"frames must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for the SSIM window"
        )
    w = _SSIM_KERNEL
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = ad.conv2_valid(a, w)
    mu_b = ad.conv2_valid(b, w)
    e_aa = ad.conv2_valid(ad.mul(a, a), w)
    e_bb = ad.conv2_valid(ad.mul(b, b), w)
    e_ab = ad.conv2_valid(ad.mul(a, b), w)
    var_a = ad.sub(e_aa, ad.square(mu_a))
    var_b = ad.sub(e_bb, ad.square(mu_b))
    cov = ad.sub(e_ab, ad.mul(mu_a, mu_b))
    num = ad.mul(
        ad.add(ad.mul(ad.mul(mu_a, mu_b), 2.0), c1),
        ad.add(ad.mul(cov, 2.0), c2),
    )
    den = ad.mul(
        ad.add(ad.add(ad.square(mu_a), ad.square(mu_b)), c1),
        ad.add(ad.add(var_a, var_b), c2),
    )
    return ad.amean(ad.div(num, den))


def dssim(a, b):
    """Structural dissimilarity (1 - SSIM) / 2, in [0, 1]."""
    return ad.mul(ad.sub(1.0, ssim_index(a, b)), 0.5)


def compute_metrics(pred, gt) -> Dict[str, float]:
    """All five comparison metrics between two [0, 1] frames."""
    p = np.asarray(_pixels(pred), dtype=np.float64)
    g = np.asarray(_pixels(gt), dtype=np.float64)
    if p.shape != g.shape:
        raise ValidationError(f"frame shapes differ: {p.shape} vs {g.shape}")
    diff = p - g
    l1 = float(np.mean(np.abs(diff)))
    mse = float(np.mean(diff**2))
    psnr = PSNR_CAP if mse == 0.0 else float(min(-10.0 * np.log10(mse), PSNR_CAP))
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    bce = float(-np.mean(g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc)))
    return {
        "l1": l1,
        "mse": mse,
        "dssim": float(ad.value_of(dssim(p, g))),
        "bce": bce,
        "psnr": psnr,
    }


METRIC_COLUMNS = ("l1", "mse", "dssim", "bce", "psnr")


def evaluate_run(pred_seq, gt_seq, seed_count: int, csv_path=None):
    """Score every predicted frame (seed frames are skipped).

    Returns ``(rows, aggregate)`` where each row is a dict with ``t`` plus
    the metric columns and ``aggregate`` holds per-metric means.  When
    ``csv_path`` is given, writes `t,l1,mse,dssim,bce,psnr` lines with a
    final ``mean`` row.
    """
    pred = _as_stack(pred_seq)
    gt = _as_stack(gt_seq)
    if pred.shape != gt.shape:
        raise ValidationError(f"sequence shapes differ: {pred.shape} vs {gt.shape}")
    if not 0 <= seed_count <= len(pred):
        raise ValidationError(f"seed_count {seed_count} outside [0, {len(pred)}]")
    rows = []
    for t in range(seed_count, len(pred)):
        row = {"t": t}
        row.update(compute_metrics(pred[t], gt[t]))
        rows.append(row)
    if not rows:
        raise ValidationError("no frames left to score after skipping seeds")
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_COLUMNS}
    if csv_path is not None:
        lines = ["t," + ",".join(METRIC_COLUMNS)]
        for r in rows:
            lines.append(str(r["t"]) + "," + ",".join(repr(float(r[k])) for k in METRIC_COLUMNS))
        lines.append("mean," + ",".join(repr(aggregate[k]) for k in METRIC_COLUMNS))
        from pathlib import Path

        Path(csv_path).write_text("\n".join(lines) + "\n")
    return rows, aggregate


def _as_stack(seq) -> np.ndarray:
    if hasattr(seq, "as_array"):
        return seq.as_array().astype(np.float64)
    return np.asarray(seq, dtype=np.float64)
