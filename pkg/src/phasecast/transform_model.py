"""The learnable velocity-filtering model and its training loop.

A small densely connected convolutional stack reads a (2+2)*(R+1)+2 channel
map per cell grid -- (vx, vy, var_x, var_y) for the newest R+1 velocity
fields, newest first, plus two constant positional planes -- and emits a
two-channel residual added to the newest velocities.  The final projection
starts at zero, so an untrained model is exactly the identity filter.

Training backpropagates through the whole prediction rollout (analysis,
velocity extraction, filtering, phase shifting, synthesis) with decoupled
weight decay and a triangular cyclic learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import json

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .metrics import dssim
from .phase_motion import VelocityField
from .tensor_io import read_tensor, write_tensor


@dataclass
class TrainConfig:
    d_tm: int = 2  # densely connected 3x3 layers
    growth: int = 8  # channels added per layer
    r: int = 1  # velocity-field history beyond the newest
    lr_base: float = 1e-4
    lr_max: float = 1e-2
    lr_period: int = 20  # epochs per triangular cycle
    weight_decay: float = 1e-4
    alpha: float = 1.0  # DSSIM weight
    beta: float = 1.0  # MSE weight
    gamma: float = 0.9  # rollout discount
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.d_tm <= 4:
            raise ValidationError(f"d_tm must be in [2, 4], got {self.d_tm}")
        for name in ("growth", "lr_base", "lr_max", "lr_period", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.r < 0 or self.weight_decay < 0 or self.gamma <= 0:
            raise ValidationError("r, weight_decay must be >= 0 and gamma > 0")
        if self.alpha + self.beta <= 0:
            raise ValidationError("alpha + beta must be positive")


def input_channels(r: int) -> int:
    return (2 + 2) * (r + 1) + 2


@dataclass
class TMInput:
    """Channel stack (C, L_U, L_V), newest field first, positions last."""

    channels: object  # ndarray or traced value
    grid: object
    var_x: object
    var_y: object
    flagged: Optional[np.ndarray]
    r: int
    stale: bool = False  # history was shorter than R+1 and got padded

    @property
    def values(self) -> np.ndarray:
        return ad.value_of(self.channels)


@dataclass
class TMLayer:
    kernel: object  # (growth, C_in, 3, 3)
    bias: object  # (growth,)
    slope: object  # (growth,) PReLU negative-halfplane slopes


@dataclass
class TMParams:
    layers: List[TMLayer]
    proj_kernel: object  # (2, C_total, 1, 1)
    proj_bias: object  # (2,)
    r: int

    @property
    def count(self) -> int:
        n = 0
        for l in self.layers:
            n += ad.value_of(l.kernel).size + ad.value_of(l.bias).size
            n += ad.value_of(l.slope).size
        return n + ad.value_of(self.proj_kernel).size + ad.value_of(self.proj_bias).size


def parameter_count(d_tm: int, growth: int, r: int) -> int:
    """Analytic size of the default architecture for a given config."""
    c = input_channels(r)
    n = 0
    for _ in range(d_tm):
        n += growth * c * 9 + growth + growth  # kernel + bias + prelu slope
        c += growth
    return n + 2 * c + 2  # 1x1 projection


def init_params(config: TrainConfig, seed: Optional[int] = None) -> TMParams:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    c = input_channels(config.r)
    layers = []
    for _ in range(config.d_tm):
        std = np.sqrt(2.0 / (c * 9))
        layers.append(
            TMLayer(
                kernel=rng.normal(0.0, std, (config.growth, c, 3, 3)),
                bias=np.zeros(config.growth),
                slope=np.full(config.growth, 0.25),
            )
        )
        c += config.growth
    # zero-init projection: the untrained model is exactly the identity filter
    return TMParams(
        layers=layers,
        proj_kernel=np.zeros((2, c, 1, 1)),
        proj_bias=np.zeros(2),
        r=config.r,
    )


# ---------------------------------------------------------------------------
# input assembly


def _position_planes(shape) -> np.ndarray:
    l_u, l_v = shape
    rows = np.linspace(-1.0, 1.0, l_u) if l_u > 1 else np.zeros(1)
    cols = np.linspace(-1.0, 1.0, l_v) if l_v > 1 else np.zeros(1)
    return np.stack(
        [np.repeat(rows[:, None], l_v, axis=1), np.repeat(cols[None, :], l_u, axis=0)]
    )


def assemble_input(history: Sequence[VelocityField], r: int) -> TMInput:
    """Stack the newest R+1 velocity fields into the model's channel order.

    ``history`` is chronological (newest last).  A history shorter than R+1
    repeats its oldest entry and marks the result stale.
    """
    if len(history) == 0:
        raise ValidationError("assemble_input needs at least one velocity field")
    newest = history[-1]
    shape = np.shape(ad.value_of(newest.vx))
    picked = []
    stale = len(history) < r + 1
    for back in range(r + 1):
        idx = len(history) - 1 - back
        picked.append(history[max(idx, 0)])

    planes = []
    for vf in picked:
        for part in (vf.vx, vf.vy, vf.var_x, vf.var_y):
            if part is None:
                part = np.zeros(shape)
            planes.append(ad.reshape(part, (1,) + shape))
    planes.append(_position_planes(shape))
    channels = ad.concat(planes, axis=0)
    return TMInput(
        channels=channels,
        grid=newest.grid,
        var_x=newest.var_x,
        var_y=newest.var_y,
        flagged=newest.flagged,
        r=r,
        stale=stale,
    )


# ---------------------------------------------------------------------------
# forward / backward


def _prelu(x, slope):
    neg = ad.minimum(x, 0.0)
    pos = ad.maximum(x, 0.0)
    return ad.add(pos, ad.mul(neg, ad.reshape(slope, (-1, 1, 1))))


def tm_forward(params: TMParams, tmin: TMInput) -> VelocityField:
    """Refined velocities: newest field plus a learned residual.

    Dispersion channels pass through from the newest input field.
    """
    x = tmin.channels
    c_have = np.shape(ad.value_of(x))[0]
    c_want = input_channels(params.r)
    if c_have != c_want:
        raise ValidationError(f"input has {c_have} channels, model expects {c_want}")
    feats = x
    for layer in params.layers:
        y = ad.conv2d(feats, layer.kernel, layer.bias)
        feats = ad.concat([feats, _prelu(y, layer.slope)], axis=0)
    delta = ad.conv2d(feats, params.proj_kernel, params.proj_bias)
    vx = ad.add(ad.getitem(x, 0), ad.getitem(delta, 0))
    vy = ad.add(ad.getitem(x, 1), ad.getitem(delta, 1))
    return VelocityField(
        grid=tmin.grid,
        vx=vx,
        vy=vy,
        var_x=tmin.var_x,
        var_y=tmin.var_y,
        flagged=tmin.flagged,
    )


def _leaf_params(params: TMParams) -> TMParams:
    return TMParams(
        layers=[
            TMLayer(ad.leaf(ad.value_of(l.kernel)), ad.leaf(ad.value_of(l.bias)), ad.leaf(ad.value_of(l.slope)))
            for l in params.layers
        ],
        proj_kernel=ad.leaf(ad.value_of(params.proj_kernel)),
        proj_bias=ad.leaf(ad.value_of(params.proj_bias)),
        r=params.r,
    )


def _param_leaves(params: TMParams):
    for l in params.layers:
        yield l.kernel
        yield l.bias
        yield l.slope
    yield params.proj_kernel
    yield params.proj_bias


def _grads_like(params: TMParams, grads: dict) -> TMParams:
    def g(leaf):
        got = grads.get(leaf)
        return np.zeros_like(ad.value_of(leaf)) if got is None else got

    return TMParams(
        layers=[TMLayer(g(l.kernel), g(l.bias), g(l.slope)) for l in params.layers],
        proj_kernel=g(params.proj_kernel),
        proj_bias=g(params.proj_bias),
        r=params.r,
    )


def tm_backward(params: TMParams, tmin: TMInput, upstream: Tuple[np.ndarray, np.ndarray]):
    """Exact reverse-mode gradients of ``tm_forward``.

    ``upstream`` supplies the output cotangents (d_loss/d_vx, d_loss/d_vy).
    Returns ``(param_grads, channel_grad)`` where ``param_grads`` mirrors the
    TMParams layout and ``channel_grad`` is (C, L_U, L_V).
    """
    gx, gy = (np.asarray(u, dtype=np.float64) for u in upstream)
    leaves = _leaf_params(params)
    x_leaf = ad.leaf(np.asarray(tmin.values, dtype=np.float64))
    traced = replace(tmin, channels=x_leaf)
    out = tm_forward(leaves, traced)
    root = ad.add(ad.asum(ad.mul(out.vx, gx)), ad.asum(ad.mul(out.vy, gy)))
    grads = ad.backward(root)
    channel_grad = grads.get(x_leaf)
    if channel_grad is None:
        channel_grad = np.zeros_like(ad.value_of(x_leaf))
    return _grads_like(leaves, grads), channel_grad


# ---------------------------------------------------------------------------
# flat parameter vector (optimizer and serialization work on this view)


def params_to_vector(params: TMParams) -> np.ndarray:
    return np.concatenate([np.asarray(ad.value_of(p), dtype=np.float64).ravel() for p in _param_leaves(params)])


def vector_to_params(vec: np.ndarray, template: TMParams) -> TMParams:
    vec = np.asarray(vec, dtype=np.float64)
    pos = 0

    def take(ref):
        nonlocal pos
        ref = ad.value_of(ref)
        n = ref.size
        out = vec[pos : pos + n].reshape(ref.shape).copy()
        pos += n
        return out

    layers = [TMLayer(take(l.kernel), take(l.bias), take(l.slope)) for l in template.layers]
    out = TMParams(layers, take(template.proj_kernel), take(template.proj_bias), template.r)
    if pos != vec.size:
        raise ValidationError(f"parameter vector has {vec.size} entries, expected {pos}")
    return out


def save_params(params: TMParams, path, config: Optional[TrainConfig] = None,
                seed: Optional[int] = None, epoch: Optional[int] = None) -> None:
    """LFDT weight vector plus a JSON sidecar describing the architecture."""
    path = Path(path)
    write_tensor(params_to_vector(params).astype(np.float32), path)
    arch = {
        "d_tm": len(params.layers),
        "growth": int(ad.value_of(params.layers[0].kernel).shape[0]) if params.layers else 0,
        "r": params.r,
        "count": params.count,
    }
    sidecar = {
        "architecture": arch,
        "config": None if config is None else config.__dict__,
        "seed": seed,
        "epoch": epoch,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_params(path) -> Tuple[TMParams, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    arch = sidecar["architecture"]
    cfg = TrainConfig(d_tm=arch["d_tm"], growth=arch["growth"], r=arch["r"])
    template = init_params(cfg, seed=0)
    vec = read_tensor(path).data.astype(np.float64)
    params = vector_to_params(vec, template)
    if params.count != arch["count"]:
        raise ValidationError(
            f"weight file holds {params.count} parameters, sidecar says {arch['count']}"
        )
    return params, sidecar


# ---------------------------------------------------------------------------
# training


def cyclic_lr(epoch: int, config: TrainConfig) -> float:
    """Triangular schedule: base -> max -> base over each period."""
    x = (epoch % config.lr_period) / config.lr_period
    tri = 2.0 * x if x <= 0.5 else 2.0 * (1.0 - x)
    return config.lr_base + (config.lr_max - config.lr_base) * tri


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_step(vec, grad, state, lr, weight_decay, b1=0.9, b2=0.999, eps=1e-8):
    state.step += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    mhat = state.m / (1 - b1**state.step)
    vhat = state.v / (1 - b2**state.step)
    return vec - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * vec)


def sequence_loss(frames, seed_count: int, params: TMParams, config: TrainConfig, pcfg):
    """Traced closed-loop rollout loss over one sequence.

    L = alpha * mean_k gamma^k DSSIM + beta * mean_k gamma^k MSE over the
    predicted frames (k is the rollout step).
    """
    from .predictor import rollout

    preds, _ = rollout(frames, seed_count, params=params, pcfg=pcfg, traced=True)
    steps = len(preds)
    d_acc, m_acc, norm = 0.0, 0.0, 0.0
    for k, pred in enumerate(preds):
        target = np.asarray(frames[seed_count + k], dtype=np.float64)
        w = config.gamma**k
        d_acc = ad.add(d_acc, ad.mul(dssim(pred, target), w))
        diff = ad.sub(pred, target)
        m_acc = ad.add(m_acc, ad.mul(ad.amean(ad.square(diff)), w))
        norm += 1.0
    d_mean = ad.div(d_acc, norm)
    m_mean = ad.div(m_acc, norm)
    total = ad.add(ad.mul(d_mean, config.alpha), ad.mul(m_mean, config.beta))
    return total, d_mean, m_mean, steps


def train(dataset, config: TrainConfig, pcfg=None, log_path=None):
    """Optimize the transform model over a dataset of frame sequences.

    Returns ``(params, log)``; ``log`` is a list of per-epoch dicts
    (epoch, lr, loss, dssim, mse).  Loss going non-finite aborts and returns
    the last finite-loss parameters.
    """
    from .predictor import PredictorConfig

    if pcfg is None:
        pcfg = PredictorConfig()
    sequences = [_seq_frames(s) for s in dataset]
    if not sequences:
        raise ValidationError("training needs at least one sequence")
    rng = np.random.default_rng(config.seed)
    params = init_params(config)
    template = params
    vec = params_to_vector(params)
    state = AdamWState(m=np.zeros_like(vec), v=np.zeros_like(vec))
    log = []
    last_good = vec.copy()
    for epoch in range(config.epochs):
        lr = cyclic_lr(epoch, config)
        order = rng.permutation(len(sequences))
        ep_loss, ep_d, ep_m, n_seq = 0.0, 0.0, 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            grad = np.zeros_like(vec)
            for si in batch:
                frames, seed_count = sequences[si]
                leaves = _leaf_params(vector_to_params(vec, template))
                total, d_mean, m_mean, _ = sequence_loss(
                    frames, seed_count, leaves, config, pcfg
                )
                grads = ad.backward(total)
                grad += np.concatenate(
                    [
                        np.asarray(
                            grads.get(p, np.zeros_like(ad.value_of(p))), dtype=np.float64
                        ).ravel()
                        for p in _param_leaves(leaves)
                    ]
                )
                ep_loss += float(ad.value_of(total))
                ep_d += float(ad.value_of(d_mean))
                ep_m += float(ad.value_of(m_mean))
                n_seq += 1
            grad /= max(len(batch), 1)
            vec = adamw_step(vec, grad, state, lr, config.weight_decay)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss": ep_loss / max(n_seq, 1),
            "dssim": ep_d / max(n_seq, 1),
            "mse": ep_m / max(n_seq, 1),
        }
        log.append(row)
        if not np.isfinite(row["loss"]) or not np.isfinite(vec).all():
            row["aborted"] = True
            vec = last_good
            break
        last_good = vec.copy()
    if log_path is not None:
        write_training_log(log_path, log)
    return vector_to_params(vec, template), log


def write_training_log(path, log) -> None:
    lines = ["epoch,lr,loss,dssim,mse"]
    for row in log:
        lines.append(
            f"{row['epoch']},{row['lr']!r},{row['loss']!r},{row['dssim']!r},{row['mse']!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def _seq_frames(seq):
    if hasattr(seq, "as_array"):
        return seq.as_array().astype(np.float64), seq.seed_count
    frames, seed_count = seq
    return np.asarray(frames, dtype=np.float64), seed_count
