"""Procedural moving-sprite scenes with exact ground truth.

Sprites (discs, regular polygons, or user-supplied glyph bitmaps) carry a
fixed textured stamp and move with subpixel velocities, optional rotation
and scaling, bouncing off the frame edges.  Every frame is rendered by
bilinearly sampling each stamp under the inverse of its pose transform and
alpha-compositing in sprite order (later sprites occlude earlier ones).

Ground truth records per-frame poses, binary masks, and a per-cell velocity
field on the analysis grid (dominant visible sprite per cell, zero where
only background shows).  Everything is deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import ValidationError
from .lft import GridSpec, plan_grid
from .tensor_io import (
    Frame,
    FrameSequence,
    grid_manifest,
    make_frame,
    read_pgm,
    write_pgm,
    write_tensor,
)

SPRITE_SHAPES = ("disc", "polygon", "glyph")
BACKGROUNDS = ("black", "texture")


@dataclass
class SpriteSpec:
    """One moving sprite: shape, pose track parameters, and appearance."""

    shape: str = "disc"
    size: float = 8.0  # circumradius in pixels at scale 1
    n_sides: int = 5  # polygon only
    glyph_path: Optional[str] = None  # glyph only: PGM stamp, gray = coverage
    position: Tuple[float, float] = (32.0, 32.0)  # (y, x) center
    velocity: Tuple[float, float] = (0.0, 0.0)  # (vy, vx) px/frame
    angle: float = 0.0  # initial orientation, degrees
    spin: float = 0.0  # degrees/frame
    scale: float = 1.0
    scale_rate: float = 1.0  # multiplicative per frame
    intensity: float = 0.6
    texture_amp: float = 0.6  # 0 = flat fill
    texture_seed: int = 0


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    sprites: List[SpriteSpec] = field(default_factory=lambda: [SpriteSpec()])
    background: str = "texture"
    background_seed: int = 0
    frame_count: int = 10
    seed_count: int = 2
    seed: int = 0
    bounce: bool = True  # False: clamp at the margin instead
    p_bound: float = 4.0  # |velocity| budget the downstream ring must cover
    # analysis grid the ground-truth velocity field is labeled on
    window_n: int = 15
    hop: int = 7
    pad: int = 4


def _validate(cfg: SceneConfig) -> None:
    if cfg.background not in BACKGROUNDS:
        raise ValidationError(f"background must be one of {BACKGROUNDS}, got {cfg.background!r}")
    if cfg.frame_count < cfg.seed_count:
        raise ValidationError("frame_count must cover the seed frames")
    for i, sp in enumerate(cfg.sprites):
        if sp.shape not in SPRITE_SHAPES:
            raise ValidationError(f"sprite {i}: shape must be one of {SPRITE_SHAPES}")
        if max(abs(sp.velocity[0]), abs(sp.velocity[1])) > cfg.p_bound:
            raise ValidationError(
                f"sprite {i}: |velocity| {sp.velocity} exceeds the p_bound {cfg.p_bound}"
            )
        if sp.shape == "glyph" and sp.glyph_path is None:
            raise ValidationError(f"sprite {i}: glyph sprites need glyph_path")


# ---------------------------------------------------------------------------
# stamps


def _disc_stamp(radius: float) -> np.ndarray:
    n = int(np.ceil(radius)) * 2 + 3
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n]
    dist = np.hypot(yy - c, xx - c)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)  # one-pixel soft rim


def _polygon_stamp(circumradius: float, n_sides: int) -> np.ndarray:
    if n_sides < 3:
        raise ValidationError(f"polygons need at least 3 sides, got {n_sides}")
    n = int(np.ceil(circumradius)) * 2 + 3
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n]
    apothem = circumradius * np.cos(np.pi / n_sides)
    inward = np.full((n, n), np.inf)
    for k in range(n_sides):
        # outward normal of edge k (edges midway between adjacent vertices)
        ang = 2.0 * np.pi * (k + 0.5) / n_sides
        proj = (yy - c) * np.sin(ang) + (xx - c) * np.cos(ang)
        inward = np.minimum(inward, apothem - proj)
    return np.clip(inward + 0.5, 0.0, 1.0)


def _glyph_stamp(path: str) -> np.ndarray:
    return read_pgm(path).pixels.astype(np.float64)


def _sprite_stamps(sp: SpriteSpec):
    """(coverage, premultiplied value) stamps plus the stamp circumradius."""
    if sp.shape == "disc":
        cov = _disc_stamp(sp.size)
    elif sp.shape == "polygon":
        cov = _polygon_stamp(sp.size, sp.n_sides)
    else:
        cov = _glyph_stamp(sp.glyph_path)
    rng = np.random.default_rng(sp.texture_seed)
    tex = sp.intensity + sp.texture_amp * (rng.random(cov.shape) - 0.5)
    value = np.clip(tex, 0.0, 1.0) * cov
    radius = 0.5 * float(np.hypot(*cov.shape))
    return cov, value, radius


def _bilinear(img: np.ndarray, qy: np.ndarray, qx: np.ndarray) -> np.ndarray:
    """Sample ``img`` at float coords; outside the stamp everything is 0."""
    h, w = img.shape
    y0 = np.floor(qy).astype(np.int64)
    x0 = np.floor(qx).astype(np.int64)
    fy = qy - y0
    fx = qx - x0

    def tap(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        return np.where(inside, img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)

    return (
        tap(y0, x0) * (1 - fy) * (1 - fx)
        + tap(y0, x0 + 1) * (1 - fy) * fx
        + tap(y0 + 1, x0) * fy * (1 - fx)
        + tap(y0 + 1, x0 + 1) * fy * fx
    )


# ---------------------------------------------------------------------------
# pose tracks


def _pose_track(cfg: SceneConfig, sp: SpriteSpec, stamp_radius: float):
    """Positions, angles, scales for every frame (bounce or clamp at edges)."""
    pos = np.empty((cfg.frame_count, 2))
    vel = np.empty((cfg.frame_count, 2))
    p = np.asarray(sp.position, dtype=np.float64)
    v = np.asarray(sp.velocity, dtype=np.float64)
    for t in range(cfg.frame_count):
        scale_t = sp.scale * sp.scale_rate**t
        margin = stamp_radius * scale_t
        lo = np.array([margin, margin])
        hi = np.array([cfg.height - 1 - margin, cfg.width - 1 - margin])
        if (lo > hi).any():
            raise ValidationError(
                f"sprite with radius {margin:.1f} does not fit the "
                f"{cfg.height}x{cfg.width} frame"
            )
        for ax in range(2):
            if p[ax] < lo[ax]:
                p[ax] = 2 * lo[ax] - p[ax] if cfg.bounce else lo[ax]
                v[ax] = abs(v[ax]) if cfg.bounce else v[ax]
            elif p[ax] > hi[ax]:
                p[ax] = 2 * hi[ax] - p[ax] if cfg.bounce else hi[ax]
                v[ax] = -abs(v[ax]) if cfg.bounce else v[ax]
        pos[t] = p
        vel[t] = v
        p = p + v
    angles = sp.angle + sp.spin * np.arange(cfg.frame_count)
    scales = sp.scale * sp.scale_rate ** np.arange(cfg.frame_count)
    return pos, vel, angles, scales


# ---------------------------------------------------------------------------
# rendering


def _render(cfg: SceneConfig, tracks, stamps):
    h, w = cfg.height, cfg.width
    if cfg.background == "texture":
        bg = 0.05 + 0.4 * np.random.default_rng(cfg.background_seed).random((h, w))
    else:
        bg = np.zeros((h, w))
    frames = np.empty((cfg.frame_count, h, w), dtype=np.float64)
    labels = np.full((cfg.frame_count, h, w), -1, dtype=np.int64)
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    for t in range(cfg.frame_count):
        out = bg.copy()
        for s, ((pos, _, angles, scales), (cov_st, val_st, _)) in enumerate(zip(tracks, stamps)):
            py, px = pos[t]
            theta = np.deg2rad(angles[t])
            scale = scales[t]
            cy = (cov_st.shape[0] - 1) / 2.0
            cx = (cov_st.shape[1] - 1) / 2.0
            dy = rows[:, None] - py
            dx = cols[None, :] - px
            qy = (np.cos(theta) * dy + np.sin(theta) * dx) / scale + cy
            qx = (-np.sin(theta) * dy + np.cos(theta) * dx) / scale + cx
            cov = _bilinear(cov_st, qy, qx)
            val = _bilinear(val_st, qy, qx)
            out = out * (1.0 - cov) + val
            labels[t][cov >= 0.5] = s
        frames[t] = np.clip(out, 0.0, 1.0)
    return frames, labels


# ---------------------------------------------------------------------------
# ground truth assembly


@dataclass
class GroundTruth:
    """Oracle record: poses (T,S,4 as y,x,angle,scale), per-frame velocities
    (T,S,2 as vy,vx), binary masks, and the per-cell velocity labels."""

    grid: GridSpec
    poses: np.ndarray
    sprite_velocity: np.ndarray
    masks: np.ndarray  # (T, S, U, V) bool, after occlusion
    cell_velocity: np.ndarray  # (T, L_U, L_V, 2) as (vx, vy)

    @property
    def foreground(self) -> np.ndarray:
        """(T, U, V) union of all sprite masks."""
        return self.masks.any(axis=1)


def _dominant_cell_velocity(grid: GridSpec, labels_t, vel_t):
    """Per cell: velocity of the sprite owning the most pixels of the cell's
    central H x H block; (0, 0) where only background shows.  Ties go to the
    later (topmost) sprite."""
    out = np.zeros((grid.L_U, grid.L_V, 2))
    half = (grid.H - 1) // 2
    off = (grid.N - 1) / 2.0 - grid.image_pad
    n_sprites = vel_t.shape[0]
    for i in range(grid.L_U):
        r = int(round(i * grid.H + off))
        r0, r1 = max(r - half, 0), min(r - half + grid.H, grid.U)
        for j in range(grid.L_V):
            c = int(round(j * grid.H + off))
            c0, c1 = max(c - half, 0), min(c - half + grid.H, grid.V)
            block = labels_t[r0:r1, c0:c1]
            best, best_count = -1, 0
            for s in range(n_sprites):
                count = int((block == s).sum())
                if count >= best_count and count > 0:
                    best, best_count = s, count
            if best >= 0:
                vy, vx = vel_t[best]
                out[i, j] = (vx, vy)
    return out


def gen_sequence(cfg: SceneConfig):
    """Render a scene; returns (FrameSequence, GroundTruth)."""
    _validate(cfg)
    grid = plan_grid(cfg.height, cfg.width, cfg.window_n, cfg.hop, cfg.pad)
    stamps = [_sprite_stamps(sp) for sp in cfg.sprites]
    tracks = [
        _pose_track(cfg, sp, radius) for sp, (_, _, radius) in zip(cfg.sprites, stamps)
    ]
    frames, labels = _render(cfg, tracks, stamps)

    n_s = len(cfg.sprites)
    t_n = cfg.frame_count
    poses = np.zeros((t_n, n_s, 4))
    vels = np.zeros((t_n, n_s, 2))
    for s, (pos, vel, angles, scales) in enumerate(tracks):
        poses[:, s, 0:2] = pos
        poses[:, s, 2] = angles
        poses[:, s, 3] = scales
        # label frame t with the displacement that produced it (p_t - p_{t-1})
        vels[1:, s] = pos[1:] - pos[:-1]
        vels[0, s] = vels[1, s] if t_n > 1 else 0.0
    masks = np.stack([(labels == s) for s in range(n_s)], axis=1)
    cell_vel = np.stack(
        [_dominant_cell_velocity(grid, labels[t], vels[t]) for t in range(t_n)], axis=0
    )
    seq = FrameSequence(
        frames=[make_frame(f.astype(np.float32)) for f in frames], seed_count=cfg.seed_count
    )
    return seq, GroundTruth(
        grid=grid, poses=poses, sprite_velocity=vels, masks=masks, cell_velocity=cell_vel
    )


def random_scene_config(
    seed: int,
    n_sprites: int = 2,
    frame_count: int = 10,
    seed_count: int = 2,
    max_speed: float = 2.0,
    background: str = "black",
) -> SceneConfig:
    """A bouncing-sprites scene drawn from a fixed distribution.

    Sprites are discs or regular polygons with independent textures, placed
    away from the walls with per-axis speeds up to ``max_speed``; motion is
    pure translation with wall bounces (no spin or scaling), which keeps the
    ground-truth per-cell velocity labels exact.  The default background is
    black: a static full-field texture carries more spectral energy than a
    small sprite in almost every cell, so the per-cell dominant translation
    would be the background's zero motion rather than the sprite's.
    """
    rng = np.random.default_rng(seed)
    sprites = []
    for s in range(n_sprites):
        shape = "disc" if rng.random() < 0.5 else "polygon"
        size = float(rng.uniform(5.0, 9.0))
        margin = size + 5.0
        pos = (
            float(rng.uniform(margin, 64.0 - margin)),
            float(rng.uniform(margin, 64.0 - margin)),
        )
        speed = rng.uniform(0.5, max_speed)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        sprites.append(
            SpriteSpec(
                shape=shape,
                size=size,
                n_sides=int(rng.integers(3, 7)),
                position=pos,
                velocity=(float(speed * np.sin(theta)), float(speed * np.cos(theta))),
                intensity=float(rng.uniform(0.45, 0.75)),
                texture_amp=float(rng.uniform(0.4, 0.7)),
                texture_seed=int(rng.integers(0, 2**31)),
            )
        )
    return SceneConfig(
        sprites=sprites,
        background=background,
        background_seed=int(rng.integers(0, 2**31)),
        frame_count=frame_count,
        seed_count=seed_count,
        seed=int(rng.integers(0, 2**31)),
    )


# ---------------------------------------------------------------------------
# translating-texture sequences (calibration targets: the shift is exact)


def bandlimited_texture(size: int, cut: float = 0.42, seed: int = 0) -> np.ndarray:
    """Noise with spectral support |f| <= cut cycles/px, scaled into (0, 1).

    Band-limiting keeps subpixel Fourier translation exact on the sample
    grid; the 0.02 margin keeps resampling overshoot inside the frame range.
    """
    if not 0.0 < cut <= 0.5:
        raise ValidationError(f"cut must be in (0, 0.5], got {cut}")
    rng = np.random.default_rng(seed)
    spec = np.fft.fft2(rng.uniform(0.0, 1.0, (size, size)))
    f = np.fft.fftfreq(size)
    keep = (np.abs(f)[:, None] <= cut) & (np.abs(f)[None, :] <= cut)
    x = np.real(np.fft.ifft2(spec * keep))
    lo, hi = x.min(), x.max()
    return 0.02 + 0.96 * (x - lo) / (hi - lo)


def translating_sequence(
    velocity,
    frame_count: int,
    size: int = 64,
    texture_size: int = 128,
    cut: float = 0.42,
    seed: int = 0,
) -> np.ndarray:
    """(T, size, size) crops of a large texture translating at ``(vy, vx)``.

    The motion is a global Fourier shift of the full periodic texture, so
    every frame is the exact subpixel translation of the first (fresh content
    scrolls in from the rest of the texture, not from wrap-around).
    """
    if texture_size < size:
        raise ValidationError("texture must be at least as large as the crop")
    tex = bandlimited_texture(texture_size, cut=cut, seed=seed)
    spec = np.fft.fft2(tex)
    fy = np.fft.fftfreq(texture_size)[:, None]
    fx = np.fft.fftfreq(texture_size)[None, :]
    vy, vx = float(velocity[0]), float(velocity[1])
    frames = []
    for t in range(frame_count):
        ramp = np.exp(-2j * np.pi * (fy * vy + fx * vx) * t)
        moved = np.real(np.fft.ifft2(spec * ramp))
        frames.append(np.clip(moved[:size, :size], 0.0, 1.0))
    return np.stack(frames)


# ---------------------------------------------------------------------------
# dataset directories


def scene_config_to_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)


def scene_config_from_dict(d: dict) -> SceneConfig:
    d = dict(d)
    sprites = [SpriteSpec(**s) if isinstance(s, dict) else s for s in d.pop("sprites", [])]
    cfg = SceneConfig(**d)
    if sprites:
        cfg.sprites = sprites
    for sp in cfg.sprites:
        sp.position = tuple(sp.position)
        sp.velocity = tuple(sp.velocity)
    return cfg


def write_dataset(outdir, cfg: SceneConfig, seq: FrameSequence, gt: GroundTruth) -> dict:
    """Lay out frames/%04d.pgm, gt/masks/%04d.pgm, gt/velocity.lfdt, manifest."""
    out = Path(outdir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "gt" / "masks").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        write_pgm(frame, out / "frames" / f"{t:04d}.pgm")
    fg = gt.foreground
    for t in range(len(seq)):
        write_pgm(make_frame(fg[t].astype(np.float32)), out / "gt" / "masks" / f"{t:04d}.pgm")
    write_tensor(gt.cell_velocity.astype(np.float32), out / "gt" / "velocity.lfdt")
    write_tensor(gt.poses.astype(np.float32), out / "gt" / "poses.lfdt")
    manifest = {
        "scene": scene_config_to_dict(cfg),
        "grid": grid_manifest(gt.grid),
        "frame_count": len(seq),
        "seed_count": seq.seed_count,
        "paths": {
            "frames": "frames/%04d.pgm",
            "masks": "gt/masks/%04d.pgm",
            "velocity": "gt/velocity.lfdt",
            "poses": "gt/poses.lfdt",
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(path):
    """Load a written dataset back as (manifest, FrameSequence)."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    frames = [
        read_pgm(root / "frames" / f"{t:04d}.pgm") for t in range(manifest["frame_count"])
    ]
    return manifest, FrameSequence(frames=frames, seed_count=manifest["seed_count"])
