"""Frame, tensor, and velocity-field persistence.

Bit-exact file formats shared by the rest of the package:

* binary PGM ("P5", maxval 255 or 65535) for frames and overlays;
* a small "LFDT" container for float32 tensors of any rank;
* CSV velocity tables plus an arrow-overlay raster and a JSON manifest.

Intensities live as float32 in [0, 1] in memory; files quantize only at the
PGM boundary.  All writers are deterministic: identical inputs yield
identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional

import numpy as np

from .errors import FormatError, ValidationError

PGM_MAXVALS = (255, 65535)

# LFDT container: magic, u16 version, u8 dtype code, u8 rank, rank*u32 dims,
# then the row-major little-endian payload.
TENSOR_MAGIC = b"LFDT"
TENSOR_VERSION = 1
DTYPE_FLOAT32 = 0
_DTYPE_BY_CODE = {DTYPE_FLOAT32: np.dtype("<f4")}


@dataclass
class Frame:
    """A height x width grid of real intensities in [0, 1]."""

    height: int
    width: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.shape != (self.height, self.width):
            raise ValidationError(
                f"pixel array shape {self.pixels.shape} does not match "
                f"declared size {(self.height, self.width)}"
            )
        if not np.isfinite(self.pixels).all():
            raise ValidationError("frame pixels must be finite")
        lo, hi = float(self.pixels.min(initial=0.0)), float(self.pixels.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValidationError(f"frame pixels must lie in [0, 1], found range [{lo}, {hi}]")


def make_frame(pixels) -> Frame:
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim != 2:
        raise ValidationError(f"frames are 2-D, got array of rank {arr.ndim}")
    return Frame(height=arr.shape[0], width=arr.shape[1], pixels=arr)


@dataclass
class FrameSequence:
    """An ordered run of same-sized frames; the first ``seed_count`` are
    observations handed to a predictor, the rest are targets."""

    frames: List[Frame] = field(default_factory=list)
    seed_count: int = 2

    def __post_init__(self):
        if self.seed_count < 2:
            raise ValidationError("a sequence needs at least two seed frames")
        if self.seed_count > len(self.frames):
            raise ValidationError(
                f"seed_count {self.seed_count} exceeds frame count {len(self.frames)}"
            )
        shapes = {(f.height, f.width) for f in self.frames}
        if len(shapes) > 1:
            raise ValidationError(f"all frames must share one size, found {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self):
        first = self.frames[0]
        return (len(self.frames), first.height, first.width)

    def as_array(self) -> np.ndarray:
        """Stack to a (T, U, V) float32 array."""
        return np.stack([f.pixels for f in self.frames], axis=0)


def make_sequence(array, seed_count: int = 2) -> FrameSequence:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim != 3:
        raise ValidationError(f"sequences are (T, U, V) stacks, got rank {arr.ndim}")
    return FrameSequence(frames=[make_frame(a) for a in arr], seed_count=seed_count)


@dataclass
class TensorFile:
    """A float32 tensor with the row-major payload the LFDT container stores."""

    data: np.ndarray

    def __post_init__(self):
        # note: keep rank-0 tensors rank 0 (ascontiguousarray would promote)
        self.data = np.asarray(self.data, dtype="<f4", order="C")

    @property
    def dtype_code(self) -> int:
        return DTYPE_FLOAT32

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def dims(self):
        return tuple(self.data.shape)


# ---------------------------------------------------------------------------
# PGM


def _pgm_next_token(buf: bytes, pos: int):
    """Skip whitespace/comments from ``pos``; return (token, start, end)."""
    n = len(buf)
    while pos < n:
        b = buf[pos]
        if b in b" \t\r\n\x0b\x0c":
            pos += 1
        elif b in b"#":
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise FormatError("unexpected end of header", offset=n)
    start = pos
    while pos < n and buf[pos] not in b" \t\r\n\x0b\x0c":
        pos += 1
    return buf[start:pos], start, pos


def _pgm_header_int(buf: bytes, pos: int, what: str):
    tok, start, end = _pgm_next_token(buf, pos)
    if not tok.isdigit():
        raise FormatError(f"expected {what} in header, got {tok!r}", offset=start)
    return int(tok), start, end


def read_pgm(path) -> Frame:
    """Read a binary PGM file into a [0, 1]-scaled Frame."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (expected magic 'P5')", offset=0)
    width, _, pos = _pgm_header_int(buf, 2, "width")
    height, _, pos = _pgm_header_int(buf, pos, "height")
    maxval, mstart, pos = _pgm_header_int(buf, pos, "maxval")
    if width < 1 or height < 1:
        raise FormatError(f"image size {width}x{height} is empty", offset=2)
    if maxval not in PGM_MAXVALS:
        raise FormatError(f"maxval must be one of {PGM_MAXVALS}, got {maxval}", offset=mstart)
    if pos >= len(buf) or buf[pos] not in b" \t\r\n":
        raise FormatError("missing whitespace between header and payload", offset=pos)
    data_off = pos + 1
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    need = width * height * dtype.itemsize
    avail = len(buf) - data_off
    if avail < need:
        raise FormatError(
            f"truncated pixel payload: need {need} bytes, found {avail}", offset=data_off
        )
    raw = np.frombuffer(buf, dtype=dtype, count=width * height, offset=data_off)
    pixels = (raw.astype(np.float32) / np.float32(maxval)).reshape(height, width)
    return Frame(height=height, width=width, pixels=pixels)


def write_pgm(frame: Frame, path, maxval: int = 255) -> None:
    """Quantize to the maxval grid (round-half-up) and write binary PGM."""
    if maxval not in PGM_MAXVALS:
        raise ValidationError(f"maxval must be one of {PGM_MAXVALS}, got {maxval}")
    q = np.floor(frame.pixels.astype(np.float64) * maxval + 0.5)
    q = np.clip(q, 0, maxval)
    payload = q.astype(">u2" if maxval == 65535 else "u1").tobytes()
    header = b"P5\n%d %d\n%d\n" % (frame.width, frame.height, maxval)
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# LFDT tensor container


def write_tensor(t, path) -> None:
    """Serialize a TensorFile (or any float-castable array) bit-exactly."""
    tf = t if isinstance(t, TensorFile) else TensorFile(np.asarray(t))
    head = TENSOR_MAGIC + struct.pack("<HBB", TENSOR_VERSION, tf.dtype_code, tf.rank)
    head += struct.pack(f"<{tf.rank}I", *tf.dims)
    Path(path).write_bytes(head + tf.data.tobytes())


def read_tensor(path) -> TensorFile:
    buf = Path(path).read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} (expected {TENSOR_MAGIC!r})", offset=0)
    if len(buf) < 8:
        raise FormatError("truncated container header", offset=len(buf))
    version, code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)
    if code not in _DTYPE_BY_CODE:
        raise FormatError(f"unsupported dtype code {code}", offset=6)
    head_end = 8 + 4 * rank
    if len(buf) < head_end:
        raise FormatError("truncated dimension list", offset=len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    dtype = _DTYPE_BY_CODE[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = count * dtype.itemsize
    found = len(buf) - head_end
    if found != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, found {found}",
            offset=head_end,
        )
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=head_end).reshape(dims)
    return TensorFile(data=data.copy())


# ---------------------------------------------------------------------------
# velocity artifacts


def _bresenham(r0: int, c0: int, r1: int, c1: int):
    """Integer line from (r0, c0) to (r1, c1), inclusive."""
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dc - dr
    r, c = r0, c0
    points = []
    while True:
        points.append((r, c))
        if r == r1 and c == c1:
            return points
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def cell_centers(grid):
    """Image-coordinate centers of every analysis cell (may overhang edges)."""
    off = (grid.N - 1) / 2.0 - grid.image_pad
    rows = np.arange(grid.L_U) * grid.H + off
    cols = np.arange(grid.L_V) * grid.H + off
    return rows, cols


def draw_velocity_overlay(frame: Frame, vf, arrow_scale: float = 1.0) -> np.ndarray:
    """Paint one arrow segment per cell onto a copy of the frame.

    Each segment is anchored at its cell's center and extends by
    ``velocity * arrow_scale`` pixels; a zero velocity leaves a single
    anchor pixel.  Points falling outside the frame are skipped.
    """
    out = frame.pixels.copy()
    rows, cols = cell_centers(vf.grid)
    vx, vy = (np.asarray(v, dtype=np.float64) for v in vf.values)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            r0, c0 = int(round(r)), int(round(c))
            r1 = int(round(r + vy[i, j] * arrow_scale))
            c1 = int(round(c + vx[i, j] * arrow_scale))
            for pr, pc in _bresenham(r0, c0, r1, c1):
                if 0 <= pr < frame.height and 0 <= pc < frame.width:
                    out[pr, pc] = 1.0
    return out


def velocity_csv_lines(vf) -> List[str]:
    """Render a velocity field as `row,col,vx,vy,var_x,var_y` CSV lines."""
    vx, vy = (np.asarray(v, dtype=np.float64) for v in vf.values)

    def plane(attr):
        value = getattr(vf, attr, None)
        if value is None:
            return np.zeros_like(vx)
        from . import autodiff as ad

        return np.asarray(ad.value_of(value), dtype=np.float64)

    var_x, var_y = plane("var_x"), plane("var_y")
    lines = ["row,col,vx,vy,var_x,var_y"]
    for i in range(vx.shape[0]):
        for j in range(vx.shape[1]):
            lines.append(
                f"{i},{j},{float(vx[i, j])!r},{float(vy[i, j])!r},"
                f"{float(var_x[i, j])!r},{float(var_y[i, j])!r}"
            )
    return lines


def grid_manifest(grid) -> dict:
    return {"U": grid.U, "V": grid.V, "N": grid.N, "H": grid.H, "P": grid.P}


def write_velocity_artifacts(
    vf,
    frame: Frame,
    paths: Mapping[str, object],
    arrow_scale: float = 1.0,
    manifest_extra: Optional[Mapping[str, object]] = None,
) -> dict:
    """Write the CSV table, the arrow overlay, and (optionally) a manifest.

    ``paths`` maps "csv" and "overlay" (and optionally "manifest") to file
    paths.  The manifest records the grid, the sibling paths, and the arrow
    scale so the overlay stays interpretable on its own.
    """
    grid = getattr(vf, "grid", None)
    if grid is None:
        raise ValidationError("velocity field carries no grid")
    if (grid.U, grid.V) != (frame.height, frame.width):
        raise ValidationError(
            f"grid is for {(grid.U, grid.V)} images but frame is {(frame.height, frame.width)}"
        )
    for key in ("csv", "overlay"):
        if key not in paths:
            raise ValidationError(f"paths must provide a {key!r} destination")

    written = {}
    csv_path = Path(paths["csv"])
    csv_path.write_text("\n".join(velocity_csv_lines(vf)) + "\n")
    written["csv"] = str(csv_path)

    overlay_path = Path(paths["overlay"])
    write_pgm(make_frame(draw_velocity_overlay(frame, vf, arrow_scale)), overlay_path)
    written["overlay"] = str(overlay_path)

    if "manifest" in paths:
        manifest = {
            "grid": grid_manifest(grid),
            "window": None,
            "paths": dict(written),
            "seed": None,
            "arrow_scale": float(arrow_scale),
        }
        if manifest_extra:
            manifest.update(manifest_extra)
        manifest_path = Path(paths["manifest"])
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        written["manifest"] = str(manifest_path)
    return written
