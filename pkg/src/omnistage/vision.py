"""Image and video frontends: tiling plans, frame sampling, tile encoder, MLP adapter."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError, InputError, ShapeError
from .nn import Linear, LayerNorm, Module, TransformerBlock
from .tensor import Param, Tensor

TILE = 448
PATCH = 28
GRID = TILE // PATCH  # 16 x 16 patches
TOKENS_PER_TILE = GRID * GRID


@dataclass(frozen=True)
class PatchPlan:
    grid_rows: int
    grid_cols: int
    tile_size: int = TILE
    include_thumbnail: bool = False

    @property
    def resized_height(self) -> int:
        return self.grid_rows * self.tile_size

    @property
    def resized_width(self) -> int:
        return self.grid_cols * self.tile_size

    @property
    def n_tiles(self) -> int:
        return self.grid_rows * self.grid_cols + (1 if self.include_thumbnail else 0)

    @property
    def n_tokens(self) -> int:
        return TOKENS_PER_TILE * self.n_tiles


def plan_patches(width: int, height: int, max_tiles: int = 12) -> PatchPlan:
    """Pick the tiling grid whose aspect ratio is closest to the image's.

    Ties go to fewer tiles, then fewer rows. A thumbnail of the whole image is
    appended whenever more than one detail tile is used; the thumbnail does not
    count against ``max_tiles``.
    """
    if width < 1 or height < 1 or max_tiles < 1:
        raise InputError(f"cannot plan patches for {width}x{height} with max_tiles={max_tiles}")
    target = width / height
    best = None
    for r in range(1, max_tiles + 1):
        for c in range(1, max_tiles // r + 1):
            key = (abs(c / r - target), r * c, r)
            if best is None or key < best[0]:
                best = (key, r, c)
    _, r, c = best
    return PatchPlan(r, c, TILE, r * c > 1)


@dataclass(frozen=True)
class FrameSchedule:
    duration: float
    timestamps: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.timestamps)


def frame_count(duration: float) -> int:
    if duration <= 0:
        raise InputError(f"video duration must be positive, got {duration}")
    if duration < 4:
        return 4
    if duration <= 16:
        return int(math.floor(duration))
    return 16


def sample_frames(duration: float) -> FrameSchedule:
    """Midpoints of ``frame_count(duration)`` equal sub-intervals of the clip."""
    n = frame_count(duration)
    step = duration / n
    return FrameSchedule(duration, tuple((i + 0.5) * step for i in range(n)))


# ---------------------------------------------------------------- image i/o

def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) PPM into float32 [H, W, 3] in [0, 1]."""
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos)
            continue
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise DataError(f"{path}: truncated PPM header")
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a binary P6 PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported (maxval={maxval})")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).astype(np.float32) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    h, w, c = image.shape
    if c != 3:
        raise ShapeError(f"PPM needs 3 channels, got {c}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Align-corners=False bilinear resize of an [H, W, C] array."""
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.astype(np.float32, copy=False)
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def image_tiles(image: np.ndarray, max_tiles: int = 12) -> tuple[PatchPlan, list[np.ndarray]]:
    """Split an image into detail tiles (row-major) followed by the thumbnail, if any."""
    h, w = image.shape[:2]
    plan = plan_patches(w, h, max_tiles)
    resized = resize_bilinear(image, plan.resized_height, plan.resized_width)
    tiles = [resized[r * TILE:(r + 1) * TILE, c * TILE:(c + 1) * TILE]
             for r in range(plan.grid_rows) for c in range(plan.grid_cols)]
    if plan.include_thumbnail:
        tiles.append(resize_bilinear(image, TILE, TILE))
    return plan, tiles


@dataclass
class VideoClip:
    frames: list[Path]
    duration: float
    fps: float


def read_video_dir(path) -> VideoClip:
    """A directory of numbered PPM frames plus ``meta.txt``: ``duration_s=<f> fps=<f>``."""
    path = Path(path)
    meta = path / "meta.txt"
    if not meta.exists():
        raise DataError(f"{path}: missing meta.txt")
    fields = dict(kv.split("=", 1) for kv in meta.read_text().split())
    try:
        duration, fps = float(fields["duration_s"]), float(fields["fps"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{meta}: expected 'duration_s=<float> fps=<float>'") from exc
    frames = sorted(path.glob("*.ppm"), key=lambda p: int(re.sub(r"\D", "", p.stem) or 0))
    if not frames:
        raise DataError(f"{path}: no frames")
    return VideoClip(frames, duration, fps)


def video_frames(clip: VideoClip) -> tuple[FrameSchedule, list[np.ndarray]]:
    """Sampled frames, each resized to one tile (videos are never patched)."""
    schedule = sample_frames(clip.duration)
    last = len(clip.frames) - 1
    picked = [clip.frames[min(int(t * clip.fps), last)] for t in schedule.timestamps]
    return schedule, [resize_bilinear(read_ppm(p), TILE, TILE) for p in picked]


# ---------------------------------------------------------------- networks

def patchify(tile: np.ndarray) -> np.ndarray:
    """[448, 448, 3] -> [256, 28*28*3] rows in row-major patch order."""
    if tile.shape != (TILE, TILE, 3):
        raise ShapeError(f"tile must be {TILE}x{TILE}x3, got {tile.shape}")
    return (tile.reshape(GRID, PATCH, GRID, PATCH, 3).transpose(0, 2, 1, 3, 4)
            .reshape(TOKENS_PER_TILE, PATCH * PATCH * 3))


class VisionEncoder(Module):
    """Patch embedding + learned patch positions + non-causal transformer stack."""

    def __init__(self, d_vis: int, n_blocks: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        self.patch = Linear(PATCH * PATCH * 3, d_vis, rng, dtype)
        self.pos = Param((rng.standard_normal((TOKENS_PER_TILE, d_vis)) * 0.02).astype(dtype))
        self.blocks = [TransformerBlock(d_vis, n_heads, rng, dtype) for _ in range(n_blocks)]
        self.ln = LayerNorm(d_vis, dtype)
        self.d_vis = d_vis

    def encode_tile(self, tile: np.ndarray) -> Tensor:
        x = self.patch(Tensor(patchify(tile).astype(self.pos.dtype))) + self.pos
        for blk in self.blocks:
            x = blk(x, causal=False)
        return self.ln(x)


class VisionAdapter(Module):
    """Per-token two-layer MLP from vision width to LLM width."""

    def __init__(self, d_vis: int, d_llm: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(d_vis, d_llm, rng, dtype)
        self.fc2 = Linear(d_llm, d_llm, rng, dtype)
        self.d_vis = d_vis

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.ndim != 2 or tokens.shape[1] != self.d_vis:
            raise ShapeError(f"vision adapter expects [N x {self.d_vis}], got {tokens.shape}")
        return self.fc2(T.gelu(self.fc1(tokens)))
