"""AnyRes tiling, the frozen toy patch encoder, and AnyFrame sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .layers import ConfigError
from .numerics import Linear, Module, Parameter, RMSNorm, Rng, Tensor, no_grad
from .numerics import functional as F
from .ssm import DomainError

TRAIN_ASPECTS: tuple[tuple[int, int], ...] = ((1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (1, 3), (1, 4), (4, 1))


@dataclass
class Image:
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) pixels, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        self.pixels = px.astype(np.uint8, copy=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def solid(cls, width: int, height: int, rgb) -> "Image":
        return cls(np.broadcast_to(np.asarray(rgb, dtype=np.uint8), (height, width, 3)).copy())


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(img: Image, width: int, height: int) -> Image:
    """Corner-aligned bilinear resampling, rounded back to 8 bits."""
    if (width, height) == (img.width, img.height):
        return Image(img.pixels.copy())
    src = img.pixels.astype(np.float64)
    y0, y1, fy = _axis_weights(img.height, height)
    x0, x1, fx = _axis_weights(img.width, width)
    rows = src[y0] * (1 - fy)[:, None, None] + src[y1] * fy[:, None, None]
    out = rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# AnyRes


def match_aspect_ratio(w: int, h: int, aspects: Sequence[tuple[int, int]] = TRAIN_ASPECTS) -> tuple[int, int]:
    """Grid (cols, rows) whose ratio is closest to w/h.

    Exact rational comparison; ties go to fewer tiles, then to list order.
    """
    if not aspects:
        raise ConfigError("aspect ratio set is empty")
    if w < 1 or h < 1:
        raise DomainError(f"image size must be positive, got {w}x{h}")
    target = Fraction(w, h)
    best = min(
        range(len(aspects)),
        key=lambda i: (abs(target - Fraction(*aspects[i])), aspects[i][0] * aspects[i][1], i),
    )
    return tuple(aspects[best])


def inference_grid(w: int, h: int, tile_size: int) -> tuple[int, int]:
    return math.ceil(w / tile_size), math.ceil(h / tile_size)


@dataclass
class TileLayout:
    grid: tuple[int, int]  # (cols, rows)
    tile_size: int
    patch: int
    tiles: list[Image]
    global_image: Image | None = None
    resized: Image | None = field(default=None, repr=False)

    @property
    def tokens_per_tile(self) -> int:
        return (self.tile_size // self.patch) ** 2

    @property
    def token_count(self) -> int:
        return (len(self.tiles) + (self.global_image is not None)) * self.tokens_per_tile

    def images(self) -> list[Image]:
        """Tiles in row-major grid order, global image last."""
        return self.tiles + ([self.global_image] if self.global_image is not None else [])


def tile_image(
    img: Image, grid: tuple[int, int], tile_size: int = 336, include_global: bool = False, patch: int = 14
) -> TileLayout:
    cols, rows = grid
    if cols < 1 or rows < 1:
        raise ConfigError(f"invalid grid {grid}")
    big = resize_bilinear(img, cols * tile_size, rows * tile_size)
    tiles = [
        Image(big.pixels[r * tile_size : (r + 1) * tile_size, c * tile_size : (c + 1) * tile_size].copy())
        for r in range(rows)
        for c in range(cols)
    ]
    glob = None
    if include_global and (cols, rows) != (1, 1):
        glob = resize_bilinear(img, tile_size, tile_size)
    return TileLayout((cols, rows), tile_size, patch, tiles, glob, big)


def count_visual_tokens(w: int, h: int, tile_size: int = 336, patch: int = 14, include_global: bool = True) -> int:
    """Visual tokens for an inference-time (ceil-division) tiling of a w x h image.

    As in :func:`tile_image`, the global view is only added when the grid
    has more than one tile.
    """
    if tile_size % patch:
        raise ConfigError(f"tile_size {tile_size} not divisible by patch {patch}")
    cols, rows = inference_grid(w, h, tile_size)
    n = cols * rows + (1 if include_global and cols * rows > 1 else 0)
    return n * (tile_size // patch) ** 2


def layout_for(img: Image, tile_size: int, patch: int, include_global: bool, phase: str = "inference",
               aspects: Sequence[tuple[int, int]] = TRAIN_ASPECTS) -> TileLayout:
    """Training matches the aspect set; inference tiles by ceil-division."""
    if phase == "train":
        grid = match_aspect_ratio(img.width, img.height, aspects)
    else:
        grid = inference_grid(img.width, img.height, tile_size)
    return tile_image(img, grid, tile_size, include_global, patch)


# ---------------------------------------------------------------------------
# frozen patch encoder


class _EncoderBlock(Module):
    def __init__(self, width: int, n_heads: int, rng: Rng):
        self.n_heads = n_heads
        self.norm1 = RMSNorm(width)
        self.qkv = Linear(width, 3 * width, rng.child("qkv"))
        self.proj = Linear(width, width, rng.child("proj"))
        self.norm2 = RMSNorm(width)
        self.fc1 = Linear(width, 2 * width, rng.child("fc1"), bias=True)
        self.fc2 = Linear(2 * width, width, rng.child("fc2"), bias=True)

    def __call__(self, x: Tensor) -> Tensor:
        B, L, W = x.shape
        H, dh = self.n_heads, W // self.n_heads
        qkv = self.qkv(self.norm1(x)).reshape(B, L, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = F.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
        a = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, W)
        x = x + self.proj(a)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class PatchEncoder(Module):
    """Randomly initialised, frozen ViT-style encoder: one feature per patch."""

    def __init__(self, rng: Rng, tile_size: int = 336, patch: int = 14, width: int = 32,
                 n_layers: int = 2, n_heads: int = 2):
        if tile_size % patch:
            raise ConfigError(f"tile_size {tile_size} not divisible by patch {patch}")
        self.tile_size, self.patch, self.width = tile_size, patch, width
        self.grid = tile_size // patch
        self.embed = Linear(patch * patch * 3, width, rng.child("embed"), bias=True)
        self.pos = Parameter(rng.child("pos").normal(0.0, 0.5, (self.grid * self.grid, width)))
        self.blocks = [_EncoderBlock(width, n_heads, rng.child(f"block{i}")) for i in range(n_layers)]
        self.norm = RMSNorm(width)
        self.set_trainable(False)

    def set_trainable(self, flag: bool) -> None:
        # frozen for good: the flag is ignored once constructed
        super().set_trainable(False)

    def patchify(self, pixels: np.ndarray) -> np.ndarray:
        """(B, S, S, 3) uint8 → (B, g*g, p*p*3) in [-0.5, 0.5]."""
        B = pixels.shape[0]
        g, p = self.grid, self.patch
        x = pixels.astype(np.float64) / 255.0 - 0.5
        x = x.reshape(B, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, p * p * 3)

    def __call__(self, images: Sequence[Image]) -> np.ndarray:
        """Encode tiles independently: (n_images, g*g, width)."""
        for im in images:
            if (im.width, im.height) != (self.tile_size, self.tile_size):
                raise ValueError(f"encoder expects {self.tile_size}x{self.tile_size} tiles, got {im.width}x{im.height}")
        with no_grad():
            x = self.embed(Tensor(self.patchify(np.stack([im.pixels for im in images])))) + self.pos
            for blk in self.blocks:
                x = blk(x)
            return self.norm(x).data


def encode_tiles(enc: PatchEncoder, layout: TileLayout) -> np.ndarray:
    """Per-tile features flattened and concatenated in grid order, global last."""
    imgs = layout.images()
    if not imgs:
        raise ValueError("layout has no tiles")
    feats = enc(imgs)
    return feats.reshape(-1, enc.width)


def encode_frames(enc: PatchEncoder, frames: Sequence[Image]) -> np.ndarray:
    """Frames resized to one tile each → (n, g, g, width) feature grids."""
    tiles = [resize_bilinear(f, enc.tile_size, enc.tile_size) for f in frames]
    return enc(tiles).reshape(len(frames), enc.grid, enc.grid, enc.width)


# ---------------------------------------------------------------------------
# AnyFrame


def frame_indices(F_: int, n: int) -> list[int]:
    """Uniform indices round(i*(F-1)/(n-1)) (halves round up); midpoint F//2 when n == 1."""
    if F_ < 1:
        raise DomainError("video has no frames")
    if n < 1:
        raise DomainError(f"need at least one frame, asked for {n}")
    if n == 1:
        return [F_ // 2]
    return [(2 * i * (F_ - 1) + (n - 1)) // (2 * (n - 1)) for i in range(n)]


def sample_frames(video: Sequence, n: int) -> list:
    return [video[i] for i in frame_indices(len(video), n)]
