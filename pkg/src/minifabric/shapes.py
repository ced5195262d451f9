"""Procedural 16x16 RGB shapes: the image domain, prompt vocabulary and
target-image source.

Every attribute combination (3 shapes x 4 colors x 2 sizes = 24 classes) is a
prompt class; center offset, rotation and brightness are nuisance parameters
deliberately absent from the vocabulary. The `train` variant renders hard
pixel-center edges; the `target` variant is anti-aliased with a light noise
texture so targets are never pixel-identical to training renders.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .schedule import rng_from

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
NULL_TOKEN = "<null>"

# token ids: null first, then shapes, colors, sizes
VOCAB = (NULL_TOKEN,) + SHAPES + COLORS + SIZES
TOKEN_IDS = {tok: i for i, tok in enumerate(VOCAB)}

IMAGE_SHAPE = (3, 16, 16)
_RES = 16
_CENTER = (_RES - 1) / 2.0

# golden normalization (10k-render statistics script); the sampler matches
# its initial latent to the forward-process marginal around this mean
DATASET_CHANNEL_MEAN = (-0.7331932783126831, -0.7328833341598511, -0.8037493228912354)

_PALETTE01 = {
    "red": np.array([1.0, 0.0, 0.0]),
    "green": np.array([0.0, 1.0, 0.0]),
    "blue": np.array([0.0, 0.0, 1.0]),
    "yellow": np.array([1.0, 1.0, 0.0]),
}
_BACKGROUND01 = 0.075
_HALF_EXTENT = {"small": 2.5, "large": 5.0}


def palette_rgb(color: str) -> np.ndarray:
    """Palette color in [-1, 1] space."""
    return (_PALETTE01[color] * 2.0 - 1.0).astype(np.float32)


@dataclass(frozen=True)
class ShapeSpec:
    shape: str
    color: str
    size: str
    offset_x: float = 0.0      # pixels, clamped at render time so the shape fits
    offset_y: float = 0.0
    rotation: float = 0.0      # degrees, used by squares and triangles
    brightness: float = 1.0    # multiplicative, [0.9, 1.1]

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.size not in SIZES:
            raise ValueError(f"unknown attribute in {self}")

    @property
    def class_index(self) -> int:
        return (
            SHAPES.index(self.shape) * len(COLORS) * len(SIZES)
            + COLORS.index(self.color) * len(SIZES)
            + SIZES.index(self.size)
        )

    @property
    def tokens(self) -> tuple[str, str, str]:
        return (self.shape, self.color, self.size)


def class_spec(index: int) -> ShapeSpec:
    """Canonical (nuisance-free) spec of a class index in [0, 24)."""
    s, rem = divmod(index, len(COLORS) * len(SIZES))
    c, z = divmod(rem, len(SIZES))
    return ShapeSpec(SHAPES[s], COLORS[c], SIZES[z])


def _circumradius(spec: ShapeSpec) -> float:
    h = _HALF_EXTENT[spec.size]
    if spec.shape == "circle":
        return h
    if spec.shape == "triangle":
        return h  # vertices on the circumcircle
    return h * 0.8 * np.sqrt(2.0)  # square half-side is 0.8*h


def _mask(spec: ShapeSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Inside test for grid coordinates (pixel units)."""
    max_off = max(_CENTER - _circumradius(spec) - 0.01, 0.0)
    cx = _CENTER + float(np.clip(spec.offset_x, -max_off, max_off))
    cy = _CENTER + float(np.clip(spec.offset_y, -max_off, max_off))
    h = _HALF_EXTENT[spec.size]
    dx = xs - cx
    dy = ys - cy
    if spec.shape == "circle":
        return dx * dx + dy * dy <= h * h
    theta = np.deg2rad(spec.rotation)
    cos, sin = np.cos(theta), np.sin(theta)
    u = cos * dx + sin * dy
    v = -sin * dx + cos * dy
    if spec.shape == "square":
        half_side = h * 0.8
        return (np.abs(u) <= half_side) & (np.abs(v) <= half_side)
    # triangle: equilateral, flat side down, vertices on circle of radius h
    angles = np.deg2rad([90.0, 210.0, 330.0])
    vx = h * np.cos(angles)
    vy = -h * np.sin(angles)  # image y grows downward
    inside = np.ones_like(u, dtype=bool)
    for i in range(3):
        ax, ay = vx[i], vy[i]
        bx, by = vx[(i + 1) % 3], vy[(i + 1) % 3]
        cross = (bx - ax) * (v - ay) - (by - ay) * (u - ax)
        inside &= cross <= 1e-9
    return inside


def render(spec: ShapeSpec, variant: str = "train", seed: int = 0) -> np.ndarray:
    """Render to [3,16,16] float32 in [-1, 1]; deterministic in (spec, variant, seed)."""
    if variant not in ("train", "target"):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "train":
        grid = np.arange(_RES, dtype=np.float64)
        xs, ys = np.meshgrid(grid, grid, indexing="xy")
        coverage = _mask(spec, xs, ys).astype(np.float64)
    else:
        ss = 4
        grid = (np.arange(_RES * ss, dtype=np.float64) + 0.5) / ss - 0.5
        xs, ys = np.meshgrid(grid, grid, indexing="xy")
        fine = _mask(spec, xs, ys).astype(np.float64)
        coverage = fine.reshape(_RES, ss, _RES, ss).mean(axis=(1, 3))

    color01 = np.clip(_PALETTE01[spec.color] * spec.brightness, 0.0, 1.0)
    img01 = _BACKGROUND01 + coverage[None, :, :] * (color01[:, None, None] - _BACKGROUND01)
    if variant == "target":
        rng = rng_from("target-texture", seed)
        img01 = img01 + rng.normal(scale=0.015, size=img01.shape)
    img01 = np.clip(img01, 0.0, 1.0)
    return (img01 * 2.0 - 1.0).astype(np.float32)


def sample_spec(rng: np.random.Generator) -> ShapeSpec:
    """Uniform class, random nuisance parameters."""
    base = class_spec(int(rng.integers(0, 24)))
    rotation = float(rng.uniform(0.0, 90.0)) if base.shape != "circle" else 0.0
    return dataclasses.replace(
        base,
        offset_x=float(rng.uniform(-3.0, 3.0)),
        offset_y=float(rng.uniform(-3.0, 3.0)),
        rotation=rotation,
        brightness=float(rng.uniform(0.9, 1.1)),
    )


def sample_dataset(n: int, rng: np.random.Generator) -> list[tuple[np.ndarray, ShapeSpec]]:
    """n (image, spec) pairs; prompts are the spec's attribute tokens."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out = []
    for _ in range(n):
        spec = sample_spec(rng)
        out.append((render(spec, "train"), spec))
    return out


def dataset_statistics(images: list[np.ndarray]) -> dict:
    stack = np.stack(images)
    return {
        "count": len(images),
        "channel_mean": [float(m) for m in stack.mean(axis=(0, 2, 3))],
        "channel_std": [float(s) for s in stack.std(axis=(0, 2, 3))],
    }


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class Prompt:
    """Three attribute slots, each possibly null (dropped)."""

    shape: str | None = None
    color: str | None = None
    size: str | None = None

    def __post_init__(self):
        for value, vocab in ((self.shape, SHAPES), (self.color, COLORS), (self.size, SIZES)):
            if value is not None and value not in vocab:
                raise ValueError(f"token {value!r} not in vocabulary {vocab}")

    @classmethod
    def from_spec(cls, spec: ShapeSpec) -> "Prompt":
        return cls(spec.shape, spec.color, spec.size)

    @classmethod
    def parse(cls, text: str) -> "Prompt":
        """Parse "circle,red,large" (any order, 'null' allowed per slot)."""
        shape = color = size = None
        for tok in (t.strip() for t in text.split(",") if t.strip()):
            if tok in SHAPES:
                shape = tok
            elif tok in COLORS:
                color = tok
            elif tok in SIZES:
                size = tok
            elif tok not in ("null", NULL_TOKEN):
                raise ValueError(f"unknown prompt token {tok!r}")
        return cls(shape, color, size)

    def token_ids(self) -> np.ndarray:
        """Four token ids: the three slots plus an always-null final slot."""
        ids = [
            TOKEN_IDS[self.shape] if self.shape else 0,
            TOKEN_IDS[self.color] if self.color else 0,
            TOKEN_IDS[self.size] if self.size else 0,
            0,
        ]
        return np.array(ids, dtype=np.int64)

    def as_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "size": self.size}


NULL_PROMPT = Prompt()


def prompt_token_array(prompts: list[Prompt]) -> np.ndarray:
    return np.stack([p.token_ids() for p in prompts])


# ---------------------------------------------------------------------------
# image I/O


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[3,H,W] in [-1,1] -> HxWx3 uint8."""
    arr = np.clip((img.astype(np.float32) + 1.0) * 127.5, 0.0, 255.0)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """HxWx3 uint8 -> [3,H,W] float32 in [-1,1]."""
    return (arr.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through uint8; canonical form of every stored/served image."""
    return from_uint8(to_uint8(img))


def save_png(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_manifest(specs: list[ShapeSpec], path: str | Path) -> None:
    rows = [dataclasses.asdict(s) for s in specs]
    Path(path).write_text(json.dumps(rows, indent=1))


def load_manifest(path: str | Path) -> list[ShapeSpec]:
    return [ShapeSpec(**row) for row in json.loads(Path(path).read_text())]
