"""Color-coded piano-roll images.

A roll is a 128 x width grid of YUV pixels, row = MIDI pitch, column = time
step.  Luma carries velocity (50..100 for notes, 0 for silence) and the
chroma pair identifies the instrument family.  Rolls are stored as 8-bit RGB
PNG using full-range BT.601, with high pitches at the top of the image.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .note_codec import InstrumentClass, NoteArray, NoteCell, resolve_collisions

ROLL_HEIGHT = 128
DEFAULT_WIDTH = 512
WIDTH_MULTIPLE = 16

LUMA_MIN = 50
LUMA_MAX = 100
DETECTION_THRESHOLD = 25
NEUTRAL_CHROMA = (128, 128)

# (u, v) per family.  Chroma magnitudes are small enough that every luma in
# [50, 100] maps to an unclipped RGB triple, so YUV -> RGB -> YUV is exact.
DEFAULT_CHROMA = {
    InstrumentClass.PIANO: (100, 93),        # green
    InstrumentClass.PERCUSSION: (188, 118),  # blue
    InstrumentClass.WOODWIND: (100, 138),    # yellow
    InstrumentClass.STRINGS: (148, 93),      # cyan
    InstrumentClass.BRASS: (158, 168),       # magenta
}


class RollFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Palette:
    chroma: dict = field(default_factory=lambda: dict(DEFAULT_CHROMA))
    threshold: int = DETECTION_THRESHOLD

    def __post_init__(self):
        chroma = {InstrumentClass(k): (int(u), int(v)) for k, (u, v) in self.chroma.items()}
        if set(chroma) != set(InstrumentClass):
            raise ValueError("palette must assign a chroma pair to every instrument class")
        object.__setattr__(self, "chroma", chroma)
        if not 0 < self.threshold <= LUMA_MIN:
            raise ValueError(f"detection threshold must be in (0, {LUMA_MIN}]")

    @property
    def uv_table(self) -> np.ndarray:
        """(5, 2) float array of chroma pairs in enum order."""
        return np.array([self.chroma[c] for c in InstrumentClass], dtype=float)

    def min_separation(self) -> float:
        uv = self.uv_table
        d = np.linalg.norm(uv[:, None] - uv[None], axis=-1)
        return float(d[~np.eye(len(uv), dtype=bool)].min())

    def classify(self, u, v) -> np.ndarray:
        """Nearest palette entry per pixel; ties go to the lower enum value."""
        uv = np.stack([np.asarray(u, float), np.asarray(v, float)], axis=-1)
        d2 = ((uv[..., None, :] - self.uv_table) ** 2).sum(-1)
        return np.argmin(d2, axis=-1)  # argmin picks the first minimum

    @classmethod
    def from_config(cls, path) -> "Palette":
        """``key = value`` lines: ``<family> = u,v`` and/or ``threshold = n``."""
        chroma = dict(DEFAULT_CHROMA)
        threshold = DETECTION_THRESHOLD
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            try:
                if key.lower() == "threshold":
                    threshold = int(value)
                else:
                    u, v = (int(x) for x in value.split(","))
                    chroma[InstrumentClass[key.upper()]] = (u, v)
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: cannot parse {line!r}") from exc
        return cls(chroma, threshold)


DEFAULT_PALETTE = Palette()


@dataclass(frozen=True, eq=False)
class PianoRoll:
    """YUV pixels as a uint8 array of shape (128, width, 3), indexed [pitch, column]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[0] != ROLL_HEIGHT or px.shape[2] != 3:
            raise RollFormatError(f"roll pixels must be (128, W, 3), got {px.shape}")
        if px.shape[1] % WIDTH_MULTIPLE or px.shape[1] == 0:
            raise RollFormatError(f"roll width {px.shape[1]} is not a positive multiple of 16")
        object.__setattr__(self, "pixels", px.astype(np.uint8, copy=False))

    @classmethod
    def blank(cls, width: int = DEFAULT_WIDTH) -> "PianoRoll":
        px = np.zeros((ROLL_HEIGHT, width, 3), dtype=np.uint8)
        px[..., 1:] = NEUTRAL_CHROMA
        return cls(px)

    @property
    def height(self) -> int:
        return ROLL_HEIGHT

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, PianoRoll) and np.array_equal(self.pixels, other.pixels)


# --------------------------------------------------------------------------
# velocity <-> luma

def velocity_to_luma(velocity: int) -> int:
    if not 1 <= velocity <= 127:
        raise ValueError(f"velocity must be in 1..127, got {velocity}")
    return int(math.floor(LUMA_MIN + (LUMA_MAX - LUMA_MIN) * (velocity - 1) / 126 + 0.5))


def luma_to_velocity(luma: int, threshold: int = DETECTION_THRESHOLD) -> int | None:
    """Inverse of :func:`velocity_to_luma`; ``None`` means no note (luma below threshold)."""
    if luma < threshold:
        return None
    v = math.floor(1 + 126 * (luma - LUMA_MIN) / (LUMA_MAX - LUMA_MIN) + 0.5)
    return min(127, max(1, v))


_VEL_TO_LUMA = np.array([0] + [velocity_to_luma(v) for v in range(1, 128)], dtype=np.uint8)
_LUMA_TO_VEL = np.array([luma_to_velocity(y, 0) for y in range(256)], dtype=np.int64)


# --------------------------------------------------------------------------
# note array <-> rolls

def roll_count(array: NoteArray, width: int = DEFAULT_WIDTH) -> int:
    return 0 if not array.cells else array.max_column // width + 1


def note_array_to_rolls(array: NoteArray, width: int = DEFAULT_WIDTH,
                        palette: Palette = DEFAULT_PALETTE) -> list[PianoRoll]:
    """Paint cells into consecutive rolls of ``width`` columns.

    Cells sharing a pixel are reduced to one (loudest, then lowest class).
    The last roll is padded with background.
    """
    if width <= 0 or width % WIDTH_MULTIPLE:
        raise RollFormatError(f"width {width} is not a positive multiple of 16")
    n = roll_count(array, width)
    if n == 0:
        return []
    canvas = np.zeros((n, ROLL_HEIGHT, width, 3), dtype=np.uint8)
    canvas[..., 1:] = NEUTRAL_CHROMA
    for c in resolve_collisions(array).cells:
        k, col = divmod(c.column, width)
        u, v = palette.chroma[c.instrument_class]
        canvas[k, c.pitch, col] = (_VEL_TO_LUMA[c.velocity], u, v)
    return [PianoRoll(px) for px in canvas]


def rolls_to_note_array(rolls, ticks_per_beat: int = 480, grid_ticks: int = 120,
                        palette: Palette = DEFAULT_PALETTE) -> NoteArray:
    """Read every pixel with luma at or above the threshold back as a cell."""
    rolls = list(rolls)
    if not rolls:
        return NoteArray((), ticks_per_beat, grid_ticks)
    widths = {r.width for r in rolls}
    if len(widths) != 1:
        raise RollFormatError(f"rolls have mixed widths {sorted(widths)}")
    width = widths.pop()
    cells = []
    for k, roll in enumerate(rolls):
        y = roll.pixels[..., 0]
        pitches, cols = np.nonzero(y >= palette.threshold)
        if not len(pitches):
            continue
        px = roll.pixels[pitches, cols].astype(int)
        classes = palette.classify(px[:, 1], px[:, 2])
        vels = _LUMA_TO_VEL[px[:, 0]]
        for p, c, v, cls in zip(pitches, cols, vels, classes):
            cells.append(NoteCell(k * width + int(c), int(p), int(v), InstrumentClass(int(cls))))
    return NoteArray(tuple(cells), ticks_per_beat, grid_ticks)


# --------------------------------------------------------------------------
# BT.601 full-range color conversion

def yuv_to_rgb(yuv: np.ndarray) -> np.ndarray:
    yuv = np.asarray(yuv, dtype=float)
    y, u, v = yuv[..., 0], yuv[..., 1] - 128.0, yuv[..., 2] - 128.0
    r = y + 1.402 * v
    g = y - 0.344136 * u - 0.714136 * v
    b = y + 1.772 * u
    return np.clip(np.floor(np.stack([r, g, b], -1) + 0.5), 0, 255).astype(np.uint8)


def rgb_to_yuv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    v = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.clip(np.floor(np.stack([y, u, v], -1) + 0.5), 0, 255).astype(np.uint8)


def roll_to_rgb(roll: PianoRoll) -> np.ndarray:
    """(128, W, 3) RGB image array, high pitches on top."""
    return yuv_to_rgb(roll.pixels)[::-1]


def rgb_to_roll(rgb: np.ndarray) -> PianoRoll:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        raise RollFormatError(f"expected 8-bit RGB data, got {rgb.dtype}")
    return PianoRoll(rgb_to_yuv(rgb[::-1]))


def roll_to_rgb_image(roll: PianoRoll) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(roll_to_rgb(roll), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def rgb_image_to_roll(data: bytes) -> PianoRoll:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:  # PIL raises a zoo of types for bad input
        raise RollFormatError(f"cannot decode image: {exc}") from exc
    if img.mode != "RGB":
        raise RollFormatError(f"expected 8-bit RGB image, got mode {img.mode!r}")
    if img.height != ROLL_HEIGHT or img.width % WIDTH_MULTIPLE:
        raise RollFormatError(f"image is {img.width}x{img.height}; need height 128 "
                              f"and width a multiple of 16")
    return rgb_to_roll(np.asarray(img))


# --------------------------------------------------------------------------
# model domain: rolls <-> float tensors in [-1, 1]

def roll_to_tensor(roll: PianoRoll, dtype=np.float32) -> np.ndarray:
    """(3, 128, W) channels-first YUV scaled to [-1, 1]."""
    return (roll.pixels.transpose(2, 0, 1).astype(dtype) / 127.5 - 1.0).astype(dtype)


def tensor_to_roll(x: np.ndarray) -> PianoRoll:
    x = np.asarray(x, dtype=float)
    px = np.clip(np.floor((x + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)
    return PianoRoll(px.transpose(1, 2, 0))
