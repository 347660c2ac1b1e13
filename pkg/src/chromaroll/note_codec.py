"""Scores to grid-quantized note cells (one cell per pixel column)."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

from .midi_io import Score

MAX_VELOCITY = 127
ABNORMAL_VELOCITY_FRACTION = 0.80


class InstrumentClass(IntEnum):
    PIANO = 0
    PERCUSSION = 1
    WOODWIND = 2
    STRINGS = 3
    BRASS = 4


# General MIDI program ranges (inclusive) -> family
DEFAULT_FAMILY_RANGES: tuple[tuple[int, int, InstrumentClass], ...] = (
    (0, 7, InstrumentClass.PIANO),
    (8, 15, InstrumentClass.PERCUSSION),
    (16, 23, InstrumentClass.PIANO),
    (24, 39, InstrumentClass.STRINGS),
    (40, 55, InstrumentClass.STRINGS),
    (56, 63, InstrumentClass.BRASS),
    (64, 79, InstrumentClass.WOODWIND),
    (80, 95, InstrumentClass.WOODWIND),
    (96, 111, InstrumentClass.STRINGS),
    (112, 119, InstrumentClass.PERCUSSION),
    (120, 127, InstrumentClass.PERCUSSION),
)


def family_table(ranges=DEFAULT_FAMILY_RANGES) -> tuple[InstrumentClass, ...]:
    table: list[InstrumentClass | None] = [None] * 128
    for lo, hi, cls in ranges:
        for p in range(lo, hi + 1):
            table[p] = InstrumentClass(cls)
    missing = [p for p, c in enumerate(table) if c is None]
    if missing:
        raise ValueError(f"family map leaves programs unassigned: {missing[:8]}")
    return tuple(table)  # type: ignore[arg-type]


DEFAULT_FAMILY_TABLE = family_table()


def load_family_map(path) -> tuple[InstrumentClass, ...]:
    """Read a program->family map.

    One range per line, ``lo-hi = family`` (or ``prog = family``); blank lines
    and ``#`` comments are ignored.  Family names are case-insensitive.
    Ranges not mentioned keep their default family.
    """
    ranges = list(DEFAULT_FAMILY_RANGES)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            span, fam = (s.strip() for s in line.split("="))
            lo, _, hi = span.partition("-")
            ranges.append((int(lo), int(hi or lo), InstrumentClass[fam.upper()]))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{path}:{lineno}: cannot parse {line!r}") from exc
    return family_table(ranges)


def classify_instrument(program: int, is_drum: bool,
                        table: tuple[InstrumentClass, ...] = DEFAULT_FAMILY_TABLE) -> InstrumentClass:
    if is_drum:
        return InstrumentClass.PERCUSSION
    if not 0 <= program <= 127:
        raise ValueError(f"program out of range: {program}")
    return table[program]


@dataclass(frozen=True, order=True)
class NoteCell:
    column: int
    pitch: int
    velocity: int
    instrument_class: InstrumentClass

    def __post_init__(self):
        if self.column < 0:
            raise ValueError(f"negative column: {self.column}")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")
        object.__setattr__(self, "instrument_class", InstrumentClass(self.instrument_class))

    @property
    def position(self) -> tuple[int, int, InstrumentClass]:
        return (self.column, self.pitch, self.instrument_class)


def _cell_order(c: NoteCell):
    return (c.column, c.pitch, c.instrument_class)


@dataclass(frozen=True)
class NoteArray:
    """Note cells on a fixed time grid, sorted by (column, pitch, class).

    Duplicate (column, pitch, class) cells collapse to the loudest one.
    """

    cells: tuple[NoteCell, ...] = ()
    ticks_per_beat: int = 480
    grid_ticks: int = 120

    def __post_init__(self):
        if self.ticks_per_beat < 1 or self.grid_ticks < 1:
            raise ValueError("ticks_per_beat and grid_ticks must be positive")
        best: dict[tuple, NoteCell] = {}
        for c in self.cells:
            prev = best.get(c.position)
            if prev is None or c.velocity > prev.velocity:
                best[c.position] = c
        object.__setattr__(self, "cells", tuple(sorted(best.values(), key=_cell_order)))

    def __len__(self):
        return len(self.cells)

    def __iter__(self):
        return iter(self.cells)

    @property
    def max_column(self) -> int:
        return max((c.column for c in self.cells), default=-1)

    def replace_cells(self, cells) -> "NoteArray":
        return NoteArray(tuple(cells), self.ticks_per_beat, self.grid_ticks)

    # text serialization ---------------------------------------------------
    def to_text(self) -> str:
        lines = [f"tpb={self.ticks_per_beat} grid={self.grid_ticks}"]
        lines += [f"{c.column},{c.pitch},{c.velocity},{c.instrument_class.name.lower()}"
                  for c in self.cells]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NoteArray":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty note-array text")
        try:
            meta = dict(tok.split("=", 1) for tok in lines[0].split())
            tpb, grid = int(meta["tpb"]), int(meta["grid"])
        except (ValueError, KeyError) as exc:
            raise ValueError(f"bad note-array header: {lines[0]!r}") from exc
        cells = []
        for ln in lines[1:]:
            try:
                col, pitch, vel, cls_name = ln.split(",")
                cells.append(NoteCell(int(col), int(pitch), int(vel),
                                      InstrumentClass[cls_name.strip().upper()]))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"bad note-array line: {ln!r}") from exc
        return cls(tuple(cells), tpb, grid)


def default_grid_ticks(ticks_per_beat: int, grid_div: int = 4) -> int:
    """Ticks per pixel column; ``grid_div`` columns per beat (4 = sixteenths)."""
    return max(1, ticks_per_beat // grid_div)


def score_to_note_array(score: Score, grid_ticks: int | None = None,
                        family_map: tuple[InstrumentClass, ...] = DEFAULT_FAMILY_TABLE) -> NoteArray:
    """Split every note into one cell per grid column it touches.

    A note starting at tick ``o`` with duration ``d`` occupies
    ``ceil(d / grid_ticks)`` columns starting at ``o // grid_ticks``.
    """
    if grid_ticks is None:
        grid_ticks = default_grid_ticks(score.ticks_per_beat)
    if grid_ticks < 1:
        raise ValueError("grid_ticks must be >= 1")
    cells = []
    for note in score.notes:
        cls = classify_instrument(note.program, note.is_drum, family_map)
        start = note.onset_tick // grid_ticks
        for k in range(math.ceil(note.duration_tick / grid_ticks)):
            cells.append(NoteCell(start + k, note.pitch, note.velocity, cls))
    return NoteArray(tuple(cells), score.ticks_per_beat, grid_ticks)


def resolve_collisions(array: NoteArray) -> NoteArray:
    """Keep one cell per (column, pitch): loudest wins, then lowest class."""
    best: dict[tuple[int, int], NoteCell] = {}
    for c in array.cells:
        key = (c.column, c.pitch)
        prev = best.get(key)
        if prev is None or (-c.velocity, c.instrument_class) < (-prev.velocity, prev.instrument_class):
            best[key] = c
    return array.replace_cells(best.values())


def max_velocity_fraction(score: Score) -> float:
    notes = score.notes
    if not notes:
        return 0.0
    return sum(n.velocity == MAX_VELOCITY for n in notes) / len(notes)


def is_abnormal_velocity(score: Score, threshold: float = ABNORMAL_VELOCITY_FRACTION) -> bool:
    """True when the score is empty or more than ``threshold`` of notes sit at 127."""
    notes = score.notes
    if not notes:
        return True
    # exact rational comparison: 8/10 must not round past 0.8
    hits = sum(n.velocity == MAX_VELOCITY for n in notes)
    return Fraction(hits, len(notes)) > Fraction(str(threshold))


def filter_abnormal_velocity(scores, threshold: float = ABNORMAL_VELOCITY_FRACTION) -> list[Score]:
    return [s for s in scores if not is_abnormal_velocity(s, threshold)]
