"""From sampled roll images back to MIDI: density thinning and note merging."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import groupby

from .midi_io import RawNote, Score, Track, write_midi
from .note_codec import InstrumentClass, NoteArray
from .roll_image import DEFAULT_PALETTE, Palette, rgb_image_to_roll, rolls_to_note_array

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_COLUMNS = 16
DEFAULT_MAX_PER_WINDOW = 24

# family -> (General MIDI program, drum channel)
CLASS_PROGRAMS = {
    InstrumentClass.PIANO: (0, False),
    InstrumentClass.PERCUSSION: (0, True),
    InstrumentClass.WOODWIND: (73, False),
    InstrumentClass.STRINGS: (48, False),
    InstrumentClass.BRASS: (61, False),
}


def _removal_rank(cell):
    # survivors first: loud, then low pitch, then early column, then low class
    return (-cell.velocity, cell.pitch, cell.column, cell.instrument_class)


def density_filter(array: NoteArray, window_columns: int = DEFAULT_WINDOW_COLUMNS,
                   max_per_window: int = DEFAULT_MAX_PER_WINDOW) -> NoteArray:
    """Cap the number of cells in each disjoint window of ``window_columns`` columns.

    Over-full windows lose their quietest cells first; among equal
    velocities the higher pitch goes first, then the later column.
    """
    if window_columns < 1 or max_per_window < 1:
        raise ValueError("window_columns and max_per_window must be >= 1")
    kept = []
    for _, group in groupby(array.cells, key=lambda c: c.column // window_columns):
        group = list(group)
        if len(group) > max_per_window:
            group = sorted(group, key=_removal_rank)[:max_per_window]
        kept.extend(group)
    return array.replace_cells(kept)


def merge_cells_to_notes(array: NoteArray, programs=CLASS_PROGRAMS) -> list[RawNote]:
    """Join runs of adjacent columns with the same pitch and family into notes.

    A run becomes one note lasting ``run_length * grid_ticks`` ticks at the
    loudest velocity in the run.
    """
    g = array.grid_ticks
    notes = []
    key = lambda c: (c.instrument_class, c.pitch)
    for (cls, pitch), cells in groupby(sorted(array.cells, key=lambda c: (key(c), c.column)), key=key):
        program, is_drum = programs[cls]
        run: list = []
        for c in list(cells) + [None]:
            if c is not None and run and c.column == run[-1].column + 1:
                run.append(c)
                continue
            if run:
                notes.append(RawNote(pitch, run[0].column * g, len(run) * g,
                                     max(x.velocity for x in run), program, is_drum))
            run = [c] if c is not None else []
    return sorted(notes, key=lambda n: (n.onset_tick, n.pitch, n.program, n.is_drum))


def notes_to_score(notes, ticks_per_beat: int = 480) -> Score:
    """One track per instrument family, in family order."""
    by_track: dict[tuple[bool, int], list[RawNote]] = {}
    for n in notes:
        by_track.setdefault((n.is_drum, n.program), []).append(n)
    names = {v: k.name.lower() for k, v in CLASS_PROGRAMS.items()}
    tracks = [Track(tuple(ns), names.get(key[::-1], ""))
              for key, ns in sorted(by_track.items())]
    return Score(tuple(tracks), ticks_per_beat, ((0, 500000),))


@dataclass(frozen=True)
class DecodeConfig:
    ticks_per_beat: int = 480
    grid_ticks: int = 120
    window_columns: int = DEFAULT_WINDOW_COLUMNS
    max_per_window: int = DEFAULT_MAX_PER_WINDOW
    palette: Palette = DEFAULT_PALETTE


def decode_rolls(rolls, config: DecodeConfig = DecodeConfig()) -> Score:
    array = rolls_to_note_array(rolls, config.ticks_per_beat, config.grid_ticks, config.palette)
    array = density_filter(array, config.window_columns, config.max_per_window)
    notes = merge_cells_to_notes(array)
    if not notes:
        logger.warning("decoded rolls contain no notes; writing an empty MIDI file")
    return notes_to_score(notes, config.ticks_per_beat)


def decode_pipeline(images, config: DecodeConfig = DecodeConfig()) -> bytes:
    """PNG roll images (in time order) -> SMF bytes."""
    rolls = [rgb_image_to_roll(img) for img in images]
    return write_midi(decode_rolls(rolls, config))
