import io
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from chromaroll.midi_io import RawNote, Score, parse_midi
from chromaroll.note_codec import InstrumentClass, NoteArray, NoteCell, score_to_note_array
from chromaroll.postprocess import (CLASS_PROGRAMS, DecodeConfig, decode_pipeline, density_filter,
                                    merge_cells_to_notes)
from chromaroll.roll_image import DEFAULT_PALETTE, PianoRoll, note_array_to_rolls, roll_to_rgb_image

from .strategies import note_arrays, random_collision_free_array


def _cells(*triples, cls=0):
    return NoteArray(tuple(NoteCell(c, p, v, cls) for c, p, v in triples))


def test_window_under_limit_unchanged():
    arr = _cells((0, 60, 10), (3, 61, 20), (15, 62, 30))
    assert density_filter(arr, 16, 5) == arr


def test_equal_velocity_tie_break():
    # ten cells in one window: pitches 60..64 at columns 0 and 1
    arr = _cells(*[(c, p, 80) for p in range(60, 65) for c in (0, 1)])
    out = density_filter(arr, 16, 4)
    # survivors by (lowest pitch, earliest column): 60@0, 60@1, 61@0, 61@1
    assert sorted((c.pitch, c.column) for c in out) == [(60, 0), (60, 1), (61, 0), (61, 1)]


def test_quietest_removed_first():
    arr = _cells((0, 90, 10), (1, 20, 120), (2, 50, 60), (3, 70, 61))
    out = density_filter(arr, 4, 2)
    assert sorted(c.velocity for c in out) == [61, 120]


def test_windows_are_disjoint():
    arr = _cells(*[(c, 60 + c % 3, 50) for c in range(32)])
    out = density_filter(arr, 16, 5)
    assert sum(c.column < 16 for c in out) == 5
    assert sum(c.column >= 16 for c in out) == 5


def test_empty_array():
    assert len(density_filter(NoteArray(), 16, 24)) == 0


@pytest.mark.parametrize("window,cap", [(0, 1), (1, 0)])
def test_density_filter_rejects_bad_config(window, cap):
    with pytest.raises(ValueError):
        density_filter(NoteArray(), window, cap)


@settings(max_examples=200, deadline=None)
@given(note_arrays(max_column=60, max_cells=120), st.integers(1, 20), st.integers(1, 10))
def test_density_filter_properties(arr, window, cap):
    once = density_filter(arr, window, cap)
    assert density_filter(once, window, cap) == once
    assert set(once.cells) <= set(arr.cells)
    counts = {}
    for c in once:
        counts[c.column // window] = counts.get(c.column // window, 0) + 1
    assert all(n <= cap for n in counts.values())


def test_sustained_run_merges():
    arr = _cells(*[(k, 60, 100) for k in range(4)])
    assert merge_cells_to_notes(arr) == [RawNote(60, 0, 480, 100, 0, False)]


def test_gap_splits_run():
    notes = merge_cells_to_notes(_cells((0, 60, 100), (2, 60, 100)))
    assert [(n.onset_tick, n.duration_tick) for n in notes] == [(0, 120), (240, 120)]


def test_run_takes_maximum_velocity():
    notes = merge_cells_to_notes(_cells((5, 40, 80), (6, 40, 90), (7, 40, 85)))
    assert [(n.onset_tick, n.duration_tick, n.velocity) for n in notes] == [(600, 360, 90)]


def test_runs_split_by_class():
    arr = NoteArray((NoteCell(0, 60, 70, InstrumentClass.BRASS), NoteCell(1, 60, 70, InstrumentClass.STRINGS)))
    notes = merge_cells_to_notes(arr)
    assert sorted((n.program, n.onset_tick) for n in notes) == [(48, 120), (61, 0)]


def test_class_program_table():
    assert CLASS_PROGRAMS[InstrumentClass.PIANO] == (0, False)
    assert CLASS_PROGRAMS[InstrumentClass.PERCUSSION][1] is True
    assert CLASS_PROGRAMS[InstrumentClass.WOODWIND] == (73, False)
    assert CLASS_PROGRAMS[InstrumentClass.STRINGS] == (48, False)
    assert CLASS_PROGRAMS[InstrumentClass.BRASS] == (61, False)


def test_merge_inverts_cell_splitting():
    rng = np.random.default_rng(0)
    for _ in range(50):
        # one note per pitch, gaps between notes, programs that are their own class representative
        notes = []
        for pitch in rng.choice(128, size=int(rng.integers(1, 20)), replace=False):
            cls = InstrumentClass(int(rng.integers(0, 5)))
            program, drum = CLASS_PROGRAMS[cls]
            onset = int(rng.integers(0, 100)) * 120
            notes.append(RawNote(int(pitch), onset, int(rng.integers(1, 12)) * 120,
                                 int(rng.integers(1, 128)), program, drum))
        back = merge_cells_to_notes(score_to_note_array(Score.from_notes(notes), 120))
        assert sorted(back) == sorted(notes)


def _pngs(array, width=512):
    return [roll_to_rgb_image(r) for r in note_array_to_rolls(array, width)]


def test_pipeline_roundtrip_of_clean_score():
    notes = [RawNote(60, 0, 480, 100, 0), RawNote(64, 480, 240, 70, 48), RawNote(36, 0, 120, 110, 0, True),
             RawNote(72, 960, 600, 50, 73), RawNote(55, 7200, 1200, 90, 61)]
    arr = score_to_note_array(Score.from_notes(notes), 120)
    back = parse_midi(decode_pipeline(_pngs(arr)))
    assert sorted((n.pitch, n.onset_tick, n.duration_tick, n.program, n.is_drum) for n in back.notes) == \
        sorted((n.pitch, n.onset_tick, n.duration_tick, n.program, n.is_drum) for n in notes)
    for a, b in zip(sorted(back.notes), sorted(notes)):
        assert abs(a.velocity - b.velocity) <= 2


def test_pipeline_random_cells_recovered():
    rng = np.random.default_rng(4)
    for _ in range(5):
        arr = random_collision_free_array(rng, max_cells=100, max_column=1000)
        back = parse_midi(decode_pipeline(_pngs(arr), DecodeConfig(max_per_window=10 ** 6)))
        cells = score_to_note_array(back, 120)
        assert {(c.column, c.pitch) for c in cells} == {(c.column, c.pitch) for c in arr}


def test_noise_image_decodes():
    noise = np.random.default_rng(0).integers(0, 256, size=(128, 512, 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(noise).save(buf, format="PNG")
    score = parse_midi(decode_pipeline([buf.getvalue()]))
    assert all(0 <= n.pitch < 128 for n in score.notes)


def test_strings_pixel_run_gives_program_48():
    u, v = DEFAULT_PALETTE.chroma[InstrumentClass.STRINGS]
    px = PianoRoll.blank().pixels.copy()
    px[50, 10:13] = (90, u, v)
    score = parse_midi(decode_pipeline([roll_to_rgb_image(PianoRoll(px))]))
    assert [(n.pitch, n.onset_tick, n.duration_tick, n.program, n.is_drum) for n in score.notes] == \
        [(50, 1200, 360, 48, False)]


def test_blank_input_warns_and_yields_empty_midi(caplog):
    with caplog.at_level(logging.WARNING):
        data = decode_pipeline([roll_to_rgb_image(PianoRoll.blank())])
    assert parse_midi(data).notes == []
    assert "no notes" in caplog.text
