import math

import numpy as np
import pytest
from hypothesis import given, settings

from chromaroll.midi_io import RawNote, Score
from chromaroll.note_codec import (InstrumentClass, NoteArray, NoteCell, classify_instrument,
                                   default_grid_ticks, filter_abnormal_velocity, is_abnormal_velocity,
                                   load_family_map, resolve_collisions, score_to_note_array)

from .strategies import random_score, scores


def test_sustained_note_splits_into_cells():
    arr = score_to_note_array(Score.from_notes([RawNote(60, 0, 480, 100)]), 120)
    assert [(c.column, c.pitch, c.velocity) for c in arr] == [(k, 60, 100) for k in range(4)]


def test_one_tick_note_gets_one_cell():
    arr = score_to_note_array(Score.from_notes([RawNote(60, 250, 1, 100)]), 120)
    assert [c.column for c in arr] == [2]


def test_default_grid_is_sixteenth_note():
    assert default_grid_ticks(480) == 120
    assert default_grid_ticks(96) == 24
    assert default_grid_ticks(3) == 1


def test_cell_count_matches_recount():
    rng = np.random.default_rng(7)
    for _ in range(50):
        score = random_score(rng)
        grid = int(rng.integers(1, 500))
        arr = score_to_note_array(score, grid)
        # independent recount of distinct (column, pitch, class) positions
        positions = set()
        expected_total = 0
        for n in score.notes:
            cls = classify_instrument(n.program, n.is_drum)
            k = math.ceil(n.duration_tick / grid)
            expected_total += k
            positions.update((n.onset_tick // grid + i, n.pitch, cls) for i in range(k))
        assert len(arr) == len(positions) <= expected_total


def test_cell_count_is_exact_without_overlap():
    notes = [RawNote(40 + i, 37 * i, 1 + 53 * i, 64, 8 * i) for i in range(16)]
    arr = score_to_note_array(Score.from_notes(notes), 50)
    assert len(arr) == sum(math.ceil(n.duration_tick / 50) for n in notes)


@settings(max_examples=100, deadline=None)
@given(scores())
def test_columns_never_precede_onset(score):
    grid = max(1, score.ticks_per_beat // 4)
    arr = score_to_note_array(score, grid)
    starts = {}
    for n in score.notes:
        key = (n.pitch, classify_instrument(n.program, n.is_drum))
        starts[key] = min(starts.get(key, 10 ** 9), n.onset_tick // grid)
    for c in arr:
        assert c.column >= starts[(c.pitch, c.instrument_class)]


@pytest.mark.parametrize("program,expected", [
    (0, InstrumentClass.PIANO), (7, InstrumentClass.PIANO), (8, InstrumentClass.PERCUSSION),
    (19, InstrumentClass.PIANO), (24, InstrumentClass.STRINGS), (33, InstrumentClass.STRINGS),
    (40, InstrumentClass.STRINGS), (48, InstrumentClass.STRINGS), (56, InstrumentClass.BRASS),
    (61, InstrumentClass.BRASS), (64, InstrumentClass.WOODWIND), (73, InstrumentClass.WOODWIND),
    (81, InstrumentClass.WOODWIND), (100, InstrumentClass.STRINGS), (114, InstrumentClass.PERCUSSION),
    (127, InstrumentClass.PERCUSSION),
])
def test_gm_family_table(program, expected):
    assert classify_instrument(program, False) is expected


def test_drums_are_percussion_whatever_the_program():
    assert {classify_instrument(p, True) for p in range(128)} == {InstrumentClass.PERCUSSION}


def test_classification_is_total_with_five_outputs():
    outs = {classify_instrument(p, d) for p in range(128) for d in (False, True)}
    assert outs == set(InstrumentClass)
    assert len(InstrumentClass) == 5


def test_family_map_override(tmp_path):
    path = tmp_path / "families.txt"
    path.write_text("# organs are woodwind-ish\n16-23 = woodwind\n0 = brass\n")
    table = load_family_map(path)
    assert classify_instrument(18, False, table) is InstrumentClass.WOODWIND
    assert classify_instrument(0, False, table) is InstrumentClass.BRASS
    assert classify_instrument(1, False, table) is InstrumentClass.PIANO


def test_family_map_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("16-23 = kazoo\n")
    with pytest.raises(ValueError):
        load_family_map(path)


def _score_with(n_max, n_other):
    notes = [RawNote(60, i * 10, 5, 127) for i in range(n_max)]
    notes += [RawNote(62, i * 10, 5, 64) for i in range(n_other)]
    return Score.from_notes(notes)


def test_velocity_filter_drops_ninety_percent():
    assert filter_abnormal_velocity([_score_with(9, 1)]) == []


def test_velocity_filter_keeps_quiet_score():
    s = _score_with(0, 10)
    assert filter_abnormal_velocity([s]) == [s]


def test_velocity_filter_boundary_is_strict():
    keep, drop = _score_with(8, 2), _score_with(9, 2)  # 0.8 exactly vs 9/11
    assert not is_abnormal_velocity(keep)
    assert is_abnormal_velocity(drop)
    assert filter_abnormal_velocity([keep, drop]) == [keep]


def test_velocity_filter_drops_empty_and_is_subsequence():
    rng = np.random.default_rng(3)
    corpus = [random_score(rng) for _ in range(30)] + [Score()]
    out = filter_abnormal_velocity(corpus)
    it = iter(corpus)
    assert all(any(s is c for c in it) for s in out)
    assert Score() not in out


def test_duplicate_positions_keep_loudest():
    arr = NoteArray((NoteCell(0, 60, 50, 0), NoteCell(0, 60, 90, 0), NoteCell(0, 60, 70, 3)))
    assert [(c.velocity, c.instrument_class) for c in arr] == [(90, 0), (70, 3)]


def test_collision_rule():
    arr = NoteArray((NoteCell(0, 60, 70, 3), NoteCell(0, 60, 90, 4), NoteCell(1, 60, 80, 2),
                     NoteCell(1, 60, 80, 1)))
    out = resolve_collisions(arr)
    assert [(c.column, c.instrument_class) for c in out] == [(0, 4), (1, 1)]


def test_text_roundtrip():
    arr = NoteArray((NoteCell(3, 60, 100, InstrumentClass.BRASS), NoteCell(0, 12, 1, 0)), 96, 24)
    text = arr.to_text()
    assert text.splitlines()[0] == "tpb=96 grid=24"
    assert text.splitlines()[1] == "0,12,1,piano"
    assert NoteArray.from_text(text) == arr


@pytest.mark.parametrize("text", ["", "tpb=1\n", "tpb=4 grid=1\n1,2,3\n", "tpb=4 grid=1\n1,2,3,kazoo\n"])
def test_text_rejects_malformed(text):
    with pytest.raises(ValueError):
        NoteArray.from_text(text)


def test_cell_validation():
    with pytest.raises(ValueError):
        NoteCell(0, 128, 10, 0)
    with pytest.raises(ValueError):
        NoteCell(0, 1, 0, 0)
    with pytest.raises(ValueError):
        NoteCell(-1, 1, 1, 0)
