"""Multi-track music as color piano-roll images, with a diffusion model over them."""

__version__ = "0.1.0"

from .midi_io import (MidiParseError, MidiWriteError, RawNote, Score, Track, parse_midi, read_midi_file,
                      write_midi, write_midi_file)
from .note_codec import (InstrumentClass, NoteArray, NoteCell, classify_instrument,
                         filter_abnormal_velocity, score_to_note_array)
from .roll_image import (Palette, PianoRoll, luma_to_velocity, note_array_to_rolls,
                         rgb_image_to_roll, roll_to_rgb_image, rolls_to_note_array, velocity_to_luma)
from .diffusion import (DiffusionSchedule, make_schedule, p_sample_step, posterior_mean, q_sample,
                        q_step, training_loss)
from .postprocess import decode_pipeline, density_filter, merge_cells_to_notes
from .metrics import MetricReport, note_set_metrics, pitch_entropy
from .estimators import DensityFilter, RollDiffusion, RollEncoder

__all__ = [
    "MidiParseError", "MidiWriteError", "RawNote", "Score", "Track", "parse_midi", "write_midi",
    "read_midi_file", "write_midi_file",
    "InstrumentClass", "NoteArray", "NoteCell", "classify_instrument", "filter_abnormal_velocity",
    "score_to_note_array", "Palette", "PianoRoll", "luma_to_velocity", "note_array_to_rolls",
    "rgb_image_to_roll", "roll_to_rgb_image", "rolls_to_note_array", "velocity_to_luma",
    "DiffusionSchedule", "make_schedule", "p_sample_step", "posterior_mean", "q_sample", "q_step",
    "training_loss", "decode_pipeline", "density_filter", "merge_cells_to_notes", "MetricReport",
    "note_set_metrics", "pitch_entropy", "DensityFilter", "RollDiffusion", "RollEncoder",
]
