"""Objective scores for decoded rolls."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

from .note_codec import NoteArray
from .roll_image import velocity_to_luma

STRICT_LUMA_TOLERANCE = 2


@dataclass(frozen=True)
class MetricReport:
    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    f_measure: float | None = None
    entropy_bits: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def f_measure(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def _match_count(generated: NoteArray, reference: NoteArray, strict: bool) -> int:
    ref = {c.position: c for c in reference.cells}
    matches = 0
    for c in generated.cells:
        r = ref.get(c.position)
        if r is None:
            continue
        if strict and abs(velocity_to_luma(c.velocity) - velocity_to_luma(r.velocity)) > STRICT_LUMA_TOLERANCE:
            continue
        matches += 1
    return matches


def note_set_metrics(generated: NoteArray, reference: NoteArray, strict: bool = False) -> MetricReport:
    """Cell-level accuracy, precision, recall and F-measure.

    Cells match on (column, pitch, family); with ``strict`` their velocities
    must also land within two luma levels.  Two empty arrays score 1.0.
    """
    if generated.grid_ticks != reference.grid_ticks:
        raise ValueError("generated and reference arrays use different grids")
    g, r = len(generated), len(reference)
    if g == 0 and r == 0:
        return MetricReport(1.0, 1.0, 1.0, 1.0, pitch_entropy(generated))
    m = _match_count(generated, reference, strict)
    precision = m / g if g else 0.0
    recall = m / r if r else 0.0
    return MetricReport(
        accuracy=m / (g + r - m),
        precision=precision,
        recall=recall,
        f_measure=f_measure(precision, recall),
        entropy_bits=pitch_entropy(generated),
    )


def pitch_entropy(array: NoteArray) -> float:
    """Shannon entropy (bits) of the pitch histogram over cells."""
    counts = Counter(c.pitch for c in array.cells)
    total = sum(counts.values())
    if not total:
        return 0.0
    h = -sum(k / total * math.log2(k / total) for k in counts.values())
    return max(h, 0.0)


def evaluate(generated: NoteArray, reference: NoteArray | None = None, strict: bool = False) -> MetricReport:
    """Full report against a reference, or entropy alone for unconditional samples."""
    if reference is None:
        return MetricReport(entropy_bits=pitch_entropy(generated))
    return note_set_metrics(generated, reference, strict)
