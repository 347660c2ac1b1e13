"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .midi_io import Score
from .note_codec import NoteArray


def check_rolls(X, allow_empty: bool = False) -> np.ndarray:
    """Validate a stack of roll tensors (n, 3, H, W) normalized to [-1, 1].

    A single (3, H, W) tensor is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.dtype.kind not in "fiu":
        raise TypeError(f"roll tensors must be numeric, got dtype {X.dtype}")
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected roll tensors of shape (n, 3, H, W), got {X.shape}")
    if X.shape[0] == 0:
        if allow_empty:
            return X.astype(np.float32)
        raise ValueError("need at least one roll")
    if X.shape[2] % 4 or X.shape[3] % 4:
        raise ValueError(f"roll height and width must be divisible by 4, got {X.shape[2:]}")
    if X.dtype.kind == "f":
        if not np.all(np.isfinite(X)):
            raise ValueError("roll tensors contain NaN or inf")
    else:
        X = X.astype(np.float32)
    if np.abs(X).max() > 1.0 + 1e-6:
        raise ValueError("roll tensors must be normalized to [-1, 1]")
    return X


def check_scores(X) -> list[Score]:
    X = list(X)
    bad = [type(s).__name__ for s in X if not isinstance(s, Score)]
    if bad:
        raise TypeError(f"expected Score objects, got {sorted(set(bad))}")
    return X


def check_note_arrays(X) -> list[NoteArray]:
    X = list(X)
    bad = [type(a).__name__ for a in X if not isinstance(a, NoteArray)]
    if bad:
        raise TypeError(f"expected NoteArray objects, got {sorted(set(bad))}")
    return X
