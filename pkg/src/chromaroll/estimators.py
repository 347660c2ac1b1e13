"""scikit-learn style wrappers around the pipeline stages.

``RollEncoder`` turns scores into model tensors and back, ``DensityFilter``
thins note arrays and ``RollDiffusion`` fits the noise predictor and samples
new rolls.  All follow the usual fit/transform conventions, so they compose
with ``Pipeline`` and support ``get_params``/``set_params``/``clone``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import denoiser as dn
from .diffusion import make_schedule, scaled_linear_schedule, training_loss
from .midi_io import Score
from .note_codec import DEFAULT_FAMILY_TABLE, NoteArray, default_grid_ticks, score_to_note_array
from .postprocess import DEFAULT_MAX_PER_WINDOW, DEFAULT_WINDOW_COLUMNS, DecodeConfig, decode_rolls, density_filter
from .roll_image import DEFAULT_PALETTE, DEFAULT_WIDTH, note_array_to_rolls, roll_to_tensor, tensor_to_roll
from .validation import check_note_arrays, check_rolls, check_scores


class RollEncoder(TransformerMixin, BaseEstimator):
    """Scores -> stacked roll tensors of shape (n_rolls, 3, 128, width) in [-1, 1].

    ``transform`` concatenates the rolls of all scores in order;
    ``rolls_per_score_`` from the last transform records the split.
    """

    def __init__(self, grid_div=4, width=DEFAULT_WIDTH, palette=None, family_map=None):
        self.grid_div = grid_div
        self.width = width
        self.palette = palette
        self.family_map = family_map

    def fit(self, X, y=None):
        check_scores(X)
        if self.width <= 0 or self.width % 16:
            raise ValueError(f"width must be a positive multiple of 16, got {self.width}")
        if self.grid_div < 1:
            raise ValueError("grid_div must be >= 1")
        self.n_scores_seen_ = len(X)
        return self

    def to_note_arrays(self, X) -> list[NoteArray]:
        family = self.family_map or DEFAULT_FAMILY_TABLE
        return [score_to_note_array(s, default_grid_ticks(s.ticks_per_beat, self.grid_div), family)
                for s in check_scores(X)]

    def transform(self, X):
        check_is_fitted(self, "n_scores_seen_")
        palette = self.palette or DEFAULT_PALETTE
        tensors, counts = [], []
        for arr in self.to_note_arrays(X):
            rolls = note_array_to_rolls(arr, self.width, palette)
            counts.append(len(rolls))
            tensors.extend(roll_to_tensor(r) for r in rolls)
        self.rolls_per_score_ = counts
        if not tensors:
            return np.zeros((0, 3, 128, self.width), dtype=np.float32)
        return np.stack(tensors)

    def inverse_transform(self, X, ticks_per_beat=480, window_columns=DEFAULT_WINDOW_COLUMNS,
                          max_per_window=DEFAULT_MAX_PER_WINDOW) -> Score:
        """Decode consecutive roll tensors into one score."""
        X = check_rolls(X, allow_empty=True)
        config = DecodeConfig(ticks_per_beat, default_grid_ticks(ticks_per_beat, self.grid_div),
                              window_columns, max_per_window, self.palette or DEFAULT_PALETTE)
        return decode_rolls([tensor_to_roll(x) for x in X], config)


class DensityFilter(TransformerMixin, BaseEstimator):
    def __init__(self, window_columns=DEFAULT_WINDOW_COLUMNS, max_per_window=DEFAULT_MAX_PER_WINDOW):
        self.window_columns = window_columns
        self.max_per_window = max_per_window

    def fit(self, X, y=None):
        check_note_arrays(X)
        if self.window_columns < 1 or self.max_per_window < 1:
            raise ValueError("window_columns and max_per_window must be >= 1")
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        return [density_filter(a, self.window_columns, self.max_per_window)
                for a in check_note_arrays(X)]


class RollDiffusion(BaseEstimator):
    """Denoising diffusion model over roll tensors.

    Parameters mirror :class:`chromaroll.denoiser.TrainConfig`.  When both
    betas are None the linear schedule is rescaled to ``n_steps`` (see
    :func:`chromaroll.diffusion.scaled_linear_schedule`).
    """

    def __init__(self, n_steps=1000, beta_start=None, beta_end=None, width_mult=1.0,
                 learning_rate=0.1, epochs=10, batch_size=1, max_steps=None,
                 optimizer="sgd", momentum=0.0, clip_norm=1.0, random_state=0):
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.width_mult = width_mult
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.optimizer = optimizer
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _make_schedule(self):
        if self.beta_start is None and self.beta_end is None:
            return scaled_linear_schedule(self.n_steps)
        return make_schedule(self.n_steps, self.beta_start, self.beta_end)

    def fit(self, X, y=None):
        X = check_rolls(X)
        self.schedule_ = self._make_schedule()
        config = dn.TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                                batch_size=self.batch_size, max_steps=self.max_steps,
                                seed=self.random_state, optimizer=self.optimizer,
                                momentum=self.momentum, clip_norm=self.clip_norm,
                                denoiser=dn.DenoiserConfig(width_mult=self.width_mult))
        result = dn.train(X, self.schedule_, config)
        self.params_ = result.params
        self.loss_history_ = np.asarray(result.losses)
        self.input_shape_ = X.shape[1:]
        return self

    def predict_noise(self, X, t):
        check_is_fitted(self, "params_")
        return dn.forward(self.params_, check_rolls(X), t)

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "params_")
        seed = self.random_state if random_state is None else random_state
        rng = np.random.default_rng(seed)
        x = dn.sample(self.params_, self.schedule_, n_samples, self.input_shape_, rng)
        return np.clip(x, -1.0, 1.0)

    def score(self, X, y=None):
        """Negative noise-prediction loss averaged over every step (fixed seed)."""
        check_is_fitted(self, "params_")
        X = check_rolls(X).astype(self.params_.dtype)
        rng = np.random.default_rng(self.random_state)
        losses = [training_loss(lambda x, t: dn.forward(self.params_, x, t), X, t,
                                rng.standard_normal(X.shape).astype(X.dtype), self.schedule_)
                  for t in range(1, self.schedule_.T + 1)]
        return -float(np.mean(losses))
