"""DDPM mathematics: beta schedule, forward noising, reverse steps, loss.

Steps are 1-indexed (``1 <= t <= T``) to match the usual notation; the
schedule arrays are stored 0-indexed.  No function here draws random
numbers itself: noise is always passed in, so every operation is a pure
function of its arguments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "DiffusionSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0) & (betas < 1)):
            raise ScheduleError("every beta must lie in the open interval (0, 1)")
        alphas = 1.0 - betas
        return cls(betas, alphas, np.cumprod(alphas))

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step {t} outside 1..{self.T}")
        return t - 1

    def beta(self, t: int) -> float:
        return float(self.betas[self._check(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check(t)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check(t)])


def make_schedule(T: int = DEFAULT_STEPS, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> DiffusionSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = beta_start + (beta_end - beta_start) * np.arange(T, dtype=np.float64) / (T - 1)
    return DiffusionSchedule.from_betas(betas)


def scaled_linear_schedule(T: int) -> DiffusionSchedule:
    """Default linear schedule rescaled so short chains still end near pure noise.

    Betas are multiplied by ``1000 / T``, so any ``T`` reaches roughly the
    same final alpha_bar as the 1000-step default.
    """
    scale = DEFAULT_STEPS / T
    return make_schedule(T, DEFAULT_BETA_START * scale, min(DEFAULT_BETA_END * scale, 0.999))


def _same_shape(a, b, what: str):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def _per_item(values, x):
    """Broadcast a scalar or per-batch-item vector against a batch tensor."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape((-1,) + (1,) * (np.ndim(x) - 1))


def _steps(schedule, t):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ScheduleError(f"step(s) {t} outside 1..{schedule.T}")
    return t.astype(int) - 1


def q_sample(x0, t, eps, schedule: DiffusionSchedule):
    """Draw x_t ~ q(x_t | x_0) as sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may be a scalar or one step per leading batch item.
    """
    _same_shape(x0, eps, "q_sample")
    ab = _per_item(schedule.alpha_bars[_steps(schedule, t)], x0)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.result_type(x0, eps), copy=False)


def q_step(x_prev, t, eps, schedule: DiffusionSchedule):
    """One forward transition q(x_t | x_{t-1})."""
    _same_shape(x_prev, eps, "q_step")
    beta = _per_item(schedule.betas[_steps(schedule, t)], x_prev)
    out = np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps
    return out.astype(np.result_type(x_prev, eps), copy=False)


def posterior_mean(x_t, t, eps_hat, schedule: DiffusionSchedule):
    """Reverse-step mean with the noise estimate substituted for the true noise."""
    _same_shape(x_t, eps_hat, "posterior_mean")
    idx = _steps(schedule, t)
    alpha = _per_item(schedule.alphas[idx], x_t)
    ab = _per_item(schedule.alpha_bars[idx], x_t)
    out = (x_t - (1.0 - alpha) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    return out.astype(np.result_type(x_t, eps_hat), copy=False)


def p_sample_step(x_t, t: int, eps_hat, noise, schedule: DiffusionSchedule):
    """x_{t-1} = posterior mean + sqrt(beta_t) * noise; the t = 1 step adds nothing.

    At ``t == 1`` the caller must pass an all-zero ``noise`` (or ``None``).
    """
    mean = posterior_mean(x_t, t, eps_hat, schedule)
    if int(t) == 1:
        if noise is not None and np.any(noise != 0):
            raise ValueError("the final reverse step is deterministic; noise must be zero at t=1")
        return mean
    _same_shape(x_t, noise, "p_sample_step")
    return (mean + np.sqrt(schedule.beta(int(t))) * noise).astype(mean.dtype, copy=False)


def p_sample_loop(denoise, shape, schedule: DiffusionSchedule, rng: np.random.Generator,
                  dtype=np.float32):
    """Run the full reverse chain from x_T ~ N(0, I).

    ``denoise(x_t, t)`` returns the noise estimate for a batch at step ``t``.
    """
    x = rng.standard_normal(shape).astype(dtype)
    for t in range(schedule.T, 0, -1):
        eps_hat = denoise(x, t)
        noise = rng.standard_normal(shape).astype(dtype) if t > 1 else None
        x = p_sample_step(x, t, eps_hat, noise, schedule)
    return x


def training_loss(denoise, x0, t, eps, schedule: DiffusionSchedule) -> float:
    """Mean squared error between the injected noise and its prediction."""
    x_t = q_sample(x0, t, eps, schedule)
    eps_hat = denoise(x_t, t)
    _same_shape(eps, eps_hat, "training_loss")
    diff = np.asarray(eps, dtype=np.float64) - eps_hat
    return float(np.mean(diff * diff))
