"""Forward corruption and the single ancestral (DDPM) reverse step.

All functions accept either one image ``(C, H, W)`` or a batch
``(N, C, H, W)``; the step index is shared across the batch.
"""

from __future__ import annotations

import math

import numpy as np

from .imagecore import ImageError, ensure_rng
from .schedule import NoiseSchedule, ScheduleError, _check_step


class DenoiserContractError(RuntimeError):
    """A denoiser returned output that violates the eps-predictor contract."""


class NFECounter:
    """Counts denoiser evaluations (one per reverse step)."""

    def __init__(self):
        self.count = 0

    def __repr__(self):
        return f"NFECounter({self.count})"


def q_sample(x0, t: int, schedule: NoiseSchedule, rng, eps=None):
    """Corrupt ``x0`` straight to step ``t``; returns ``(x_t, eps)``.

    ``eps`` is drawn standard normal unless given explicitly.
    """
    t = _check_step(schedule, t)
    x0 = np.asarray(x0, dtype=np.float64)
    if eps is None:
        eps = ensure_rng(rng).standard_normal(x0.shape)
    else:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != x0.shape:
            raise ImageError(f"noise shape {eps.shape} does not match image {x0.shape}")
    ab = schedule.alpha_bar[t]
    if t == 0:
        return x0.copy(), eps
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps, eps


def two_region_corrupt(x0, t: int, t_prime: int, mask, schedule: NoiseSchedule, rng):
    """Corrupt the masked region to step ``t`` and the rest to ``t_prime <= t``."""
    t = _check_step(schedule, t)
    t_prime = _check_step(schedule, t_prime)
    if t_prime > t:
        raise ScheduleError(f"t_prime={t_prime} exceeds t={t}")
    rng = ensure_rng(rng)
    m = np.asarray(mask, dtype=np.float64)
    x_hi, _ = q_sample(x0, t, schedule, rng)
    x_lo, _ = q_sample(x0, t_prime, schedule, rng)
    return m * x_hi + (1.0 - m) * x_lo


def ddpm_step(x_t, t: int, denoiser, schedule: NoiseSchedule, rng,
              noise_at_final_step: bool = True, counter: NFECounter | None = None):
    """One reverse step x_t -> x_{t-1} using the model's noise prediction."""
    if isinstance(t, bool) or not isinstance(t, (int, np.integer)) or not 1 <= t <= schedule.T:
        raise ScheduleError(f"reverse step needs 1 <= t <= {schedule.T}, got {t!r}")
    t = int(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(denoiser.predict(x_t, t), dtype=np.float64)
    if counter is not None:
        counter.count += 1
    if eps_hat.shape != x_t.shape:
        raise DenoiserContractError(f"denoiser returned shape {eps_hat.shape}, expected {x_t.shape}")

    a = schedule.alpha[t - 1]
    b = schedule.beta[t - 1]
    ab = schedule.alpha_bar[t]
    mean = (x_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
    if t == 1 and not noise_at_final_step:
        return mean
    z = ensure_rng(rng).standard_normal(x_t.shape)
    return mean + math.sqrt(b) * z


def reverse_steps(x, t_start: int, t_end: int, denoiser, schedule, rng,
                  noise_at_final_step: bool = True, counter: NFECounter | None = None):
    """Run reverse steps t_start, t_start-1, ..., t_end+1, landing at step ``t_end``."""
    for k in range(t_start, t_end, -1):
        x = ddpm_step(x, k, denoiser, schedule, rng, noise_at_final_step, counter)
    return x


def generate(denoiser, schedule: NoiseSchedule, shape, rng,
             noise_at_final_step: bool = True, counter: NFECounter | None = None):
    """Sample from the model by reversing all T steps from pure noise."""
    rng = ensure_rng(rng)
    x = rng.standard_normal(tuple(shape))
    return reverse_steps(x, schedule.T, 0, denoiser, schedule, rng, noise_at_final_step, counter)
