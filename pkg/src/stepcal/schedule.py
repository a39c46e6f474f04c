"""Discrete-time noise schedules.

A schedule stores beta_t, alpha_t = 1 - beta_t and the cumulative product
alpha_bar_t for t = 1..T.  ``alpha_bar`` carries an extra leading entry
alpha_bar_0 = 1 so that step 0 denotes a clean image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BETA_MIN_CLIP = 1e-8
BETA_MAX_CLIP = 0.999

DEFAULT_PARAMS = {
    "cosine": {"s": 0.008},
    "linear": {"beta_min": 1e-4, "beta_max": 0.02},
}


class ScheduleError(ValueError):
    """Invalid schedule parameters or out-of-range step index."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    params: dict
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    n_clipped: int = 0

    @property
    def sigma(self) -> np.ndarray:
        """sqrt(1 - alpha_bar_t) for t = 0..T."""
        return np.sqrt(1.0 - self.alpha_bar)

    def to_config(self) -> dict:
        return {"kind": self.kind, "T": self.T, "params": dict(self.params)}

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        return build_schedule(cfg["kind"], cfg["T"], **cfg.get("params", {}))

    def same_as(self, other: "NoiseSchedule") -> bool:
        return self.to_config() == other.to_config()


def _cosine_alpha_bar(T: int, s: float) -> np.ndarray:
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1.0 + s) * (math.pi / 2.0)) ** 2
    return f / f[0]


def build_schedule(kind: str = "cosine", T: int = 1000, **params) -> NoiseSchedule:
    """Build a cosine or linear schedule with ``T`` steps.

    Cosine takes ``s`` (default 0.008); linear takes ``beta_min`` and
    ``beta_max`` (defaults 1e-4 and 0.02).
    """
    if kind not in DEFAULT_PARAMS:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    unknown = set(params) - set(DEFAULT_PARAMS[kind])
    if unknown:
        raise ScheduleError(f"unexpected {kind} parameters: {sorted(unknown)}")
    p = {**DEFAULT_PARAMS[kind], **{k: float(v) for k, v in params.items()}}

    if kind == "cosine":
        if not p["s"] > 0:
            raise ScheduleError("cosine schedule requires s > 0")
        ab = _cosine_alpha_bar(T, p["s"])
        raw = 1.0 - ab[1:] / ab[:-1]
        beta = np.clip(raw, BETA_MIN_CLIP, BETA_MAX_CLIP)
        n_clipped = int(np.count_nonzero(beta != raw))
    else:
        lo, hi = p["beta_min"], p["beta_max"]
        if not (0.0 < lo < hi < 1.0):
            raise ScheduleError("linear schedule requires 0 < beta_min < beta_max < 1")
        beta = np.linspace(lo, hi, T) if T > 1 else np.array([lo])
        n_clipped = 0

    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(kind, T, p, _frozen(beta), _frozen(alpha), _frozen(alpha_bar), n_clipped)


def _check_step(s: NoiseSchedule, t, lo: int = 0) -> int:
    if isinstance(t, bool) or not isinstance(t, (int, np.integer)):
        raise ScheduleError(f"step must be an integer, got {t!r}")
    if not lo <= t <= s.T:
        raise ScheduleError(f"step {t} outside [{lo}, {s.T}]")
    return int(t)


def cumulative_noise(s: NoiseSchedule, t: int) -> float:
    """Noise standard deviation sqrt(1 - alpha_bar_t) accumulated after ``t`` steps."""
    t = _check_step(s, t)
    return float(math.sqrt(1.0 - s.alpha_bar[t]))


def nearest_step(s: NoiseSchedule, sigma_hat: float) -> int:
    """Step whose cumulative noise is closest to ``sigma_hat``.

    Ties go to the smaller step; anything beyond sigma(T) maps to T.
    """
    if not sigma_hat >= 0:
        raise ScheduleError(f"sigma_hat must be nonnegative, got {sigma_hat!r}")
    sig = s.sigma
    hi = int(np.searchsorted(sig, sigma_hat, side="left"))
    if hi == 0:
        return 0
    if hi > s.T:
        return s.T
    d_lo = sigma_hat - sig[hi - 1]
    d_hi = sig[hi] - sigma_hat
    # a few ulps of slack so an exact midpoint resolves downward
    slack = 8 * np.finfo(np.float64).eps * max(sig[hi], 1e-300)
    return hi - 1 if d_lo <= d_hi + slack else hi
