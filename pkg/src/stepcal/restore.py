"""Step-calibrated restoration with dynamic recalibration, plus ablations and baselines.

Every restorer returns ``(restored, trace)``.  Denoiser calls are budgeted:
a restoration never exceeds ``cfg.nfe_budget`` calls, and hitting the budget
is reported in the trace rather than raised.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter

from .diffusion import NFECounter, ddpm_step, q_sample
from .imagecore import ImageError, as_patch, ensure_rng
from .schedule import NoiseSchedule, ScheduleError

FIXED_PRESETS = {"fixed10": 10, "fixed50": 50}
D_PRESETS = (5, 10, 20)
CCDF_DEFAULT_STEPS = 20
MEDIAN_DEFAULT_K = 5
NOT_IMPLEMENTED_BASELINES = ("cyclegan", "deep_image_prior", "synthetic_noise_unet",
                             "conditional_diffusion", "rrd_fourier")


@dataclass
class RestoreConfig:
    d: int = 10
    T_prime: int = 200
    nfe_budget: int = 400
    noise_at_final_step: bool = True
    clamp_recalibration: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"recalibration interval must be >= 1, got {self.d}")
        if self.nfe_budget < self.T_prime:
            raise ValueError("nfe_budget must be at least T_prime")


@dataclass
class RestorationTrace:
    method: str = "rscd"
    events: list = field(default_factory=list)  # (remaining-step prediction, NFE so far)
    nfe: int = 0
    budget_hit: bool = False
    wall_time: float = 0.0

    @property
    def predictions(self) -> list:
        return [t for t, _ in self.events]


class _Runner:
    """Runs reverse steps one at a time against the NFE budget."""

    def __init__(self, x, denoiser, schedule, cfg, rng, trace):
        self.x = np.asarray(x, dtype=np.float64)
        self.denoiser, self.schedule, self.cfg = denoiser, schedule, cfg
        self.rng = ensure_rng(rng)
        self.counter = NFECounter()
        self.trace = trace

    def run(self, t_from: int, n: int) -> int:
        """Reverse ``n`` steps starting at step ``t_from``; returns the steps actually run."""
        done = 0
        for k in range(t_from, t_from - n, -1):
            if self.counter.count + 1 > self.cfg.nfe_budget:
                self.trace.budget_hit = True
                break
            self.x = ddpm_step(self.x, k, self.denoiser, self.schedule, self.rng,
                               self.cfg.noise_at_final_step, self.counter)
            done += 1
        return done

    def finish(self):
        self.trace.nfe = self.counter.count
        return self.x


def _start(x, method):
    x = as_patch(x)
    return x, RestorationTrace(method=method), time.perf_counter()


def _end(runner, t0):
    out = runner.finish()
    runner.trace.wall_time = time.perf_counter() - t0
    return out, runner.trace


def _check_shared_schedule(calibrator, schedule):
    s = getattr(calibrator, "schedule", None)
    if s is not None and not s.same_as(schedule):
        raise ScheduleError("calibrator and denoiser use different noise schedules")


def rscd_restore(x, calibrator, denoiser, schedule: NoiseSchedule, cfg: RestoreConfig | None = None,
                 rng=0, method: str = "rscd"):
    """Calibrate, run ``d`` reverse steps, recalibrate, repeat.

    Once the predicted remaining count drops below ``d`` the rest is run
    without further calibration.  With ``clamp_recalibration`` a new
    prediction never exceeds the previous remaining count.
    """
    cfg = cfg or RestoreConfig()
    _check_shared_schedule(calibrator, schedule)
    x, trace, t0 = _start(x, method)
    runner = _Runner(x, denoiser, schedule, cfg, rng, trace)
    calibrator.reset()
    t = min(calibrator.predict_t(x), schedule.T)
    trace.events.append((t, 0))
    while t > 0 and not trace.budget_hit:
        if t < cfg.d:
            runner.run(t, t)
            break
        done = runner.run(t, cfg.d)
        calibrator.advance(done)
        if trace.budget_hit:
            break
        remaining = t - cfg.d
        t = min(calibrator.predict_t(runner.x), schedule.T)
        if cfg.clamp_recalibration:
            t = min(t, remaining)
        trace.events.append((t, runner.counter.count))
    return _end(runner, t0)


def no_recal_restore(x, calibrator, denoiser, schedule: NoiseSchedule,
                     cfg: RestoreConfig | None = None, rng=0, method: str = "no_recal"):
    """One calibration, then that many reverse steps straight through."""
    cfg = cfg or RestoreConfig()
    _check_shared_schedule(calibrator, schedule)
    x, trace, t0 = _start(x, method)
    runner = _Runner(x, denoiser, schedule, cfg, rng, trace)
    calibrator.reset()
    t = min(calibrator.predict_t(x), schedule.T)
    trace.events.append((t, 0))
    runner.run(t, t)
    return _end(runner, t0)


def fixed_step_restore(x, n_steps: int, denoiser, schedule: NoiseSchedule,
                       cfg: RestoreConfig | None = None, rng=0, method: str | None = None):
    """Treat every input as step ``n_steps`` and reverse all the way to 0."""
    if not 1 <= n_steps <= schedule.T:
        raise ScheduleError(f"n_steps must lie in [1, {schedule.T}], got {n_steps}")
    cfg = cfg or RestoreConfig()
    x, trace, t0 = _start(x, method or f"fixed{n_steps}")
    runner = _Runner(x, denoiser, schedule, cfg, rng, trace)
    runner.run(n_steps, n_steps)
    return _end(runner, t0)


def ccdf_restore(x, n_add: int = CCDF_DEFAULT_STEPS, denoiser=None, schedule: NoiseSchedule = None,
                 cfg: RestoreConfig | None = None, rng=0, method: str | None = None):
    """Forward-noise the input by ``n_add`` steps, then reverse ``n_add`` steps."""
    if not 1 <= n_add <= schedule.T:
        raise ScheduleError(f"n_add must lie in [1, {schedule.T}], got {n_add}")
    cfg = cfg or RestoreConfig()
    x, trace, t0 = _start(x, method or f"ccdf{n_add}")
    rng = ensure_rng(rng)
    x_n, _ = q_sample(x, n_add, schedule, rng)
    runner = _Runner(x_n, denoiser, schedule, cfg, rng, trace)
    runner.run(n_add, n_add)
    return _end(runner, t0)


def median_blur(x, k: int = MEDIAN_DEFAULT_K):
    """Per-channel k x k median with reflection at the borders."""
    if k < 1 or k % 2 == 0:
        raise ImageError(f"median kernel size must be odd and positive, got {k}")
    x = as_patch(x)
    return np.stack([median_filter(c, size=k, mode="reflect") for c in x])


def median_restore(x, k: int = MEDIAN_DEFAULT_K, method: str | None = None):
    t0 = time.perf_counter()
    out = median_blur(x, k)
    return out, RestorationTrace(method=method or f"median{k}", wall_time=time.perf_counter() - t0)


# -- trace export -------------------------------------------------------------------

TRACE_FIELDS = ["image_id", "method", "nfe", "calibrations", "budget_hit", "psnr", "ssim"]


def trace_row(image_id, trace: RestorationTrace, psnr=None, ssim=None) -> dict:
    return {
        "image_id": image_id,
        "method": trace.method,
        "nfe": trace.nfe,
        "calibrations": ";".join(str(t) for t in trace.predictions),
        "budget_hit": int(trace.budget_hit),
        "psnr": "" if psnr is None else f"{psnr:.4f}",
        "ssim": "" if ssim is None else f"{ssim:.5f}",
    }


def write_traces(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        w.writerows(rows)
