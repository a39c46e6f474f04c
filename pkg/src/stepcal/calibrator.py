"""Step calibrators: predict how many reverse steps an image still needs."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _nn
from .denoiser import (CheckpointError, TrainingError, TrainReport, _as_corpus, checkpoint_schedule,
                       load_params, read_manifest)
from .diffusion import two_region_corrupt
from .imagecore import ImageError, as_patch, ensure_rng, random_region_mask
from .schedule import NoiseSchedule, ScheduleError, nearest_step


class StepCalibrator:
    """Base class.  Subclasses implement :meth:`predict_raw`.

    ``reset`` and ``advance`` are called by the restorers at the start of a
    restoration and after each block of reverse steps; they are no-ops except
    for stateful test fixtures.
    """

    T_prime: int = 200

    def predict_raw(self, x) -> float:
        raise NotImplementedError

    def predict_t(self, x) -> int:
        """Nearest-integer prediction clamped to [0, T_prime]."""
        x = as_patch(x)
        return clamp_steps(self.predict_raw(x), self.T_prime)

    def predict_batch(self, xs) -> np.ndarray:
        return np.array([self.predict_t(x) for x in xs], dtype=np.int64)

    def reset(self) -> None:
        pass

    def advance(self, n_steps: int) -> None:
        pass


def clamp_steps(raw: float, T_prime: int) -> int:
    if not math.isfinite(raw):
        raise ImageError(f"calibrator produced non-finite output {raw}")
    return int(min(max(round(raw), 0), T_prime))


# -- neural calibrator --------------------------------------------------------------


def dct_basis(k: int) -> np.ndarray:
    """Orthonormal 2D DCT-II basis for k x k windows, rows are basis vectors."""
    n = np.arange(k)
    D = np.cos(np.pi * (n[None, :] + 0.5) * n[:, None] / k) * np.sqrt(2.0 / k)
    D[0] /= np.sqrt(2.0)
    return np.kron(D, D)


class NeuralStepCalibrator(StepCalibrator):
    """Per-pixel 3x3 trunk (two SiLU layers), global average pooling, and a
    ReLU head of width 100 regressing the step count.

    With ``features="dct_log"`` each window is expressed in the DCT basis and
    the non-constant coefficients are compressed as sign(c)*log1p(|c|/log_eps),
    which makes noise amplitudes of 1e-2 and 1e-1 comparably visible.
    ``features="dct_energy"`` appends, per channel, the log of the window's
    mean squared non-constant coefficient, so the pooled trunk output can act
    as a histogram of local noise levels.
    """

    arch = "neural_calibrator"

    def __init__(self, channels: int = 1, width: int = 64, head: int = 100, window: int = 3,
                 T_prime: int = 200, t_scale: float = 200.0, features: str = "dct_log",
                 log_eps: float = 0.01, rng=0, dtype=np.float32):
        rng = ensure_rng(rng)
        if features not in ("raw", "dct_log", "dct_energy"):
            raise ValueError(f"unknown feature map {features!r}")
        self.channels, self.width, self.head, self.window = channels, width, head, window
        self.T_prime, self.t_scale, self.dtype = int(T_prime), float(t_scale), dtype
        self.features, self.log_eps = features, float(log_eps)
        self._basis = np.kron(np.eye(channels), dct_basis(window)).astype(dtype)
        self._is_dc = np.zeros(channels * window * window, bool)
        self._is_dc[:: window * window] = True
        n_in = channels * window * window + (channels if features == "dct_energy" else 0)
        self.trunk = _nn.MLP([n_in, width, width], ["silu", "silu"], rng, "trunk_")
        self.mlp = _nn.MLP([width, head, 1], ["relu", "linear"], rng, "head_")
        self.params = {**self.trunk.params, **self.mlp.params}
        self.trunk.params = self.mlp.params = self.params

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x, params=None):
        N, C, H, W = x.shape
        f = _nn.window_features(x.astype(self.dtype, copy=False), self.window).reshape(N * H * W, -1)
        if self.features != "raw":
            c = f @ self._basis.T
            f = np.where(self._is_dc, c, np.sign(c) * np.log1p(np.abs(c) / self.log_eps))
            if self.features == "dct_energy":
                k2 = self.window * self.window
                ac = (c * ~self._is_dc).reshape(len(c), C, k2)
                e = np.log((ac * ac).sum(axis=2) / (k2 - 1) + self.log_eps ** 2)
                f = np.concatenate([f, e.astype(f.dtype)], axis=1)
        h, c1 = self.trunk.forward(f, params, self.dtype)
        pooled = h.reshape(N, H * W, -1).mean(axis=1)
        u, c2 = self.mlp.forward(pooled, params, self.dtype)
        return u[:, 0] * self.t_scale, (c1, c2, H * W)

    def predict_raw(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(self.forward(x[None])[0][0])

    def predict_batch(self, xs) -> np.ndarray:
        """Clamped integer predictions for a stack ``(N, C, H, W)``."""
        raw, _ = self.forward(np.asarray(xs, dtype=np.float64))
        return np.array([clamp_steps(r, self.T_prime) for r in raw])

    def loss_and_grads(self, x, t, params=None):
        """Mean squared step error (in steps^2) and gradients of the scaled loss."""
        pred, (c1, c2, hw) = self.forward(x, params)
        diff = (pred - np.asarray(t, dtype=pred.dtype)) / self.t_scale
        n = len(diff)
        grads = {}
        g_pool = self.mlp.backward((2.0 * diff / n)[:, None], c2, grads, params)
        g_pix = np.repeat(g_pool / hw, hw, axis=0)
        self.trunk.backward(g_pix, c1, grads, params)
        return float(np.mean(diff.astype(np.float64) ** 2)) * self.t_scale ** 2, grads

    def manifest(self) -> dict:
        return {"arch": self.arch, "channels": self.channels, "width": self.width, "head": self.head,
                "window": self.window, "T_prime": self.T_prime, "t_scale": self.t_scale,
                "features": self.features, "log_eps": self.log_eps}

    @classmethod
    def from_manifest(cls, m: dict) -> "NeuralStepCalibrator":
        return cls(int(m["channels"]), int(m["width"]), int(m["head"]), int(m["window"]),
                   int(m["T_prime"]), float(m["t_scale"]), m.get("features", "raw"),
                   float(m.get("log_eps", 0.01)))


def augmented_batch(x0, schedule: NoiseSchedule, T_cal: int, augment: bool, rng):
    """Corrupt a batch for calibrator training; returns ``(x_t, target_t)``.

    Steps are drawn from U{0..T_cal}; step 0 keeps perfectly clean inputs in
    distribution.  With ``augment`` a random region keeps step t while the
    rest gets a smaller t' ~ U{1..t}; the target is always the larger step t.
    """
    n = len(x0)
    t = rng.integers(0, T_cal + 1, size=n)
    out = np.empty_like(x0)
    for i in range(n):
        if t[i] == 0:
            out[i] = x0[i]
        elif augment:
            t_prime = int(rng.integers(1, t[i] + 1))
            m = random_region_mask(x0.shape[-2], x0.shape[-1], rng)
            out[i] = two_region_corrupt(x0[i], int(t[i]), t_prime, m, schedule, rng)
        else:
            ab = schedule.alpha_bar[t[i]]
            out[i] = math.sqrt(ab) * x0[i] + math.sqrt(1 - ab) * rng.standard_normal(x0[i].shape)
    return out, t


def train_calibrator(model: NeuralStepCalibrator, corpus, schedule: NoiseSchedule, T_cal: int = 1000,
                     augment: bool = True, epochs: int = 10, lr: float = 1e-3, rng=0,
                     batch_size: int = 16, optimizer: str = "adam", lr_decay: bool = True) -> TrainReport:
    """Regress the (larger) corruption step with squared error."""
    if not 1 <= T_cal <= schedule.T:
        raise ScheduleError(f"T_cal must lie in [1, {schedule.T}], got {T_cal}")
    data = _as_corpus(corpus)
    rng = ensure_rng(rng)
    opt = _nn.make_optimizer(optimizer, lr)
    report = TrainReport(steps_seen=np.zeros(T_cal + 1, dtype=np.int64))
    n_batches = -(-len(data) // batch_size)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(data), batch_size):
            x_t, t = augmented_batch(data[order[start:start + batch_size]], schedule, T_cal, augment, rng)
            loss, grads = model.loss_and_grads(x_t, t)
            if not math.isfinite(loss):
                raise TrainingError(f"calibrator loss became {loss} at epoch {epoch}")
            if lr_decay:
                opt.lr = _nn.cosine_lr(lr, step, epochs * n_batches)
            opt.step(model.params, grads)
            step += 1
            np.add.at(report.steps_seen, t, 1)
            total += loss * len(t)
        report.epoch_loss.append(total / len(data))
    return report


def load_calibrator(path):
    """Load a NeuralStepCalibrator checkpoint; returns ``(model, schedule)``."""
    meta = read_manifest(path)
    if meta.get("arch") != NeuralStepCalibrator.arch:
        raise CheckpointError(f"{path} holds a {meta.get('arch')!r}, not a step calibrator")
    model = NeuralStepCalibrator.from_manifest(meta)
    load_params(path, model, meta)
    return model, checkpoint_schedule(meta)


# -- nonparametric estimator --------------------------------------------------------


def _patch_eigenvalues(x, p):
    C, H, W = x.shape
    win = sliding_window_view(x, (p, p), axis=(1, 2))  # C, H-p+1, W-p+1, p, p
    cols = win.transpose(1, 2, 0, 3, 4).reshape(-1, C * p * p)
    cov = np.cov(cols, rowvar=False)
    return np.clip(np.linalg.eigvalsh(cov), 0.0, None), cols.shape[0]


def estimate_sigma_pca(x, p: int = 7, tol: float = 1e-3, max_iter: int = 10) -> float:
    """Blind Gaussian noise level from the spectrum of overlapping-patch covariance.

    Signal eigenvalues are discarded from the top of the spectrum until the
    mean of the remainder no longer exceeds its median; the estimate is then
    refined by keeping only eigenvalues under the noise-bulk edge
    tau * (1 + sqrt(r / n))**2 until tau changes by less than ``tol``.
    """
    x = as_patch(x).astype(np.float64)
    if p < 3 or p % 2 == 0:
        raise ScheduleError(f"patch size must be odd and >= 3, got {p}")
    if x.shape[1] < 2 * p or x.shape[2] < 2 * p:
        raise ScheduleError(f"image {x.shape[1]}x{x.shape[2]} too small for patch size {p}")
    lam, n = _patch_eigenvalues(x, p)
    r = lam.size
    tau = float(lam.mean())
    for k in range(r, 0, -1):
        tail = lam[:k]
        tau = float(tail.mean())
        if np.count_nonzero(tail > tau) <= np.count_nonzero(tail < tau):
            break
    edge = (1.0 + math.sqrt(r / n)) ** 2
    for _ in range(max_iter):
        if tau <= 0:
            break
        kept = lam[lam <= tau * edge]
        new = float(kept.mean())
        done = abs(new - tau) <= tol * tau
        tau = new
        if done:
            break
    return math.sqrt(max(tau, 0.0))


class NonparametricCalibrator(StepCalibrator):
    """Maps the PCA noise estimate to the step with the closest cumulative noise."""

    def __init__(self, schedule: NoiseSchedule, p: int = 7, T_prime: int = 200):
        if p < 3 or p % 2 == 0:
            raise ScheduleError(f"patch size must be odd and >= 3, got {p}")
        self.schedule, self.p, self.T_prime = schedule, p, int(T_prime)

    def predict_raw(self, x) -> float:
        return float(nearest_step(self.schedule, estimate_sigma_pca(x, self.p)))


# -- fixtures -----------------------------------------------------------------------


class OracleCalibrator(StepCalibrator):
    """Knows the true step of one image and counts it down as steps are run."""

    def __init__(self, t: int, T_prime: int = 200):
        self.t, self.T_prime = int(t), int(T_prime)
        self._done = 0

    def reset(self) -> None:
        self._done = 0

    def advance(self, n_steps: int) -> None:
        self._done += n_steps

    def predict_raw(self, x) -> float:
        return float(max(self.t - self._done, 0))


class ConstantCalibrator(StepCalibrator):
    """Always returns the same raw value (used to probe clamping and budgets)."""

    def __init__(self, value: float, T_prime: int = 200):
        self.value, self.T_prime = float(value), int(T_prime)

    def predict_raw(self, x) -> float:
        return self.value
