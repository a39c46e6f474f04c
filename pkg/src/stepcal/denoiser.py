"""Noise predictors: an exact Gaussian-mixture oracle and a small trainable net."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import _nn
from .diffusion import q_sample
from .imagecore import ensure_rng, read_tensor, save_tensor
from .schedule import NoiseSchedule, ScheduleError


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class CheckpointError(ValueError):
    """Missing or inconsistent model checkpoint."""


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C, H, W) or (N, C, H, W), got shape {x.shape}")


# -- analytic oracle ---------------------------------------------------------------


class AnalyticGMDenoiser:
    """Exact E[eps | x_t] when every pixel is drawn i.i.d. from a Gaussian mixture.

    ``components`` is a sequence of ``(weight, mean, variance)``.  A variance of
    zero is allowed and gives a point-mass component.
    """

    def __init__(self, components, schedule: NoiseSchedule):
        comps = np.asarray(components, dtype=np.float64).reshape(-1, 3)
        w, mu, var = comps.T
        if np.any(w <= 0) or np.any(var < 0):
            raise ValueError("mixture weights must be positive and variances nonnegative")
        self.weights = w / w.sum()
        self.means = mu
        self.variances = var
        self.schedule = schedule

    def posterior_mean_x0(self, x_t, t: int):
        if not 1 <= t <= self.schedule.T:
            raise ScheduleError(f"analytic prediction needs 1 <= t <= {self.schedule.T}, got {t}")
        a = self.schedule.alpha_bar[t]
        x = np.asarray(x_t, dtype=np.float64)[..., None]
        sa = math.sqrt(a)
        s2 = a * self.variances + (1.0 - a)
        logr = np.log(self.weights) - 0.5 * np.log(2 * math.pi * s2) - 0.5 * (x - sa * self.means) ** 2 / s2
        r = np.exp(logr - logsumexp(logr, axis=-1, keepdims=True))
        cond = self.means + (sa * self.variances / s2) * (x - sa * self.means)
        return np.sum(r * cond, axis=-1)

    def predict(self, x_t, t: int):
        x0 = self.posterior_mean_x0(x_t, t)
        a = self.schedule.alpha_bar[t]
        return (np.asarray(x_t, dtype=np.float64) - math.sqrt(a) * x0) / math.sqrt(1.0 - a)

    def sample_prior(self, shape, rng):
        rng = ensure_rng(rng)
        k = rng.choice(len(self.weights), size=shape, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k]) * rng.standard_normal(shape)

    @property
    def prior_mean(self) -> float:
        return float(np.sum(self.weights * self.means))

    @property
    def prior_variance(self) -> float:
        m = self.prior_mean
        return float(np.sum(self.weights * (self.variances + self.means ** 2)) - m * m)


# -- trainable net -------------------------------------------------------------------


@dataclass
class TrainReport:
    epoch_loss: list = field(default_factory=list)
    steps_seen: np.ndarray | None = None

    @property
    def final_loss(self) -> float:
        return self.epoch_loss[-1] if self.epoch_loss else float("nan")


class TinyDenoiser:
    """Per-pixel noise predictor over a 3x3 neighborhood plus a step embedding.

    Features: the k*k*C window around each pixel concatenated with a
    ``time_dim``-wide sinusoidal embedding of t; two SiLU layers of ``width``;
    a linear output with one value per channel.
    """

    arch = "tiny_denoiser"

    def __init__(self, channels: int = 1, width: int = 64, time_dim: int = 16,
                 window: int = 3, rng=0, dtype=np.float32):
        self.channels, self.width, self.time_dim, self.window = channels, width, time_dim, window
        self.dtype = dtype
        n_in = channels * window * window + time_dim
        self.net = _nn.MLP([n_in, width, width, channels], ["silu", "silu", "linear"],
                           ensure_rng(rng))

    @property
    def params(self) -> dict:
        return self.net.params

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _features(self, x, t):
        N, C, H, W = x.shape
        t = np.broadcast_to(np.asarray(t), (N,))
        f = _nn.window_features(x.astype(self.dtype, copy=False), self.window)
        emb = np.broadcast_to(_nn.time_embedding(t, self.time_dim).astype(self.dtype)[:, None, None, :],
                              (N, H, W, self.time_dim))
        return np.concatenate([f, emb], axis=-1).reshape(N * H * W, -1)

    def forward(self, x, t, params=None):
        N, C, H, W = x.shape
        out, cache = self.net.forward(self._features(x, t), params, self.dtype)
        return out.reshape(N, H, W, C).transpose(0, 3, 1, 2), cache

    def predict(self, x_t, t):
        x, single = _batched(x_t)
        out, _ = self.forward(x, t)
        out = out.astype(np.float64)
        return out[0] if single else out

    def loss_and_grads(self, x_t, t, eps, loss_kind: str = "L1", params=None):
        """Mean per-pixel loss and its exact parameter gradients."""
        pred, cache = self.forward(x_t, t, params)
        diff = pred - eps.astype(self.dtype, copy=False)
        n = diff.size
        if loss_kind == "L1":
            loss = np.abs(diff).sum() / n
            g = np.sign(diff) / n
        elif loss_kind == "L2":
            loss = (diff ** 2).sum() / n
            g = 2.0 * diff / n
        else:
            raise ValueError(f"unknown loss {loss_kind!r}")
        g = g.transpose(0, 2, 3, 1).reshape(-1, self.channels)
        grads = {}
        self.net.backward(g, cache, grads, params)
        return float(loss), grads

    def manifest(self) -> dict:
        return {"arch": self.arch, "channels": self.channels, "width": self.width,
                "time_dim": self.time_dim, "window": self.window}

    @classmethod
    def from_manifest(cls, m: dict) -> "TinyDenoiser":
        return cls(int(m["channels"]), int(m["width"]), int(m["time_dim"]), int(m["window"]))


def _as_corpus(corpus) -> np.ndarray:
    x = np.asarray(corpus, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError("corpus must be a nonempty stack of (C, H, W) images")
    return x


def train_denoiser(model: TinyDenoiser, corpus, schedule: NoiseSchedule, T_prime: int = 200,
                   epochs: int = 10, lr: float = 1e-3, loss_kind: str = "L1", rng=0,
                   batch_size: int = 16, optimizer: str = "adam", lr_decay: bool = True) -> TrainReport:
    """Train on steps drawn uniformly from 1..T_prime only (shortcut training)."""
    if not 1 <= T_prime <= schedule.T:
        raise ScheduleError(f"T_prime must lie in [1, {schedule.T}], got {T_prime}")
    data = _as_corpus(corpus)
    rng = ensure_rng(rng)
    opt = _nn.make_optimizer(optimizer, lr)
    report = TrainReport(steps_seen=np.zeros(T_prime + 1, dtype=np.int64))
    n_batches = -(-len(data) // batch_size)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(data), batch_size):
            x0 = data[order[start:start + batch_size]]
            t = rng.integers(1, T_prime + 1, size=len(x0))
            eps = rng.standard_normal(x0.shape)
            ab = schedule.alpha_bar[t][:, None, None, None]
            x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
            loss, grads = model.loss_and_grads(x_t, t, eps, loss_kind)
            if not math.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}, batch starting {start}")
            if lr_decay:
                opt.lr = _nn.cosine_lr(lr, step, epochs * n_batches)
            opt.step(model.params, grads)
            step += 1
            np.add.at(report.steps_seen, t, 1)
            total += loss * len(x0)
            count += len(x0)
        report.epoch_loss.append(total / count)
    return report


def finetune_denoiser(model: TinyDenoiser, small_corpus, schedule: NoiseSchedule,
                      T_prime: int = 200, epochs: int = 20, lr: float = 1e-4, rng=0,
                      **kw) -> TrainReport:
    """Continue training a denoiser on a smaller curated corpus."""
    return train_denoiser(model, small_corpus, schedule, T_prime, epochs, lr, rng=rng, **kw)


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, model, schedule: NoiseSchedule, extra: dict | None = None) -> None:
    """Directory checkpoint: ``manifest.txt`` (key=value) plus one PFT per parameter."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    meta = dict(model.manifest())
    cfg = schedule.to_config()
    meta.update({"schedule_kind": cfg["kind"], "schedule_T": cfg["T"]})
    meta.update({f"schedule_{k}": repr(v) for k, v in cfg["params"].items()})
    meta.update(extra or {})
    meta["params"] = ",".join(sorted(model.params))
    lines = [f"{k}={v}" for k, v in meta.items()]
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    for name, arr in model.params.items():
        save_tensor(d / f"{name}.pft", arr)


def read_manifest(path) -> dict:
    f = Path(path) / "manifest.txt"
    if not f.is_file():
        raise CheckpointError(f"no checkpoint manifest at {f}")
    out = {}
    for line in f.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def checkpoint_schedule(meta: dict) -> NoiseSchedule:
    from .schedule import build_schedule

    params = {k[len("schedule_"):]: float(v) for k, v in meta.items()
              if k.startswith("schedule_") and k not in ("schedule_kind", "schedule_T")}
    return build_schedule(meta["schedule_kind"], int(meta["schedule_T"]), **params)


def load_params(path, model, meta: dict) -> None:
    for name in meta["params"].split(","):
        arr = read_tensor(Path(path) / f"{name}.pft").astype(np.float64)
        if name not in model.params or model.params[name].shape != arr.shape:
            raise CheckpointError(f"parameter {name} does not fit architecture {meta.get('arch')}")
        model.params[name] = arr


def load_denoiser(path):
    """Load a TinyDenoiser checkpoint; returns ``(model, schedule)``."""
    meta = read_manifest(path)
    if meta.get("arch") != TinyDenoiser.arch:
        raise CheckpointError(f"{path} holds a {meta.get('arch')!r}, not a denoiser")
    model = TinyDenoiser.from_manifest(meta)
    load_params(path, model, meta)
    return model, checkpoint_schedule(meta)
