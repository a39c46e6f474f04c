"""Minimal dense-network machinery with hand-derived gradients."""

from __future__ import annotations

import math

import numpy as np


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def relu(z):
    return np.maximum(z, 0.0)


def relu_grad(z):
    return (z > 0).astype(z.dtype)


ACTIVATIONS = {
    "silu": (silu, silu_grad),
    "relu": (relu, relu_grad),
    "linear": (lambda z: z, lambda z: np.ones_like(z)),
}


def window_features(x: np.ndarray, k: int = 3) -> np.ndarray:
    """Per-pixel k x k neighborhoods with reflection padding.

    ``x`` is ``(N, C, H, W)``; the result is ``(N, H, W, C*k*k)``.
    """
    r = k // 2
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="reflect")
    cols = [xp[:, :, dy:dy + H, dx:dx + W] for dy in range(k) for dx in range(k)]
    f = np.stack(cols, axis=2)  # N, C, k*k, H, W
    return f.reshape(N, C * k * k, H, W).transpose(0, 2, 3, 1)


def time_embedding(t, dim: int = 16, max_period: float = 1000.0) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class MLP:
    """Stack of dense layers; ``acts[i]`` follows layer ``i``."""

    def __init__(self, sizes, acts, rng, prefix: str = ""):
        assert len(acts) == len(sizes) - 1
        self.sizes = list(sizes)
        self.acts = list(acts)
        self.prefix = prefix
        self.params = {}
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = 1.0 if acts[i] == "linear" else 2.0
            self.params[f"{prefix}W{i}"] = rng.normal(0.0, math.sqrt(gain / n_in), (n_in, n_out))
            self.params[f"{prefix}b{i}"] = np.zeros(n_out)

    @property
    def n_layers(self) -> int:
        return len(self.acts)

    def forward(self, h, params=None, dtype=np.float64):
        p = self.params if params is None else params
        h = h.astype(dtype, copy=False)
        cache = []
        for i, act in enumerate(self.acts):
            z = h @ p[f"{self.prefix}W{i}"].astype(dtype, copy=False) + p[f"{self.prefix}b{i}"].astype(dtype, copy=False)
            cache.append((h, z))
            h = ACTIVATIONS[act][0](z)
        return h, cache

    def backward(self, grad_out, cache, grads, params=None):
        """Accumulate parameter gradients into ``grads``; returns d(loss)/d(input)."""
        p = self.params if params is None else params
        g = grad_out
        for i in reversed(range(self.n_layers)):
            h, z = cache[i]
            g = g * ACTIVATIONS[self.acts[i]][1](z)
            grads[f"{self.prefix}W{i}"] = grads.get(f"{self.prefix}W{i}", 0) + (h.T @ g).astype(np.float64)
            grads[f"{self.prefix}b{i}"] = grads.get(f"{self.prefix}b{i}", 0) + g.sum(axis=0, dtype=np.float64)
            g = g @ p[f"{self.prefix}W{i}"].T.astype(g.dtype, copy=False)
        return g


class Adam:
    def __init__(self, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.k = {}, {}, 0

    def step(self, params: dict, grads: dict) -> None:
        self.k += 1
        c1 = 1.0 - self.b1 ** self.k
        c2 = 1.0 - self.b2 ** self.k
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            params[name] -= self.lr * g


def cosine_lr(base: float, step: int, total: int, floor: float = 0.05) -> float:
    """Cosine decay from ``base`` to ``floor * base`` over ``total`` steps."""
    frac = min(step / max(total, 1), 1.0)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
