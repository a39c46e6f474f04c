"""Synthetic clean corpora, step-indexed degradations and z-stacks.

Degradation strength is always expressed as a diffusion step count, so every
degraded image carries an exact ground-truth step label.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import q_sample, two_region_corrupt
from .imagecore import DEFAULT_SHAPE, Volume, load_tensor, random_region_mask, rng_stream, save_tensor
from .schedule import NoiseSchedule, ScheduleError

CORPUS_KINDS = ("gauss_mixture_field", "texture", "blobs")
DEGRADE_KINDS = ("uniform_t", "two_region", "mixed")
CLASS_LABELS = {"blobs": 0, "texture": 1, "gauss_mixture_field": -1}


@dataclass
class CorpusSpec:
    kind: str = "blobs"
    shape: tuple = DEFAULT_SHAPE
    count: int = 64
    label: int | None = None
    seed: int = 0
    mixture: tuple = ((1.0, 0.5, 0.01),)

    def __post_init__(self):
        if self.kind not in CORPUS_KINDS:
            raise ValueError(f"unknown corpus kind {self.kind!r}")
        if self.count < 1:
            raise ValueError("corpus count must be >= 1")
        self.shape = tuple(int(s) for s in self.shape)
        if self.label is None:
            self.label = CLASS_LABELS[self.kind]


@dataclass
class DegradeSpec:
    """How to corrupt a clean corpus.

    ``t`` fixes the step; otherwise steps come from ``t_range`` (inclusive),
    uniformly or, with ``t_dist="geometric"``, as min(Geometric(p) - 1, hi).
    ``two_region_fraction`` applies only to ``kind="mixed"``.
    """

    kind: str = "uniform_t"
    t: int | None = None
    t_range: tuple = (1, 200)
    t_dist: str = "uniform"
    p: float = 0.03
    mask_kind: str = "halfplane"
    two_region_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEGRADE_KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.t_dist not in ("uniform", "geometric"):
            raise ValueError(f"unknown step distribution {self.t_dist!r}")
        lo, hi = self.t_range
        if self.t is not None and self.t < 0 or lo < 0 or hi < lo:
            raise ValueError("step values must be nonnegative with t_range lo <= hi")
        self.t_range = (int(lo), int(hi))


# -- clean corpora ---------------------------------------------------------------


def _blobs(shape, rng):
    C, H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.empty(shape)
    for c in range(C):
        x = np.full((H, W), rng.uniform(0.3, 0.4))
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            w = rng.uniform(2.5, 4.0)
            x += rng.uniform(0.2, 0.35) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
        img[c] = x
    return np.clip(img, 0.0, 1.0)


def _texture(shape, rng):
    C, H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    theta = rng.uniform(0, math.pi)
    period = rng.uniform(12.0, 20.0)
    phase = rng.uniform(0, 2 * math.pi)
    amp = rng.uniform(0.25, 0.32)
    u = (xx * math.cos(theta) + yy * math.sin(theta)) * (2 * math.pi / period) + phase
    return np.broadcast_to(0.5 + amp * np.sin(u), shape).copy()


def _mixture_field(shape, mixture, rng):
    comps = np.asarray(mixture, dtype=np.float64).reshape(-1, 3)
    w = comps[:, 0] / comps[:, 0].sum()
    k = rng.choice(len(w), size=shape, p=w)
    return comps[k, 1] + np.sqrt(comps[k, 2]) * rng.standard_normal(shape)


def gen_clean_corpus(spec: CorpusSpec):
    """Images ``(count, C, H, W)`` and integer labels; item i uses stream (seed, i)."""
    imgs = np.empty((spec.count,) + spec.shape)
    for i in range(spec.count):
        rng = rng_stream(spec.seed, i)
        if spec.kind == "blobs":
            imgs[i] = _blobs(spec.shape, rng)
        elif spec.kind == "texture":
            imgs[i] = _texture(spec.shape, rng)
        else:
            imgs[i] = _mixture_field(spec.shape, spec.mixture, rng)
    return imgs, np.full(spec.count, spec.label, dtype=np.int64)


def two_class_corpus(count: int, seed: int = 0, shape=DEFAULT_SHAPE):
    """Interleaved blobs (label 0) and textures (label 1), ``count`` images in total."""
    n_tex = count // 2
    a, la = gen_clean_corpus(CorpusSpec("blobs", shape, count - n_tex, seed=2 * seed))
    b, lb = gen_clean_corpus(CorpusSpec("texture", shape, max(n_tex, 1), seed=2 * seed + 1))
    b, lb = b[:n_tex], lb[:n_tex]
    imgs = np.empty((count,) + tuple(shape))
    labels = np.empty(count, dtype=np.int64)
    imgs[0::2], labels[0::2] = a, la
    imgs[1::2], labels[1::2] = b, lb
    return imgs, labels


# -- degradations -----------------------------------------------------------------


def _draw_t(spec: DegradeSpec, rng) -> int:
    if spec.t is not None:
        return int(spec.t)
    lo, hi = spec.t_range
    if spec.t_dist == "uniform":
        return int(rng.integers(lo, hi + 1))
    return int(min(lo + rng.geometric(spec.p) - 1, hi))


def degrade_corpus(corpus, spec: DegradeSpec, schedule: NoiseSchedule):
    """Corrupt each image; returns ``(lq, t_true, t_low)``.

    ``t_true`` is the larger of the two region steps (equal to the single step
    for uniform corruption); ``t_low`` is the lighter region's step.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    lq = np.empty_like(corpus)
    t_true = np.empty(len(corpus), dtype=np.int64)
    t_low = np.empty(len(corpus), dtype=np.int64)
    for i, x0 in enumerate(corpus):
        rng = rng_stream(spec.seed, i)
        t = _draw_t(spec, rng)
        if t > schedule.T:
            raise ScheduleError(f"degradation step {t} exceeds schedule T={schedule.T}")
        split = spec.kind == "two_region" or (
            spec.kind == "mixed" and rng.random() < spec.two_region_fraction)
        if split and t >= 1:
            t_prime = int(rng.integers(1, t + 1))
            m = random_region_mask(x0.shape[-2], x0.shape[-1], rng, spec.mask_kind)
            lq[i] = two_region_corrupt(x0, t, t_prime, m, schedule, rng)
        else:
            t_prime = t
            lq[i] = q_sample(x0, t, schedule, rng)[0]
        t_true[i], t_low[i] = t, t_prime
    return lq, t_true, t_low


# -- z-stacks ---------------------------------------------------------------------


def linear_depth_profile(n_slices: int = 20, t_max: int = 120) -> np.ndarray:
    z = np.arange(n_slices)
    return np.round(t_max * z / max(n_slices - 1, 1)).astype(np.int64)


def gen_zstack(clean, schedule: NoiseSchedule, profile=None, seed: int = 0,
               depth_start: float = 22.0, depth_step: float = 2.0) -> Volume:
    """Corrupt slice z to step ``profile[z]``.

    ``clean`` is either one ``(C, H, W)`` image reused at every depth or a
    ``(Z, C, H, W)`` stack of clean slices.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if profile is None:
        profile = linear_depth_profile(20 if clean.ndim == 3 else len(clean))
    profile = np.asarray(profile, dtype=np.int64)
    if np.any(np.diff(profile) < 0):
        raise ScheduleError("depth profile must be non-decreasing")
    if clean.ndim == 3:
        clean = np.broadcast_to(clean, (len(profile),) + clean.shape)
    if len(clean) != len(profile):
        raise ValueError("profile length must match the number of slices")
    out = np.empty(clean.shape)
    for z, (x0, t) in enumerate(zip(clean, profile)):
        out[z] = q_sample(x0, int(t), schedule, rng_stream(seed, z))[0]
    return Volume(out, depth_start, depth_step)


# -- persistence --------------------------------------------------------------------


def save_corpus(directory, images, labels=None, t_true=None) -> Path:
    """Write one PFT per image plus ``manifest.csv`` (id, path, label, t)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n = len(images)
    labels = np.full(n, -1) if labels is None else labels
    t_true = np.full(n, -1) if t_true is None else t_true
    with open(d / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "path", "label", "t"])
        for i in range(n):
            name = f"img_{i:05d}.pft"
            save_tensor(d / name, images[i])
            w.writerow([i, name, int(labels[i]), int(t_true[i])])
    return d / "manifest.csv"


def load_corpus(directory):
    d = Path(directory)
    imgs, labels, ts = [], [], []
    with open(d / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            imgs.append(load_tensor(d / row["path"]))
            labels.append(int(row["label"]))
            ts.append(int(row["t"]))
    return np.stack(imgs), np.array(labels), np.array(ts)
