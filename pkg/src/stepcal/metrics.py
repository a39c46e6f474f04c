"""Full-reference image metrics and a kernel two-sample distance.

``mmd_rbf`` is a stand-in for FID/CMMD at desk scale; its values are not
comparable with those feature-based scores.
"""

from __future__ import annotations

import csv
import math

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import cdist, pdist

from .imagecore import ensure_rng

PSNR_CAP = 100.0


class MetricError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for data on a [0, 1] scale, capped at 100."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def ssim(a, b, sigma: float = 1.5, win: int = 11, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean structural similarity with a Gaussian window, averaged over channels.

    Border pixels within half a window of the edge are excluded from the mean.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < win or a.shape[-2] < win:
        raise MetricError(f"image {a.shape[-2]}x{a.shape[-1]} smaller than {win}x{win} window")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    r = (win - 1) // 2
    filt = lambda z: gaussian_filter(z, sigma, mode="reflect", truncate=r / sigma)
    vals = []
    for x, y in zip(a.reshape(-1, *a.shape[-2:]), b.reshape(-1, *b.shape[-2:])):
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        vxy = filt(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s[r:-r, r:-r].mean())
    return float(np.mean(vals))


def _flat(images):
    x = np.asarray(images, dtype=np.float64)
    return x.reshape(len(x), -1)


def median_bandwidth(X, Y) -> float:
    d = pdist(np.concatenate([X, Y]))
    h = float(np.median(d[d > 0])) if np.any(d > 0) else 1.0
    return h


def _mmd_from_kernel(K, n):
    kxx, kyy, kxy = K[:n, :n], K[n:, n:], K[:n, n:]
    m = kyy.shape[0]
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def mmd_rbf(set_a, set_b, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD between two image sets, RBF kernel on flattened pixels."""
    X, Y = _flat(set_a), _flat(set_b)
    if len(X) < 20 or len(Y) < 20:
        raise MetricError("mmd_rbf needs at least 20 images per set")
    h = bandwidth or median_bandwidth(X, Y)
    Z = np.concatenate([X, Y])
    K = np.exp(-cdist(Z, Z, "sqeuclidean") / (2 * h * h))
    return _mmd_from_kernel(K, len(X))


def mmd_permutation_test(set_a, set_b, n_perm: int = 200, rng=0, bandwidth: float | None = None):
    """Returns ``(mmd, p_value, null_std)`` using label permutations of the pooled sample."""
    X, Y = _flat(set_a), _flat(set_b)
    if len(X) < 20 or len(Y) < 20:
        raise MetricError("mmd_rbf needs at least 20 images per set")
    h = bandwidth or median_bandwidth(X, Y)
    Z = np.concatenate([X, Y])
    K = np.exp(-cdist(Z, Z, "sqeuclidean") / (2 * h * h))
    n = len(X)
    stat = _mmd_from_kernel(K, n)
    rng = ensure_rng(rng)
    null = np.empty(n_perm)
    for i in range(n_perm):
        idx = rng.permutation(len(Z))
        null[i] = _mmd_from_kernel(K[np.ix_(idx, idx)], n)
    p = (1 + np.count_nonzero(null >= stat)) / (n_perm + 1)
    return stat, float(p), float(null.std())


def write_metric_csv(path, rows) -> None:
    """Rows of ``(method, image_id, psnr, ssim)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "image_id", "psnr", "ssim"])
        for method, image_id, p, s in rows:
            w.writerow([method, image_id, f"{p:.4f}", f"{s:.5f}"])
