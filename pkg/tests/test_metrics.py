import csv

import numpy as np
import pytest

from stepcal.diffusion import q_sample
from stepcal.imagecore import rng_stream
from stepcal.metrics import MetricError, mmd_permutation_test, mmd_rbf, psnr, ssim, write_metric_csv
from stepcal.schedule import build_schedule
from stepcal.synth import two_class_corpus

S = build_schedule("cosine", 1000)


def test_psnr_values():
    a = rng_stream(0).uniform(size=(1, 8, 8))
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros((1, 4, 4)), np.ones((1, 4, 4))) == 0.0
    assert psnr(np.zeros((1, 10, 10)), np.full((1, 10, 10), 0.1)) == pytest.approx(20.0, abs=1e-12)
    b = a + 0.05 * rng_stream(1).standard_normal(a.shape)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(MetricError):
        psnr(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_ssim_matches_reference_implementation():
    skm = pytest.importorskip("skimage.metrics")
    rng = rng_stream(2)
    for _ in range(3):
        a = rng.uniform(size=(24, 24))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        ref = skm.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False)
        assert ssim(a[None], b[None]) == pytest.approx(ref, abs=1e-10)


def test_ssim_properties():
    a = (rng_stream(3).uniform(size=(1, 16, 16)) > 0.5).astype(float)
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, 1 - a) < 0
    c = np.full((1, 16, 16), 0.4)
    assert ssim(c, c + 0.001 * rng_stream(4).standard_normal(c.shape)) > 0.99
    b = a + 0.1 * rng_stream(5).standard_normal(a.shape)
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    two = rng_stream(6).uniform(size=(2, 16, 16))
    assert ssim(two, two[::-1]) == pytest.approx((ssim(two[:1], two[1:]) + ssim(two[1:], two[:1])) / 2)
    with pytest.raises(MetricError):
        ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


def test_psnr_monotone_in_corruption():
    X, _ = two_class_corpus(30, seed=4)
    means = [np.mean([psnr(q_sample(x, t, S, rng_stream(t, i))[0], x) for i, x in enumerate(X)])
             for t in (0, 25, 50, 100)]
    assert means[0] == 100.0 and all(b < a for a, b in zip(means, means[1:]))


def test_mmd_same_generator_within_null():
    A, _ = two_class_corpus(40, seed=10, shape=(1, 16, 16))
    B, _ = two_class_corpus(40, seed=11, shape=(1, 16, 16))
    stat, p, null_std = mmd_permutation_test(A, B, n_perm=200, rng=0)
    assert abs(stat) < 3 * null_std and p > 0.01


def test_mmd_detects_corruption():
    A, _ = two_class_corpus(40, seed=10)
    B, _ = two_class_corpus(40, seed=11)
    noisy = q_sample(B, 100, S, rng_stream(1))[0]
    stat, p, _ = mmd_permutation_test(A, noisy, n_perm=500, rng=0)
    assert p <= 0.01 and stat > 0
    assert mmd_rbf(A, noisy) == pytest.approx(stat)


def test_mmd_identical_sets_and_errors():
    A, _ = two_class_corpus(30, seed=1, shape=(1, 8, 8))
    # identical samples: the unbiased estimate is the negative of the off-diagonal mean bias, close to 0
    assert abs(mmd_rbf(A, A)) < 0.05
    with pytest.raises(MetricError):
        mmd_rbf(A[:10], A)
    with pytest.raises(MetricError):
        mmd_permutation_test(A, A[:19])


def test_metric_csv(tmp_path):
    write_metric_csv(tmp_path / "m.csv", [("rscd", "img_0", 25.123456, 0.812345)])
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows == [["method", "image_id", "psnr", "ssim"], ["rscd", "img_0", "25.1235", "0.81234"]]
