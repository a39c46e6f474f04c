import math

import numpy as np
import pytest

from stepcal.calibrator import (ConstantCalibrator, NeuralStepCalibrator, NonparametricCalibrator,
                                OracleCalibrator, augmented_batch, clamp_steps, dct_basis, estimate_sigma_pca,
                                load_calibrator, train_calibrator)
from stepcal.denoiser import CheckpointError, TinyDenoiser, TrainingError, save_checkpoint
from stepcal.diffusion import q_sample, two_region_corrupt
from stepcal.imagecore import ImageError, random_region_mask, rng_stream
from stepcal.schedule import ScheduleError, build_schedule, nearest_step
from stepcal.synth import DegradeSpec, degrade_corpus, two_class_corpus

S = build_schedule("cosine", 1000)
X = np.zeros((1, 8, 8))


def test_predict_t_rounding_and_clamp():
    assert OracleCalibrator(34).predict_t(X) == 34
    assert ConstantCalibrator(-2.3).predict_t(X) == 0
    assert ConstantCalibrator(512.0).predict_t(X) == 200
    assert ConstantCalibrator(512.0, T_prime=300).predict_t(X) == 300
    assert ConstantCalibrator(33.5).predict_t(X) == 34 and ConstantCalibrator(33.4).predict_t(X) == 33
    with pytest.raises(ImageError):
        ConstantCalibrator(float("nan")).predict_t(X)
    with pytest.raises(ImageError):
        OracleCalibrator(3).predict_t(np.full((1, 4, 4), np.inf))
    assert clamp_steps(7.6, 5) == 5


def test_oracle_countdown_hooks():
    c = OracleCalibrator(34)
    c.advance(10)
    assert c.predict_t(X) == 24
    c.advance(40)
    assert c.predict_t(X) == 0
    c.reset()
    assert c.predict_t(X) == 34


def test_dct_basis_orthonormal():
    B = dct_basis(3)
    np.testing.assert_allclose(B @ B.T, np.eye(9), atol=1e-12)
    np.testing.assert_allclose(B[0], np.full(9, 1 / 3), atol=1e-12)


@pytest.mark.parametrize("features", ["raw", "dct_log", "dct_energy"])
def test_neural_calibrator_shape_and_size(features):
    c = NeuralStepCalibrator(features=features, rng=0)
    assert c.n_params() < 100_000
    xs = rng_stream(0).uniform(size=(3, 1, 12, 12))
    out = c.predict_batch(xs)
    assert out.shape == (3,) and out.dtype.kind == "i" and np.all((out >= 0) & (out <= 200))
    assert c.predict_t(xs[1]) == out[1]
    with pytest.raises(ValueError):
        NeuralStepCalibrator(features="fft")


@pytest.mark.parametrize("features", ["raw", "dct_energy"])
def test_calibrator_gradient_check(features):
    c = NeuralStepCalibrator(width=8, head=6, features=features, rng=1, dtype=np.float64)
    rng = rng_stream(3)
    x = rng.uniform(size=(3, 1, 5, 5))
    t = np.array([4.0, 60.0, 150.0])
    _, grads = c.loss_and_grads(x, t)
    scale = c.t_scale ** 2  # loss is reported in steps^2, gradients are of the scaled loss
    for name in sorted(c.params):
        p = c.params[name]
        idx = tuple(int(rng.integers(0, d)) for d in p.shape)
        orig, h = p[idx], 1e-6
        p[idx] = orig + h
        lp, _ = c.loss_and_grads(x, t)
        p[idx] = orig - h
        lm, _ = c.loss_and_grads(x, t)
        p[idx] = orig
        fd = (lp - lm) / (2 * h) / scale
        g = grads[name][idx]
        assert abs(fd - g) / max(abs(fd), abs(g), 1e-8) < 1e-3, (name, fd, g)


def test_augmented_batch_targets_larger_step():
    x0 = np.full((400, 1, 16, 16), 0.5)
    rng = rng_stream(2)
    xt, t = augmented_batch(x0, S, 300, True, rng)
    assert t.min() >= 0 and t.max() <= 300 and np.any(t == 0)
    np.testing.assert_array_equal(xt[t == 0], x0[t == 0])
    # the noisier region carries the target step, so the larger half-plane std matches sigma(t)
    big = t > 150
    ratios = []
    for img, tt in zip(xt[big], t[big]):
        stds = [img[0, :8].std(), img[0, 8:].std(), img[0, :, :8].std(), img[0, :, 8:].std()]
        ratios.append(max(stds) / S.sigma[tt])
    assert 0.85 < np.median(ratios) < 1.15
    _, t2 = augmented_batch(x0[:50], S, 20, False, rng_stream(2))
    assert t2.max() <= 20


def test_train_calibrator_contract():
    clean, _ = two_class_corpus(32, seed=0, shape=(1, 16, 16))
    c = NeuralStepCalibrator(width=16, head=16, T_prime=200, t_scale=100.0, rng=0)
    rep = train_calibrator(c, clean, S, T_cal=100, augment=False, epochs=8, lr=3e-3, rng=1)
    assert rep.final_loss < rep.epoch_loss[0]
    assert rep.steps_seen.sum() == 8 * 32 and len(rep.steps_seen) == 101
    with pytest.raises(ScheduleError):
        train_calibrator(c, clean, S, T_cal=1001)
    with pytest.raises(TrainingError):
        train_calibrator(NeuralStepCalibrator(rng=0), clean * 1e20, S, T_cal=100, epochs=2, lr=1e20,
                         optimizer="sgd")


def test_calibrator_checkpoint_round_trip(tmp_path):
    c = NeuralStepCalibrator(width=16, head=10, features="dct_energy", rng=5)
    save_checkpoint(tmp_path / "c", c, S, {"augment": 1})
    loaded, sched = load_calibrator(tmp_path / "c")
    assert sched.same_as(S) and loaded.features == "dct_energy" and loaded.head == 10
    xs = rng_stream(1).uniform(size=(4, 1, 10, 10))
    np.testing.assert_array_equal(loaded.predict_batch(xs), c.predict_batch(xs))
    save_checkpoint(tmp_path / "d", TinyDenoiser(rng=0), S)
    with pytest.raises(CheckpointError):
        load_calibrator(tmp_path / "d")


# -- nonparametric estimator -----------------------------------------------------------


def test_pca_sigma_on_pure_noise():
    est = [estimate_sigma_pca(0.1 * rng_stream(s).standard_normal((1, 64, 64))) for s in range(100)]
    assert all(0.09 <= e <= 0.11 for e in est)


def test_pca_sigma_constant_and_piecewise():
    assert estimate_sigma_pca(np.full((1, 32, 32), 0.4)) <= 0.005
    yy, xx = np.mgrid[0:64, 0:64]
    pc = np.where(xx + 0.5 * yy > 40, 0.8, 0.2)[None] + np.where((yy - 20) ** 2 + (xx - 45) ** 2 < 80, 0.1, 0)
    for s in range(10):
        e = estimate_sigma_pca(pc + 0.05 * rng_stream(s).standard_normal(pc.shape))
        assert 0.04 <= e <= 0.06


def test_pca_errors_and_mapping():
    with pytest.raises(ScheduleError):
        estimate_sigma_pca(np.zeros((1, 10, 10)), p=7)
    with pytest.raises(ScheduleError):
        NonparametricCalibrator(S, p=4)
    x = 0.1 * rng_stream(0).standard_normal((1, 64, 64))
    c = NonparametricCalibrator(S)
    assert c.predict_t(x) == nearest_step(S, estimate_sigma_pca(x))


# -- trained models ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def holdout():
    clean, _ = two_class_corpus(300, seed=99)
    lq, t, _ = degrade_corpus(clean, DegradeSpec("uniform_t", t_range=(1, 200), seed=5), S)
    two = []
    for i, x in enumerate(clean):
        g = rng_stream(7, i)
        two.append(two_region_corrupt(x, 100, 32, random_region_mask(32, 32, g), S, g))
    return clean, lq, t, np.array(two)


def test_unaugmented_mae_and_clean(models, holdout):
    clean, lq, t, _ = holdout
    c = models.calibrator_unaug
    assert np.abs(c.predict_batch(lq) - t).mean() <= 10
    assert c.predict_batch(clean).mean() <= 5


def test_augmented_targets_larger_region(models, holdout):
    _, _, _, two = holdout
    p = models.calibrator.predict_batch(two)
    assert abs(p.mean() - 100) <= 15
    assert np.mean(np.abs(p - 100) < np.abs(p - 32)) >= 0.9


def test_augmentation_bias_direction(models, holdout):
    _, _, _, two = holdout
    assert models.calibrator.predict_batch(two).mean() >= models.calibrator_unaug.predict_batch(two).mean()


def test_monotone_response(models):
    clean, _ = two_class_corpus(500, seed=123)
    for c in (models.calibrator, models.calibrator_unaug):
        lo = c.predict_batch(q_sample(clean, 50, S, rng_stream(1))[0]).mean()
        hi = c.predict_batch(q_sample(clean, 150, S, rng_stream(2))[0]).mean()
        assert hi > lo


def test_nonparametric_underestimates_two_region(models, holdout):
    _, _, _, two = holdout
    npc = NonparametricCalibrator(S)
    np_deficit = np.mean([100 - npc.predict_t(x) for x in two])
    nn_deficit = np.mean(100 - models.calibrator.predict_batch(two))
    assert np_deficit > nn_deficit
    assert math.isfinite(np_deficit)
