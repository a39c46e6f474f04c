import csv

import numpy as np
import pytest
from scipy.stats import chisquare

from stepcal import bench
from stepcal.bench import (ConfigError, ExperimentConfig, ModelSet, ToyClassifier, check_checkpoints,
                           decay_inversions, downstream_eval, geometric_corpus, method_requirements,
                           restore_corpus, run_benchmark, run_method, significant_inversions, tpred_histogram,
                           zstack_eval)
from stepcal.calibrator import ConstantCalibrator, OracleCalibrator
from stepcal.denoiser import AnalyticGMDenoiser
from stepcal.diffusion import q_sample
from stepcal.imagecore import rng_stream
from stepcal.restore import RestoreConfig, fixed_step_restore, median_restore
from stepcal.schedule import build_schedule
from stepcal.synth import gen_zstack, linear_depth_profile, two_class_corpus

S = build_schedule("cosine", 1000)


@pytest.fixture(scope="module")
def toy_models():
    den = AnalyticGMDenoiser([(0.5, 0.35, 0.005), (0.5, 0.65, 0.005)], S)
    return ModelSet(denoiser=den, schedule=S, calibrator=ConstantCalibrator(12),
                    calibrator_unaug=ConstantCalibrator(7))


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(count=19)
    with pytest.raises(ConfigError):
        ExperimentConfig(roster=())
    with pytest.raises(ConfigError):
        ExperimentConfig(roster=("rscd", "cyclegan"))
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=())
    cfg = ExperimentConfig(roster=["median5", "rscd_unaug"])
    assert cfg.required_models() == {"denoiser", "calibrator_unaug"}


def test_missing_checkpoints_fail_before_work(tmp_path):
    with pytest.raises(ConfigError, match="calibrator"):
        check_checkpoints({"denoiser": None}, {"calibrator"})
    with pytest.raises(ConfigError):
        check_checkpoints({"calibrator": str(tmp_path / "nope")}, {"calibrator"})
    cfg = ExperimentConfig(count=20, roster=("rscd",), checkpoints={}, out_dir=str(tmp_path / "out"))
    with pytest.raises(ConfigError):
        run_benchmark(cfg)
    assert not (tmp_path / "out").exists()
    with pytest.raises(ConfigError):
        run_benchmark(ExperimentConfig(count=20, roster=("rscd_linear",)), ModelSet(denoiser=1))


def test_method_requirements_and_dispatch(toy_models):
    assert method_requirements("median") == set()
    assert method_requirements("fixed") == {"denoiser"} == method_requirements("ccdf7")
    assert method_requirements("rscd_linear") == {"denoiser_linear", "calibrator_linear"}
    with pytest.raises(ConfigError):
        method_requirements("cyclegan")
    x = q_sample(two_class_corpus(1, seed=2)[0][0], 30, S, rng_stream(0))[0]
    cfg = RestoreConfig()
    assert run_method("fixed", x, toy_models, cfg, 0)[1].nfe == 10
    assert run_method("fixed", x, toy_models, cfg, 0, steps=25)[1].nfe == 25
    # the bare "fixed --steps 10" route equals the fixed10 preset
    a = run_method("fixed", x, toy_models, cfg, rng_stream(4), steps=10)[0]
    b = fixed_step_restore(x, 10, toy_models.denoiser, S, cfg, rng_stream(4))[0]
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(run_method("median5", x, toy_models)[0], median_restore(x)[0])
    assert run_method("ccdf", x, toy_models, cfg, 0)[1].nfe == 20
    assert run_method("rscd", x, toy_models, cfg, 0)[1].predictions == [12, 2]
    assert run_method("no_recal", x, toy_models, cfg, 0)[1].nfe == 12
    assert run_method("rscd_unaug", x, toy_models, cfg, 0)[1].nfe == 7
    assert run_method("nonparam", x, toy_models, cfg, 0)[1].method == "nonparam"
    with pytest.raises(ConfigError):
        run_method("rscd_linear", x, toy_models, cfg, 0)


def test_restore_corpus_independent_of_jobs(toy_models):
    X = q_sample(two_class_corpus(4, seed=1)[0], 20, S, rng_stream(0))[0]
    a, ta = restore_corpus("rscd", X, toy_models, RestoreConfig(), seed=3, jobs=1)
    b, tb = restore_corpus("rscd", X, toy_models, RestoreConfig(), seed=3, jobs=2)
    assert a.tobytes() == b.tobytes() and [t.nfe for t in ta] == [t.nfe for t in tb]


def test_run_benchmark_files_and_determinism(tmp_path, toy_models):
    roster = ("rscd", "fixed10", "median5")

    def run(d):
        cfg = ExperimentConfig(count=20, roster=roster, seeds=(0, 1), out_dir=str(tmp_path / d))
        return run_benchmark(cfg, toy_models)

    rep = run("a")
    run("b")
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()
    summary = list(csv.DictReader(open(tmp_path / "a" / "summary.csv")))
    assert [r["method"] for r in summary] == ["degraded", "degraded"] + list(roster) * 2
    for seed in (0, 1):
        for m in roster:
            rows = list(csv.DictReader(open(tmp_path / "a" / f"seed{seed}" / f"metrics_{m}.csv")))
            assert len(rows) == 20
            # summary PSNR reconciles with the per-image rows (4 decimal rounding)
            assert np.mean([float(r["psnr"]) for r in rows]) == pytest.approx(rep.get(m, seed).psnr, abs=1e-3)
        traces = list(csv.DictReader(open(tmp_path / "a" / f"seed{seed}" / "traces.csv")))
        assert len(traces) == 20 * len(roster)
        assert len(list(csv.reader(open(tmp_path / "a" / f"seed{seed}" / "t_true.csv")))) == 21
    assert rep.get("rscd", 0).nfe <= 200
    text = (tmp_path / "a" / "summary.txt").read_text()
    assert "MMD (not FID)" in text and "not implemented" in text and "cyclegan" in text
    assert rep.get("rscd", 0).psnr != rep.get("rscd", 1).psnr
    with pytest.raises(KeyError):
        rep.get("rscd", 7)


def test_histogram_binning(tmp_path):
    class Fixed(ConstantCalibrator):
        def __init__(self, vals):
            super().__init__(0)
            self.vals = iter(vals)

        def predict_raw(self, x):
            return next(self.vals)

    vals = [0, 9, 10, 55, 199, 200, 900, -4]
    edges, counts, preds = tpred_histogram(Fixed(vals), np.zeros((8, 1, 4, 4)), path=tmp_path / "h.csv")
    assert len(edges) == 21 and edges[-1] == 200
    assert counts[0] == 3 and counts[1] == 1 and counts[5] == 1 and counts[19] == 3 and counts.sum() == 8
    assert preds.max() <= 200
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["bin_lo", "bin_hi", "count"] and len(rows) == 21
    assert decay_inversions([50, 40, 30, 20, 25, 10]) == 1
    assert decay_inversions([1, 9, 30, 20, 10]) == 0
    assert significant_inversions([50, 40, 30, 20, 25, 10]) == 0
    assert significant_inversions([50, 40, 10, 30, 5], start=0) == 1


def test_true_geometric_histograms_pass_decay_check():
    for seed in range(6):
        _, t = geometric_corpus(400, S, seed=seed)
        c = np.bincount(np.minimum(t, 199) // 10, minlength=20)
        assert np.argmax(c) <= 2 and significant_inversions(c, 2) == 0


def test_geometric_corpus_matches_pmf():
    _, t = geometric_corpus(2000, S, seed=0)
    assert t.min() >= 0 and t.max() <= 200
    # exact binned probabilities of min(Geometric(0.03) - 1, 200), tail pooled past 100
    edges = np.arange(0, 101, 10)
    cdf = 1 - 0.97 ** edges
    expected = np.append(np.diff(cdf), 1 - cdf[-1]) * len(t)
    observed = np.bincount(np.minimum(t // 10, 10), minlength=11)
    assert chisquare(observed, expected).pvalue > 0.01


def test_toy_classifier():
    X, y = two_class_corpus(200, seed=5)
    clf = ToyClassifier().fit(X, y)
    assert clf.n_params() < 100
    assert clf.accuracy(X, y) >= 0.95
    T, yt = two_class_corpus(100, seed=6)
    assert clf.accuracy(T, yt) >= 0.95
    assert downstream_eval(clf, T, T, T, yt) == (clf.accuracy(T, yt),) * 3
    with pytest.raises(ConfigError):
        clf.accuracy(T, yt[:-1])
    with pytest.raises(ConfigError):
        downstream_eval(clf, T, T[:5], T, yt)
    with pytest.raises(ConfigError):
        ToyClassifier().fit(X, y + 1)


def test_zstack_eval_with_oracle(tmp_path):
    prof = linear_depth_profile()
    den = AnalyticGMDenoiser([(1.0, 0.5, 1e-4)], S)
    clean = [np.full((1, 16, 16), 0.5) for _ in range(3)]
    stacks = [np.broadcast_to(c, (20,) + c.shape) for c in clean]
    vols = [gen_zstack(c, S, prof, seed=v) for v, c in enumerate(clean)]

    def restorer(x, rng):
        sigma = float(np.std(x))
        t = int(np.argmin(np.abs(S.sigma[:201] - sigma)))
        from stepcal.restore import rscd_restore
        return rscd_restore(x, OracleCalibrator(t), den, S, rng=rng)

    curve = zstack_eval(vols, stacks, restorer, prof, seed=0, path=tmp_path / "z.csv")
    assert np.all(np.diff(curve.psnr_degraded[1:]) < 0)
    assert curve.psnr_restored[-1] > curve.psnr_degraded[-1] + 2
    assert abs(curve.slope("restored")) < abs(curve.slope("degraded"))
    rows = list(csv.reader(open(tmp_path / "z.csv")))
    assert rows[0][:3] == ["z", "depth_um", "t"] and len(rows) == 21 and rows[1][1] == "22"
    with pytest.raises(ConfigError):
        zstack_eval(vols[:2], stacks, restorer, prof)
    assert bench.EVAL_SEED_OFFSET != bench.REFERENCE_SEED_OFFSET
