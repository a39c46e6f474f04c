"""Benchmark orchestration: method roster, summary tables, step histograms,
a toy downstream classifier and depth curves for simulated z-stacks.

Every number written here is a function of the config and the seed only.
Wall time is kept out of the summary files so that reruns are byte-identical.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .calibrator import NonparametricCalibrator, load_calibrator
from .denoiser import CheckpointError, load_denoiser, read_manifest
from .imagecore import as_patch, rng_stream
from .metrics import mmd_rbf, psnr, ssim, write_metric_csv
from .restore import (CCDF_DEFAULT_STEPS, MEDIAN_DEFAULT_K, NOT_IMPLEMENTED_BASELINES,
                      RestoreConfig, ccdf_restore, fixed_step_restore, median_restore, no_recal_restore,
                      rscd_restore, trace_row, write_traces)
from .schedule import NoiseSchedule, build_schedule
from .synth import DegradeSpec, degrade_corpus, two_class_corpus

ROSTER = ("rscd", "no_recal", "fixed10", "fixed50", "ccdf20", "median5", "nonparam",
          "rscd_linear", "rscd_unaug")

# Which checkpoints each roster entry needs.
_NEEDS = {
    "rscd": ("denoiser", "calibrator"),
    "no_recal": ("denoiser", "calibrator"),
    "fixed10": ("denoiser",),
    "fixed50": ("denoiser",),
    "ccdf20": ("denoiser",),
    "median5": (),
    "nonparam": ("denoiser",),
    "rscd_linear": ("denoiser_linear", "calibrator_linear"),
    "rscd_unaug": ("denoiser", "calibrator_unaug"),
}
CHECKPOINT_KEYS = ("denoiser", "calibrator", "calibrator_unaug", "denoiser_linear", "calibrator_linear")

EVAL_SEED_OFFSET = 10_000
REFERENCE_SEED_OFFSET = 20_000


class ConfigError(ValueError):
    """Invalid experiment configuration (bad roster, missing checkpoint, label mismatch)."""


@dataclass
class ExperimentConfig:
    count: int = 60
    shape: tuple = (1, 32, 32)
    degrade: DegradeSpec = field(default_factory=lambda: DegradeSpec("mixed", t_range=(1, 200)))
    roster: tuple = ROSTER
    checkpoints: dict = field(default_factory=dict)
    seeds: tuple = (0,)
    out_dir: str | None = None
    restore: RestoreConfig = field(default_factory=RestoreConfig)
    jobs: int = 1
    # degradation schedule when no roster model carries one
    schedule: NoiseSchedule | None = None

    def __post_init__(self):
        if not self.roster:
            raise ConfigError("method roster is empty")
        unknown = [m for m in self.roster if m not in _NEEDS]
        if unknown:
            raise ConfigError(f"unknown roster methods {unknown}; known: {list(_NEEDS)}")
        if self.count < 20:
            raise ConfigError("benchmark corpora need at least 20 images for the MMD column")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.roster = tuple(self.roster)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.shape = tuple(int(s) for s in self.shape)

    def required_models(self) -> set:
        return {k for m in self.roster for k in _NEEDS[m]}


# -- models ---------------------------------------------------------------------------


@dataclass
class ModelSet:
    """Loaded models keyed like ``ExperimentConfig.checkpoints``."""

    denoiser: object = None
    schedule: NoiseSchedule | None = None
    calibrator: object = None
    calibrator_unaug: object = None
    denoiser_linear: object = None
    schedule_linear: NoiseSchedule | None = None
    calibrator_linear: object = None

    def has(self, key: str) -> bool:
        return getattr(self, key) is not None


def check_checkpoints(checkpoints: dict, required) -> None:
    """Raise ConfigError for any required checkpoint that is unset or unreadable."""
    for key in sorted(required):
        path = checkpoints.get(key)
        if not path:
            raise ConfigError(f"no checkpoint configured for {key!r}")
        try:
            read_manifest(path)
        except CheckpointError as e:
            raise ConfigError(str(e)) from None


def load_models(checkpoints: dict, required=CHECKPOINT_KEYS) -> ModelSet:
    check_checkpoints(checkpoints, required)
    ms = ModelSet()
    if "denoiser" in required:
        ms.denoiser, ms.schedule = load_denoiser(checkpoints["denoiser"])
    if "denoiser_linear" in required:
        ms.denoiser_linear, ms.schedule_linear = load_denoiser(checkpoints["denoiser_linear"])
    for key in ("calibrator", "calibrator_unaug", "calibrator_linear"):
        if key in required:
            setattr(ms, key, load_calibrator(checkpoints[key])[0])
    return ms


def method_requirements(method: str) -> set:
    """Checkpoint keys a (possibly bare ``fixed``/``ccdf``/``median``) method name needs."""
    base = method.rstrip("0123456789")
    key = {"fixed": "fixed10", "ccdf": "ccdf20", "median": "median5"}.get(base, method)
    if key not in _NEEDS:
        raise ConfigError(f"unknown method {method!r}")
    return set(_NEEDS[key])


def _require(models: ModelSet, method: str):
    missing = [k for k in _NEEDS[method] if not models.has(k)]
    if missing:
        raise ConfigError(f"method {method!r} needs models {missing}")


def run_method(method: str, x, models: ModelSet, cfg: RestoreConfig | None = None, rng=0,
               steps: int | None = None):
    """Restore one image with a roster method; returns ``(restored, trace)``.

    ``steps`` overrides the preset step count of ``fixed*``, ``ccdf*`` and the
    kernel size of ``median*``; ``"fixed"``, ``"ccdf"`` and ``"median"`` are
    accepted as bare names when ``steps`` is given.
    """
    cfg = cfg or RestoreConfig()
    base = method.rstrip("0123456789")
    if base in ("fixed", "ccdf", "median") and steps is None:
        if method == base:
            steps = {"fixed": 10, "ccdf": CCDF_DEFAULT_STEPS, "median": MEDIAN_DEFAULT_K}[base]
        else:
            steps = int(method[len(base):])
    if base == "median":
        return median_restore(x, steps)
    method_requirements(method)
    _require(models, {"fixed": "fixed10", "ccdf": "ccdf20"}.get(base, method))
    den, sched = models.denoiser, models.schedule
    if base == "fixed":
        return fixed_step_restore(x, steps, den, sched, cfg, rng, method=method)
    if base == "ccdf":
        return ccdf_restore(x, steps, den, sched, cfg, rng, method=method)
    if method == "rscd":
        return rscd_restore(x, models.calibrator, den, sched, cfg, rng, method)
    if method == "no_recal":
        return no_recal_restore(x, models.calibrator, den, sched, cfg, rng, method)
    if method == "nonparam":
        npc = NonparametricCalibrator(sched, T_prime=cfg.T_prime)
        return rscd_restore(x, npc, den, sched, cfg, rng, method)
    if method == "rscd_unaug":
        return rscd_restore(x, models.calibrator_unaug, den, sched, cfg, rng, method)
    return rscd_restore(x, models.calibrator_linear, models.denoiser_linear, models.schedule_linear,
                        cfg, rng, method)


def _restore_job(args):
    method, x, models, cfg, seed, i = args
    out, trace = run_method(method, x, models, cfg, rng_stream(seed, i))
    return out, trace


def restore_corpus(method: str, images, models: ModelSet, cfg: RestoreConfig, seed: int, jobs: int = 1):
    """Restore every image with stream ``(seed, i)``; results do not depend on ``jobs``."""
    jobs_in = [(method, x, models, cfg, seed, i) for i, x in enumerate(images)]
    if jobs > 1 and len(images) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_restore_job, jobs_in, chunksize=max(1, len(images) // (4 * jobs))))
    else:
        results = [_restore_job(a) for a in jobs_in]
    outs = np.stack([r[0] for r in results])
    return outs, [r[1] for r in results]


# -- benchmark --------------------------------------------------------------------------


@dataclass
class MethodSummary:
    method: str
    seed: int
    n: int
    psnr: float
    ssim: float
    mmd: float
    nfe: float
    budget_hits: int


@dataclass
class BenchmarkReport:
    rows: list
    degraded: list
    files: list = field(default_factory=list)

    def get(self, method: str, seed: int) -> MethodSummary:
        for r in self.rows + self.degraded:
            if r.method == method and r.seed == seed:
                return r
        raise KeyError((method, seed))

    def mean(self, method: str, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.rows + self.degraded if r.method == method]
        return float(np.mean(vals))


def benchmark_corpus(cfg: ExperimentConfig, seed: int, schedule: NoiseSchedule):
    """``(clean, degraded, t_true, reference)`` for one seed.

    ``reference`` is a second clean corpus from the same generators that the
    MMD column compares against, so no restored image is scored against its
    own ground truth.
    """
    clean, _ = two_class_corpus(cfg.count, EVAL_SEED_OFFSET + seed, cfg.shape)
    ref, _ = two_class_corpus(cfg.count, REFERENCE_SEED_OFFSET + seed, cfg.shape)
    spec = DegradeSpec(**{**asdict(cfg.degrade), "seed": seed})
    lq, t_true, _ = degrade_corpus(clean, spec, schedule)
    return clean, lq, t_true, ref


def _summarize(method, seed, restored, clean, ref, traces):
    return MethodSummary(
        method=method, seed=seed, n=len(restored),
        psnr=float(np.mean([psnr(a, b) for a, b in zip(restored, clean)])),
        ssim=float(np.mean([ssim(a, b) for a, b in zip(restored, clean)])),
        mmd=mmd_rbf(restored, ref),
        nfe=float(np.mean([t.nfe for t in traces])) if traces else 0.0,
        budget_hits=sum(int(t.budget_hit) for t in traces),
    )


SUMMARY_FIELDS = ["method", "seed", "n", "psnr", "ssim", "mmd", "nfe", "budget_hits"]


def _fmt_row(r: MethodSummary) -> dict:
    return {"method": r.method, "seed": r.seed, "n": r.n, "psnr": f"{r.psnr:.4f}", "ssim": f"{r.ssim:.5f}",
            "mmd": f"{r.mmd:.6f}", "nfe": f"{r.nfe:.2f}", "budget_hits": r.budget_hits}


def format_table(rows, title: str = "") -> str:
    """Aligned text table; the distribution column is labelled as MMD, not FID."""
    head = ["method", "seed", "PSNR", "SSIM", "MMD (not FID)", "mean NFE", "budget hits"]
    body = [[r.method, str(r.seed), f"{r.psnr:.2f}", f"{r.ssim:.3f}", f"{r.mmd:.5f}", f"{r.nfe:.1f}",
             str(r.budget_hits)] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(head)]
    line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    out = [title] if title else []
    out += [line(head), line(["-" * w for w in widths])] + [line(b) for b in body]
    out.append("")
    out.append("not implemented (need pretrained or adversarial networks): "
               + ", ".join(NOT_IMPLEMENTED_BASELINES))
    return "\n".join(out) + "\n"


def run_benchmark(cfg: ExperimentConfig, models: ModelSet | None = None) -> BenchmarkReport:
    """Restore the benchmark corpus with every roster method for every seed.

    Pass ``models`` to reuse in-memory models; otherwise checkpoints are
    loaded from ``cfg.checkpoints`` and validated before any restoration.
    """
    required = cfg.required_models()
    if models is None:
        models = load_models(cfg.checkpoints, required)
    for m in cfg.roster:
        _require(models, m)
    schedule = models.schedule or models.schedule_linear or cfg.schedule or build_schedule("cosine", 1000)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    report = BenchmarkReport(rows=[], degraded=[])
    for seed in cfg.seeds:
        clean, lq, t_true, ref = benchmark_corpus(cfg, seed, schedule)
        report.degraded.append(_summarize("degraded", seed, lq, clean, ref, []))
        trace_rows = []
        for method in cfg.roster:
            restored, traces = restore_corpus(method, lq, models, cfg.restore, seed, cfg.jobs)
            report.rows.append(_summarize(method, seed, restored, clean, ref, traces))
            per_image = []
            for i, (r, c, tr) in enumerate(zip(restored, clean, traces)):
                p, s = psnr(r, c), ssim(r, c)
                per_image.append((method, i, p, s))
                trace_rows.append(trace_row(i, tr, p, s))
            if out:
                f = out / f"seed{seed}" / f"metrics_{method}.csv"
                f.parent.mkdir(exist_ok=True)
                write_metric_csv(f, per_image)
                report.files.append(f)
        if out:
            f = out / f"seed{seed}" / "traces.csv"
            write_traces(f, trace_rows)
            report.files.append(f)
            with open(out / f"seed{seed}" / "t_true.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["image_id", "t_true"])
                w.writerows(enumerate(t_true.tolist()))
    if out:
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
            w.writeheader()
            for r in report.degraded + report.rows:
                w.writerow(_fmt_row(r))
        (out / "summary.txt").write_text(format_table(report.degraded + report.rows, "restoration benchmark"))
        report.files += [out / "summary.csv", out / "summary.txt"]
    return report


# -- step histogram -----------------------------------------------------------------------


def geometric_corpus(count: int, schedule: NoiseSchedule, seed: int = 0, p: float = 0.03,
                     T_prime: int = 200, shape=(1, 32, 32)):
    """Clean images corrupted at steps min(Geometric(p) - 1, T_prime); returns ``(lq, t_true)``."""
    clean, _ = two_class_corpus(count, EVAL_SEED_OFFSET + seed, shape)
    spec = DegradeSpec("uniform_t", t_range=(0, T_prime), t_dist="geometric", p=p, seed=seed)
    lq, t, _ = degrade_corpus(clean, spec, schedule)
    return lq, t


def tpred_histogram(calibrator, corpus, T_prime: int = 200, bin_width: int = 10, path=None):
    """Counts of calibrated steps in bins ``[k*w, (k+1)*w)``; the last bin also holds T_prime.

    Returns ``(edges, counts, predictions)``.
    """
    preds = np.array([calibrator.predict_t(as_patch(x)) for x in corpus], dtype=np.int64)
    n_bins = -(-T_prime // bin_width)
    edges = np.arange(n_bins + 1) * bin_width
    counts = np.bincount(np.minimum(preds // bin_width, n_bins - 1), minlength=n_bins)
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for k in range(n_bins):
                w.writerow([int(edges[k]), int(edges[k + 1]), int(counts[k])])
    return edges, counts, preds


def decay_inversions(counts, start: int = 2) -> int:
    """Number of bins (from ``start``) whose count exceeds the previous bin's."""
    c = np.asarray(counts)[start:]
    return int(np.count_nonzero(np.diff(c) > 0))


def significant_inversions(counts, start: int = 2, z: float = 2.0) -> int:
    """Increases between adjacent bins (from ``start``) larger than ``z`` Poisson
    standard deviations of the difference, ``z * sqrt(c[k] + c[k+1])``."""
    c = np.asarray(counts, dtype=np.float64)[start:]
    rise = np.diff(c)
    return int(np.count_nonzero(rise > z * np.sqrt(c[:-1] + c[1:])))


# -- downstream classifier -------------------------------------------------------------------


def image_features(images) -> np.ndarray:
    """Per-image mean, variance and mean squared finite-difference gradient."""
    x = np.asarray(images, dtype=np.float64)
    gy = np.diff(x, axis=-2)
    gx = np.diff(x, axis=-1)
    grad = (gy ** 2).mean(axis=(1, 2, 3)) + (gx ** 2).mean(axis=(1, 2, 3))
    return np.stack([x.mean(axis=(1, 2, 3)), x.var(axis=(1, 2, 3)), grad], axis=1)


class ToyClassifier:
    """Logistic regression on standardized :func:`image_features` (10 parameters)."""

    def __init__(self, l2: float = 1e-3):
        self.l2 = l2
        self.mu = self.sd = self.w = None
        self.b = 0.0

    def n_params(self) -> int:
        # standardization (mu, sd) plus weights and bias
        return 3 + 3 + 3 + 1

    def _z(self, images):
        return (image_features(images) - self.mu) / self.sd

    def fit(self, images, labels) -> "ToyClassifier":
        y = np.asarray(labels, dtype=np.float64)
        if not set(np.unique(y)) <= {0.0, 1.0}:
            raise ConfigError("toy classifier labels must be 0/1")
        f = image_features(images)
        self.mu, self.sd = f.mean(axis=0), f.std(axis=0) + 1e-12
        z = (f - self.mu) / self.sd

        def nll(theta):
            w, b = theta[:3], theta[3]
            s = z @ w + b
            loss = np.mean(np.logaddexp(0.0, s) - y * s) + 0.5 * self.l2 * w @ w
            r = 1.0 / (1.0 + np.exp(-s)) - y
            return loss, np.concatenate([z.T @ r / len(y) + self.l2 * w, [r.mean()]])

        res = minimize(nll, np.zeros(4), jac=True, method="L-BFGS-B")
        self.w, self.b = res.x[:3], float(res.x[3])
        return self

    def predict(self, images) -> np.ndarray:
        return (self._z(images) @ self.w + self.b > 0).astype(np.int64)

    def accuracy(self, images, labels) -> float:
        labels = np.asarray(labels)
        if len(labels) != len(images):
            raise ConfigError(f"{len(images)} images but {len(labels)} labels")
        return float(np.mean(self.predict(images) == labels))


def downstream_eval(classifier: ToyClassifier, clean, degraded, restored, labels):
    """Accuracy triple ``(clean, degraded, restored)``."""
    n = len(labels)
    if not len(clean) == len(degraded) == len(restored) == n:
        raise ConfigError("clean, degraded and restored sets must match the label count")
    return (classifier.accuracy(clean, labels), classifier.accuracy(degraded, labels),
            classifier.accuracy(restored, labels))


# -- z-stacks ------------------------------------------------------------------------------------


@dataclass
class DepthCurve:
    z: np.ndarray
    depth: np.ndarray
    t: np.ndarray
    psnr_degraded: np.ndarray
    psnr_restored: np.ndarray
    mmd_degraded: np.ndarray
    mmd_restored: np.ndarray

    def slope(self, which: str) -> float:
        """Least-squares PSNR slope in dB per depth unit."""
        y = self.psnr_degraded if which == "degraded" else self.psnr_restored
        return float(np.polyfit(self.depth, y, 1)[0])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z", "depth_um", "t", "psnr_degraded", "psnr_restored", "mmd_degraded", "mmd_restored"])
            for k in range(len(self.z)):
                w.writerow([int(self.z[k]), f"{self.depth[k]:g}", int(self.t[k]), f"{self.psnr_degraded[k]:.4f}",
                            f"{self.psnr_restored[k]:.4f}", f"{self.mmd_degraded[k]:.6f}",
                            f"{self.mmd_restored[k]:.6f}"])


def zstack_eval(volumes, clean_stacks, restorer, profile, seed: int = 0, path=None) -> DepthCurve:
    """Per-depth PSNR and MMD of degraded and restored slices.

    ``volumes`` are degraded :class:`Volume` objects, ``clean_stacks`` the
    matching ``(Z, C, H, W)`` clean slices, and ``restorer(x, rng)`` returns
    ``(restored, trace)``.  MMD at depth z compares the slice-z population
    against the clean slice-z population, which needs at least 20 volumes.
    """
    clean = np.stack([np.asarray(c, dtype=np.float64) for c in clean_stacks])  # V, Z, C, H, W
    deg = np.stack([v.slices for v in volumes])
    if deg.shape != clean.shape:
        raise ConfigError(f"degraded stacks {deg.shape} do not match clean stacks {clean.shape}")
    V, Z = deg.shape[:2]
    rest = np.empty_like(deg)
    for v in range(V):
        for z in range(Z):
            rest[v, z] = restorer(deg[v, z], rng_stream(seed, v, z))[0]
    p_deg = np.array([np.mean([psnr(deg[v, z], clean[v, z]) for v in range(V)]) for z in range(Z)])
    p_res = np.array([np.mean([psnr(rest[v, z], clean[v, z]) for v in range(V)]) for z in range(Z)])
    if V >= 20:
        m_deg = np.array([mmd_rbf(deg[:, z], clean[:, z]) for z in range(Z)])
        m_res = np.array([mmd_rbf(rest[:, z], clean[:, z]) for z in range(Z)])
    else:
        m_deg = m_res = np.full(Z, math.nan)
    curve = DepthCurve(np.arange(Z), np.asarray(volumes[0].depths, dtype=np.float64),
                       np.asarray(profile, dtype=np.int64), p_deg, p_res, m_deg, m_res)
    if path is not None:
        curve.write_csv(path)
    return curve
