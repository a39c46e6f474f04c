"""Restore one corrupted patch with several methods and print the step traces.

Run: python demos/restore_one_image.py [DENOISER_DIR CALIBRATOR_DIR]

With checkpoint directories (from `stepcal train-denoiser` and
`stepcal train-calibrator`) the trained networks are used.  Without them the
demo falls back to the closed-form denoiser of a two-level pixel prior and the
PCA-based nonparametric calibrator, so it runs in a few seconds.  That prior
treats pixels independently, so a median filter, which exploits spatial
smoothness, can beat every diffusion method on this image.
"""

import sys

import numpy as np

from stepcal.calibrator import NonparametricCalibrator, OracleCalibrator, load_calibrator
from stepcal.denoiser import AnalyticGMDenoiser, load_denoiser
from stepcal.diffusion import q_sample
from stepcal.imagecore import rng_stream
from stepcal.metrics import psnr, ssim
from stepcal.restore import fixed_step_restore, median_restore, no_recal_restore, rscd_restore
from stepcal.schedule import build_schedule

S = build_schedule("cosine", 1000)
T_TRUE = 60

if len(sys.argv) == 3:
    den, S = load_denoiser(sys.argv[1])
    cal, _ = load_calibrator(sys.argv[2])
else:
    den = AnalyticGMDenoiser([(0.5, 0.3, 0.002), (0.5, 0.7, 0.002)], S)
    cal = NonparametricCalibrator(S)
# piecewise constant: the PCA estimator needs structure that is not white
clean = np.full((1, 32, 32), 0.3)
clean[:, 8:24, 8:24] = 0.7

noisy = q_sample(clean, T_TRUE, S, rng_stream(1))[0]
print(f"true step {T_TRUE}; degraded PSNR {psnr(noisy, clean):.2f} dB")

runs = {
    "rscd": lambda: rscd_restore(noisy, cal, den, S, rng=rng_stream(2)),
    "no_recal": lambda: no_recal_restore(noisy, cal, den, S, rng=rng_stream(2)),
    "oracle": lambda: rscd_restore(noisy, OracleCalibrator(T_TRUE), den, S, rng=rng_stream(2)),
    "fixed10": lambda: fixed_step_restore(noisy, 10, den, S, rng=rng_stream(2)),
    "fixed50": lambda: fixed_step_restore(noisy, 50, den, S, rng=rng_stream(2)),
    "median5": lambda: median_restore(noisy),
}
for name, run in runs.items():
    out, trace = run()
    print(f"{name:9s} PSNR {psnr(out, clean):6.2f}  SSIM {ssim(out, clean):.3f}  "
          f"NFE {trace.nfe:3d}  recalibrations {trace.predictions}")
