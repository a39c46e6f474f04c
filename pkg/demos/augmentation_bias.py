"""Show why a whole-image noise estimate under-reads mixed-noise images.

Run: python demos/augmentation_bias.py [CALIBRATOR_DIR ...]

Half of each patch is corrupted to step 100 and half to step 32.  Restoring to
the smaller step leaves the heavier half noisy, so the calibrator should read
the larger one.  The PCA estimator pools both halves and lands in between;
calibrators trained with two-region augmentation are pulled upward.
"""

import sys

import numpy as np

from stepcal.calibrator import NonparametricCalibrator, load_calibrator
from stepcal.diffusion import two_region_corrupt
from stepcal.imagecore import random_region_mask, rng_stream
from stepcal.schedule import build_schedule
from stepcal.synth import two_class_corpus

S = build_schedule("cosine", 1000)
clean, _ = two_class_corpus(100, seed=5)
mixed = np.array([two_region_corrupt(x, 100, 32, random_region_mask(32, 32, rng_stream(3, i)), S, rng_stream(4, i))
                  for i, x in enumerate(clean)])

cals = {"nonparametric (PCA)": NonparametricCalibrator(S)}
cals.update({path: load_calibrator(path)[0] for path in sys.argv[1:]})
print("target (larger step): 100   smaller step: 32")
for name, cal in cals.items():
    p = cal.predict_batch(mixed)
    print(f"{name:30s} mean {p.mean():6.1f}  median {np.median(p):6.1f}  closer to 100: {np.mean(p > 66):.0%}")
