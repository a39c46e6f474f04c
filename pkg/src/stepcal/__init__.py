"""Step-calibrated diffusion restoration at desk scale.

A degraded image is treated as an unfinished reverse-diffusion trajectory: a
calibrator estimates how many reverse steps remain, a small noise predictor
runs them, and the estimate is refreshed every few steps.
"""

from .bench import (ConfigError, ExperimentConfig, ModelSet, ToyClassifier, downstream_eval, run_benchmark,
                    run_method, tpred_histogram, zstack_eval)
from .calibrator import (NeuralStepCalibrator, NonparametricCalibrator, OracleCalibrator, estimate_sigma_pca,
                         load_calibrator, train_calibrator)
from .denoiser import (AnalyticGMDenoiser, CheckpointError, TinyDenoiser, TrainingError, finetune_denoiser,
                       load_denoiser, save_checkpoint, train_denoiser)
from .diffusion import ddpm_step, generate, q_sample, two_region_corrupt
from .imagecore import FormatError, ImageError, SeededRng, Volume, load_image, read_tensor, save_image, save_tensor
from .metrics import MetricError, mmd_permutation_test, mmd_rbf, psnr, ssim
from .restore import (RestoreConfig, RestorationTrace, ccdf_restore, fixed_step_restore, median_blur,
                      no_recal_restore, rscd_restore)
from .schedule import NoiseSchedule, ScheduleError, build_schedule, cumulative_noise, nearest_step
from .synth import CorpusSpec, DegradeSpec, degrade_corpus, gen_clean_corpus, gen_zstack

__version__ = "0.1.0"
