"""Shared fixtures.

Trained checkpoints are expensive (several minutes on one core), so they are
produced once through the CLI with default settings and cached under the
pytest cache directory, keyed by the default config and the training code.
Delete ``.pytest_cache`` (or run ``pytest --cache-clear``) to retrain.
"""

import hashlib
import json
import time
from pathlib import Path

import pytest

import stepcal
from stepcal import cli
from stepcal.bench import load_models

_TRAINING_SOURCES = ("_nn.py", "denoiser.py", "calibrator.py", "synth.py", "diffusion.py", "schedule.py",
                     "imagecore.py")


def _cache_key() -> str:
    h = hashlib.sha256(json.dumps(cli.DEFAULT_CONFIG, sort_keys=True).encode())
    src = Path(stepcal.__file__).parent
    for name in _TRAINING_SOURCES:
        h.update((src / name).read_bytes())
    return h.hexdigest()[:16]


def _train(directory: Path) -> dict:
    ck = {"denoiser": directory / "denoiser", "calibrator": directory / "calibrator",
          "calibrator_unaug": directory / "calibrator_unaug"}
    jobs = [("denoiser", ["train-denoiser", "--out", str(ck["denoiser"])]),
            ("calibrator", ["train-calibrator", "--out", str(ck["calibrator"])]),
            ("calibrator_unaug", ["train-calibrator", "--no-augment", "--out", str(ck["calibrator_unaug"])])]
    timing_file = directory / "train_seconds.json"
    timing = json.loads(timing_file.read_text()) if timing_file.exists() else {}
    for key, argv in jobs:
        if not (ck[key] / "manifest.txt").exists():
            t0 = time.perf_counter()
            assert cli.main(argv) == 0, f"training {key} failed"
            timing[key] = time.perf_counter() - t0
            timing_file.write_text(json.dumps(timing))
    return {k: str(v) for k, v in ck.items()}


@pytest.fixture(scope="session")
def train_seconds(checkpoints) -> dict:
    """Wall time of each training run (recorded when the cached checkpoint was built)."""
    f = Path(checkpoints["denoiser"]).parent / "train_seconds.json"
    return json.loads(f.read_text()) if f.exists() else {}


@pytest.fixture(scope="session")
def checkpoints(request) -> dict:
    directory = Path(request.config.cache.mkdir(f"stepcal-models-{_cache_key()}"))
    return _train(directory)


@pytest.fixture(scope="session")
def models(checkpoints):
    return load_models(checkpoints, set(checkpoints))


# -- acceptance verdicts ------------------------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
