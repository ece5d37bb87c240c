import os
import time
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mmimpute.dataset import build_split, rasterize
from mmimpute.model import LatentModel, TrainConfig, train

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def central_diff(f, x, h=1e-5):
    """Gradient of scalar ``f`` w.r.t. array ``x`` (perturbed in place and restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


# --- acceptance-scale training, shared by every test that needs a trained model ---------

DATA_SEED, MODEL_SEED = 0, 1
TRAIN_PER_CATEGORY, TEST_PER_CATEGORY = 100, 25
FORWARD_EPOCHS = TrainConfig().epochs
# the reverse direction trains on the 4x smaller split: same number of samples seen
REVERSE_EPOCHS = FORWARD_EPOCHS * TRAIN_PER_CATEGORY // TEST_PER_CATEGORY


@dataclass
class TrainedRun:
    model: LatentModel
    history: list
    seconds: float
    train: object  # Arrays the model was fitted on
    test: object  # Arrays it is evaluated on


@pytest.fixture(scope="session")
def shapes():
    split = build_split(TRAIN_PER_CATEGORY, TEST_PER_CATEGORY, DATA_SEED)
    return rasterize(split.train), rasterize(split.test)


def _fit(kind, fit, held_out, epochs):
    model = LatentModel(TrainConfig(model_kind=kind, seed=MODEL_SEED, epochs=epochs))
    start = time.perf_counter()
    # adam_step raises on any non-finite parameter, so a finished run is NaN/Inf free at every step
    history = train(model, fit.images, fit.labels, fit.voxels)
    return TrainedRun(model, history, time.perf_counter() - start, fit, held_out)


@pytest.fixture(scope="session")
def mmvae_forward(shapes):
    return _fit("mmvae", shapes[0], shapes[1], FORWARD_EPOCHS)


@pytest.fixture(scope="session")
def mmvae_reverse(shapes):
    return _fit("mmvae", shapes[1], shapes[0], REVERSE_EPOCHS)


@pytest.fixture(scope="session")
def baselines(shapes):
    return {kind: _fit(kind, shapes[0], shapes[1], FORWARD_EPOCHS) for kind in ("ae", "vae")}


# --- one PASS/FAIL line per acceptance criterion ------------------------------------

ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
