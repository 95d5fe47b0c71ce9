import time

import numpy as np
import pytest
import torch

from tutormotion.diffusion import DenoiserConfig, TrainConfig, train
from tutormotion.synth import MotionSynthSpec, motion_dataset, synth_motion

torch.set_num_threads(1)

TOY_ACTS = ("explain", "neutral")


@pytest.fixture(scope="session")
def toy_data():
    """Training set with mixed-act clips and a held-out set of pure clips."""
    train_c = synth_motion(MotionSynthSpec(seed=1, acts=TOY_ACTS))
    held_c = synth_motion(MotionSynthSpec(seed=2, n_clips=64, mixed_frac=0.0, acts=TOY_ACTS))
    return motion_dataset(train_c), motion_dataset(held_c), held_c


@pytest.fixture(scope="session")
def toy_models(toy_data):
    """Conditioned and unconditioned (gains 0) models trained on the toy task."""
    ds = toy_data[0]
    cfg = TrainConfig(steps=2000, seed=0)
    t0 = time.perf_counter()
    models = {
        "conditioned": train(ds, DenoiserConfig(), cfg),
        "baseline": train(ds, DenoiserConfig(lambda_c=0.0, lambda_f=0.0), cfg),
    }
    models["train_seconds"] = time.perf_counter() - t0
    return models


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criterion lines after the run."""
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
