import warnings

import numpy as np
import pytest

from otalign.datagen import ShiftConfig, generate_shift_benchmark
from otalign.transport import SinkhornConvergenceWarning

# Shift used by the efficacy checks: unadapted target accuracy <= 0.70 with
# a perfectly separable source.
BENCHMARK_SHIFT = dict(shift_rotation_angle=0.5, shift_translation_norm=8.0)


def benchmark(seed, **overrides):
    return generate_shift_benchmark(ShiftConfig(seed=seed, **{**BENCHMARK_SHIFT, **overrides}))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def quiet_sinkhorn():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SinkhornConvergenceWarning)
        yield


@pytest.fixture(scope="session")
def small_benchmark():
    cfg = ShiftConfig(
        num_classes_source=4,
        num_classes_target=3,
        dim=6,
        samples_per_class=20,
        class_separation=6.0,
        shift_rotation_angle=0.4,
        shift_translation_norm=1.0,
        seed=3,
    )
    return generate_shift_benchmark(cfg)
