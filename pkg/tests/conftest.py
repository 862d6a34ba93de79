import os
from typing import Callable, List

import hypothesis
import numpy as np
import pytest

from src.components.datasets import synth_blobs
from src.components.tensor import Tape, Tensor
from src.models.specs import (
    ArchConfig,
    AttackSection,
    DatasetSource,
    GridAxes,
    GridSpec,
    TrainConfig,
)

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


def finite_difference_check(fn: Callable[[], Tensor], tensors: List[Tensor], h: float = 1e-3,
                            kink_tolerance: float = 1e-3) -> float:
    """
    Largest |analytic - central| / max(1, |analytic|) over every coordinate.

    Coordinates where the forward and backward one-sided slopes differ by more
    than ``kink_tolerance`` (a relu switching inside [x - h, x + h]) are
    skipped. A kink that is not skipped moves the central difference by at
    most half that gap.
    """
    for tensor in tensors:
        tensor.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    analytic = [np.array(t.grad, dtype=np.float64) for t in tensors]

    worst, checked, total = 0.0, 0, 0
    for tensor, grad in zip(tensors, analytic):
        flat = tensor.data.reshape(-1)
        grad = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            up, down = np.float32(original + h), np.float32(original - h)
            flat[i] = up
            f_up = fn().item()
            flat[i] = down
            f_down = fn().item()
            flat[i] = original
            f_mid = fn().item()

            forward = (f_up - f_mid) / (float(up) - float(original))
            backward = (f_mid - f_down) / (float(original) - float(down))
            central = (f_up - f_down) / (float(up) - float(down))
            denominator = max(1.0, abs(grad[i]))
            total += 1
            if abs(forward - backward) > kink_tolerance * denominator:
                continue
            checked += 1
            worst = max(worst, abs(grad[i] - central) / denominator)
    assert checked >= total // 2, f"only {checked} of {total} coordinates were smooth enough to check"
    return worst


@pytest.fixture
def gradcheck():
    return finite_difference_check


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    """Four well separated classes in 8 dimensions."""
    return synth_blobs(num_classes=4, per_class_train=40, per_class_test=10, dim=8, spread=0.05, seed=3)


@pytest.fixture
def make_grid():
    """GridSpec factory for a tiny synthetic grid; keyword overrides replace whole sections."""

    def _make(**overrides) -> GridSpec:
        sections = dict(
            dataset=DatasetSource(kind="synth", num_classes=4, per_class_train=30, per_class_test=10,
                                  dim=8, spread=0.05, seed=0),
            arch=ArchConfig(kind="mlp", hidden=(16,)),
            grid=GridAxes(shared_classes=(1, 2), shared_data_fractions=(0.0, 1.0), repetitions=1, master_seed=7),
            surrogate=TrainConfig(epochs=3, batch_size=16, learning_rate=0.01),
            victim=TrainConfig(epochs=3, batch_size=16, learning_rate=0.01),
            attack=AttackSection(kind="pgd", epsilon=0.3, alpha=0.05, pgd_iterations=5, mask_iterations=3),
        )
        sections.update(overrides)
        return GridSpec(**sections)

    return _make
