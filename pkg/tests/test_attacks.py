import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.components.attacks import (
    fgsm,
    masked_pgd,
    mi_fgsm,
    pgd,
    run_attack,
    sample_mask,
    sample_masks,
)
from src.components.datasets import synth_blobs
from src.components.networks import build_model, forward, predict
from src.components.tensor import Tensor, softmax_cross_entropy
from src.components.trainer import accuracy_on, train
from src.models.specs import ArchSpec, AttackConfig, TrainConfig
from src.utils.container import ContainerFile
from src.utils.errors import DataFormatError, ShapeError
from src.utils.seeding import make_rng


@pytest.fixture(scope="module")
def victim_setup():
    train_set, test_set = synth_blobs(num_classes=4, per_class_train=40, per_class_test=10, dim=8, spread=0.05, seed=3)
    arch = ArchSpec(kind="mlp", input_shape=(8,), num_classes=4, hidden=(16,))
    model, _ = train(build_model(arch, 0), train_set, TrainConfig(epochs=10, batch_size=16, learning_rate=0.01))
    return model, test_set.inputs, test_set.labels


def within_budget(batch, x, epsilon):
    assert np.all(np.abs(batch.x_adv - x) <= np.float32(epsilon) + 1e-6)
    assert batch.x_adv.min() >= 0.0 and batch.x_adv.max() <= 1.0


def surrogate_loss(model, x, y):
    return softmax_cross_entropy(forward(model.frozen(), Tensor(x)), y).item()


class TestProjection:
    @pytest.mark.parametrize("kind", ["fgsm", "pgd", "mi_fgsm", "masked_pgd"])
    def test_stays_in_the_epsilon_ball_and_unit_box(self, victim_setup, kind):
        model, x, y = victim_setup
        config = AttackConfig(epsilon=0.2, alpha=0.05, pgd_iterations=6, mask_iterations=3, seed=1)
        batch = run_attack(kind, model, x, y, config)
        within_budget(batch, x, 0.2)
        assert batch.attack == kind

    @pytest.mark.parametrize("kind", ["fgsm", "pgd", "mi_fgsm", "masked_pgd"])
    def test_zero_epsilon_is_a_no_op(self, victim_setup, kind):
        model, x, y = victim_setup
        config = AttackConfig(epsilon=0.0, alpha=0.01, pgd_iterations=3, mask_iterations=2)
        batch = run_attack(kind, model, x, y, config)
        np.testing.assert_array_equal(batch.x_adv, x)
        assert batch.linf == 0.0

    def test_pgd_lowers_surrogate_accuracy(self, victim_setup):
        model, x, y = victim_setup
        clean = accuracy_on(model, x, y)
        batch = pgd(model, x, y, AttackConfig(epsilon=0.3, alpha=0.02, pgd_iterations=30))
        assert accuracy_on(model, batch.x_adv, y) < clean

    @pytest.mark.parametrize("epsilon", [0.05, 0.1, 0.3])
    def test_pgd_raises_the_loss_from_a_zero_start(self, victim_setup, epsilon):
        model, x, y = victim_setup
        batch = pgd(model, x, y, AttackConfig(epsilon=epsilon, alpha=0.01, pgd_iterations=20, random_start=False))
        assert surrogate_loss(model, batch.x_adv, y) >= surrogate_loss(model, x, y)

    def test_fooled_flags_follow_predictions(self, victim_setup):
        model, x, y = victim_setup
        batch = pgd(model, x, y, AttackConfig(epsilon=0.1, alpha=0.02, pgd_iterations=5))
        np.testing.assert_array_equal(batch.fooled, predict(model, batch.x_adv) != y)


class TestDegenerateEquivalences:
    @pytest.mark.parametrize("random_start", [False, True])
    def test_masked_pgd_with_full_masks_is_pgd(self, victim_setup, random_start):
        model, x, y = victim_setup
        config = AttackConfig(epsilon=0.3, alpha=0.03, pgd_iterations=8, mask_iterations=1,
                              mask_keep_probability=1.0, random_start=random_start, seed=4)
        np.testing.assert_array_equal(masked_pgd(model, x, y, config).x_adv, pgd(model, x, y, config).x_adv)

    def test_single_step_pgd_is_fgsm(self, victim_setup):
        model, x, y = victim_setup
        config = AttackConfig(epsilon=0.25, alpha=0.25, pgd_iterations=1, random_start=False)
        np.testing.assert_array_equal(pgd(model, x, y, config).x_adv, fgsm(model, x, y, 0.25).x_adv)

    def test_mi_fgsm_without_momentum_is_pgd(self, victim_setup):
        model, x, y = victim_setup
        config = AttackConfig(epsilon=0.3, alpha=0.04, pgd_iterations=10, momentum=0.0, random_start=False)
        np.testing.assert_array_equal(mi_fgsm(model, x, y, config).x_adv, pgd(model, x, y, config).x_adv)


class TestMasks:
    def test_true_class_is_kept(self):
        labels = np.array([0, 3, 5, 5, 1])
        masks = sample_masks(labels, 6, 0.3, True, make_rng(0))
        assert np.all(masks[np.arange(5), labels] == 1.0)

    def test_full_keep_probability(self):
        masks = sample_masks(np.array([1, 2]), 4, 1.0, True, make_rng(0))
        np.testing.assert_array_equal(masks, np.ones((2, 4)))

    @given(p=st.floats(0.01, 1.0), keep_true=st.booleans(), seed=st.integers(0, 1000))
    def test_at_least_two_classes_survive(self, p, keep_true, seed):
        masks = sample_masks(np.arange(8) % 5, 5, p, keep_true, make_rng(seed))
        assert set(np.unique(masks)) <= {0.0, 1.0}
        assert np.all(masks.sum(axis=1) >= 2)

    def test_single_mask(self):
        mask = sample_mask(10, 0.5, true_label=7, keep_true_class=True, rng=make_rng(3))
        assert mask.keep[7] == 1.0
        assert mask.num_kept >= 2

    def test_masks_are_reproducible(self):
        a = sample_masks(np.arange(4), 6, 0.5, True, make_rng(9, "pgd"))
        b = sample_masks(np.arange(4), 6, 0.5, True, make_rng(9, "pgd"))
        np.testing.assert_array_equal(a, b)

    def test_keep_rate_of_the_other_classes(self):
        labels = np.arange(100_000) % 10
        masks = sample_masks(labels, 10, 0.5, True, make_rng(21, "mask"))
        others = np.ones_like(masks, dtype=bool)
        others[np.arange(labels.size), labels] = False
        assert masks[others].mean() == pytest.approx(0.5, abs=0.01)


class TestRunAttack:
    def test_chunking_barely_changes_deterministic_attacks(self, victim_setup):
        model, x, y = victim_setup
        config = AttackConfig(epsilon=0.2, alpha=0.05, pgd_iterations=4, random_start=False)
        whole = run_attack("pgd", model, x, y, config)
        chunked = run_attack("pgd", model, x, y, config, chunk_size=7)
        # the batch mean rescales gradients, so only a rare near-zero component may flip sign
        assert np.mean(whole.x_adv != chunked.x_adv) < 0.01
        assert chunked.metadata["chunks"] == 6

    def test_seeded_attacks_are_reproducible(self, victim_setup):
        model, x, y = victim_setup
        config = AttackConfig(epsilon=0.2, alpha=0.05, pgd_iterations=4, mask_iterations=3, seed=12)
        a = run_attack("masked_pgd", model, x, y, config)
        b = run_attack("masked_pgd", model, x, y, config)
        np.testing.assert_array_equal(a.x_adv, b.x_adv)

    def test_unknown_attack(self, victim_setup):
        model, x, y = victim_setup
        with pytest.raises(ValueError):
            run_attack("cw", model, x, y, AttackConfig())

    def test_input_validation(self, victim_setup):
        model, x, y = victim_setup
        with pytest.raises(ShapeError):
            pgd(model, x[:, :4], y, AttackConfig(pgd_iterations=1))
        with pytest.raises(DataFormatError):
            pgd(model, x, np.full_like(y, 9), AttackConfig(pgd_iterations=1))

    def test_model_is_not_modified(self, victim_setup):
        model, x, y = victim_setup
        before = model.fingerprint()
        masked_pgd(model, x, y, AttackConfig(epsilon=0.1, alpha=0.05, pgd_iterations=2, mask_iterations=2))
        assert model.fingerprint() == before

    def test_save_writes_container_and_sidecar(self, victim_setup, tmp_path):
        model, x, y = victim_setup
        batch = fgsm(model, x, y, 0.1)
        tensors_path, sidecar_path = batch.save(tmp_path / "adv.ovlb")
        header, tensors = ContainerFile(tensors_path).read()
        assert header["model_id"] == model.fingerprint()
        assert [name for name, _ in tensors] == ["x_adv", "delta"]
        np.testing.assert_array_equal(tensors[0][1], batch.x_adv)
        sidecar = json.loads(sidecar_path.read_text())
        assert sidecar["attack"] == "fgsm"
        assert len(sidecar["fooled"]) == len(x)


@pytest.mark.slow
def test_whitebox_pgd_breaks_a_trained_mlp():
    train_set, test_set = synth_blobs(num_classes=10, per_class_train=100, per_class_test=20, dim=64,
                                      spread=0.05, seed=0)
    arch = ArchSpec(kind="mlp", input_shape=(64,), num_classes=10, hidden=(256, 128))
    model, _ = train(build_model(arch, 0), train_set, TrainConfig(epochs=10, batch_size=64, learning_rate=0.01))
    assert accuracy_on(model, test_set.inputs, test_set.labels) > 0.9
    batch = run_attack("pgd", model, test_set.inputs, test_set.labels,
                       AttackConfig(epsilon=0.3, alpha=0.01, pgd_iterations=100))
    assert accuracy_on(model, batch.x_adv, test_set.labels) < 0.05
