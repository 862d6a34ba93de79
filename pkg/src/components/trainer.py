import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.components.networks import Model, argmax_rows, forward, logits_of
from src.components.tensor import Tape, Tensor, softmax_cross_entropy
from src.models.data import LabeledDataset
from src.models.results import TrainingHistory
from src.models.specs import HardeningConfig, TrainConfig
from src.utils.errors import DataFormatError, TrainingError
from src.utils.seeding import make_rng

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Adam first/second moment buffers keyed by parameter name, plus the step counter."""
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_model(cls, model: Model) -> "OptimizerState":
        return cls(
            first_moment={name: np.zeros_like(p.data) for name, p in model.named_parameters()},
            second_moment={name: np.zeros_like(p.data) for name, p in model.named_parameters()},
        )


def adam_step(params: List[Tensor], grads: List[Optional[np.ndarray]], state: OptimizerState,
              config: TrainConfig, learning_rate: Optional[float] = None) -> OptimizerState:
    """
    One bias-corrected Adam update, applied in place to the parameter buffers.

    A missing gradient counts as zero: moments still decay and the step
    counter still advances.

    Raises:
        TrainingError: a gradient contains NaN or Inf (names the parameter)
    """
    lr = config.learning_rate if learning_rate is None else learning_rate
    beta1, beta2 = config.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step

    for param, grad in zip(params, grads):
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise TrainingError(f"gradient for {param.name} has shape {list(grad.shape)}, expected {list(param.shape)}")
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for parameter {param.name}")

        m = state.first_moment.setdefault(param.name, np.zeros_like(param.data))
        v = state.second_moment.setdefault(param.name, np.zeros_like(param.data))
        m *= np.float32(beta1)
        m += np.float32(1.0 - beta1) * grad
        v *= np.float32(beta2)
        v += np.float32(1.0 - beta2) * grad * grad

        m_hat = m / np.float32(correction1)
        v_hat = v / np.float32(correction2)
        update = np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(config.adam_epsilon))
        param.data = (param.data - update).astype(np.float32)
    return state


def _check_labels(model: Model, dataset: LabeledDataset) -> None:
    if len(dataset) == 0:
        raise DataFormatError("cannot train on an empty dataset")
    num_classes = model.arch.num_classes
    if dataset.labels.min() < 0 or dataset.labels.max() >= num_classes:
        raise DataFormatError(f"labels must lie in [0, {num_classes}) for this model")


def _fast_fgsm_batch(model: Model, inputs: np.ndarray, labels: np.ndarray, hardening: HardeningConfig,
                     rng: np.random.Generator) -> np.ndarray:
    """Randomly initialized single-step FGSM, projected to the epsilon ball and the [0, 1] box."""
    epsilon = np.float32(hardening.epsilon)
    alpha = np.float32(hardening.alpha)
    delta = rng.uniform(-1.0, 1.0, size=inputs.shape).astype(np.float32) * epsilon

    with Tape() as tape:
        x = Tensor(np.clip(inputs + delta, 0.0, 1.0), requires_grad=True)
        loss = softmax_cross_entropy(forward(model.frozen(), x), labels)
        tape.backward(loss)

    delta = np.clip(delta + alpha * np.sign(x.grad), -epsilon, epsilon)
    return np.clip(inputs + delta, 0.0, 1.0).astype(np.float32)


def _fit(model: Model, dataset: LabeledDataset, config: TrainConfig,
         hardening: Optional[HardeningConfig]) -> Tuple[Model, TrainingHistory]:
    _check_labels(model, dataset)
    trained = model.copy()
    history = TrainingHistory()
    if config.epochs == 0:
        return trained, history

    shuffle_rng = make_rng(config.shuffle_seed, "shuffle")
    # separate stream so hardening never shifts the batch order
    delta_rng = make_rng(config.shuffle_seed, "fast-fgsm")
    state = OptimizerState.for_model(trained)
    params = trained.params
    n = len(dataset)

    for epoch in range(config.epochs):
        lr = config.learning_rate_at(epoch)
        order = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0

        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            inputs, labels = dataset.inputs[batch], dataset.labels[batch]
            if hardening is not None:
                inputs = _fast_fgsm_batch(trained, inputs, labels, hardening, delta_rng)

            trained.zero_grad()
            with Tape() as tape:
                logits = forward(trained, Tensor(inputs))
                loss = softmax_cross_entropy(logits, labels)
                tape.backward(loss)
            adam_step(params, [p.grad for p in params], state, config, learning_rate=lr)

            loss_sum += loss.item() * len(batch)
            correct += int((argmax_rows(logits.data) == labels).sum())

        if not np.isfinite(loss_sum):
            raise TrainingError(f"training diverged in epoch {epoch}")
        history.append(epoch, loss_sum / n, correct / n)
        logger.debug(f"epoch {epoch}: loss={loss_sum / n:.4f} train_accuracy={correct / n:.4f} lr={lr:g}")

    trained.zero_grad()
    last = history.epochs[-1]
    logger.info(f"Trained {trained.arch.kind} for {config.epochs} epochs: loss={last.loss:.4f}, accuracy={last.train_accuracy:.4f}")
    return trained, history


def train(model: Model, dataset: LabeledDataset, config: TrainConfig) -> Tuple[Model, TrainingHistory]:
    """
    Train a copy of ``model`` with Adam; the input model is left untouched.

    Batches come from a seeded shuffle each epoch, so the result is a pure
    function of (initial parameters, dataset, config). A config that enables
    hardening is routed to ``train_hardened``.
    """
    if config.hardening.enabled:
        return train_hardened(model, dataset, config)
    return _fit(model, dataset, config, hardening=None)


def train_hardened(model: Model, dataset: LabeledDataset, config: TrainConfig,
                   attack_epsilon: Optional[float] = None) -> Tuple[Model, TrainingHistory]:
    """
    Adversarially hardened training with randomly initialized fast FGSM.

    Per batch: delta ~ U(-eps, eps), one signed step of size alpha, projection
    back to the eps ball, clamp to [0, 1]; the parameter update is computed on
    the perturbed batch only.
    """
    if not config.hardening.enabled:
        raise ValueError("train_hardened needs a fast_fgsm hardening config")
    if config.hardening.epsilon is None and attack_epsilon is None:
        raise ValueError("hardening epsilon is unset and no attack epsilon was given")
    hardening = config.hardening.resolved(attack_epsilon if attack_epsilon is not None else 0.0)
    return _fit(model, dataset, config, hardening=hardening)


def evaluate(model: Model, dataset: LabeledDataset, class_map: Optional[Dict[int, int]] = None) -> float:
    """
    Fraction of samples whose prediction equals the mapped label.

    Raises:
        DataFormatError: empty dataset, or a label missing from ``class_map``
    """
    if len(dataset) == 0:
        raise DataFormatError("cannot evaluate on an empty dataset")
    mapped = dataset.relabel(class_map) if class_map is not None else dataset
    predictions = argmax_rows(logits_of(model, mapped.inputs))
    return float(np.mean(predictions == mapped.labels))


def accuracy_on(model: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy on raw arrays whose labels are already in the model's index space."""
    if len(labels) == 0:
        raise DataFormatError("cannot evaluate on an empty dataset")
    return float(np.mean(argmax_rows(logits_of(model, inputs)) == labels))
