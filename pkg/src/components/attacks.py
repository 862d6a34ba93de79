"""
Untargeted L-infinity evasion attacks against a frozen surrogate.

All attacks keep the perturbed input inside the epsilon ball around x and
inside the [0, 1] box. Gradients are taken at the clamped point
clamp(x + delta, 0, 1).
"""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np

from src.components.networks import Model, argmax_rows, forward, logits_of
from src.components.tensor import Tape, Tensor, mul, softmax_cross_entropy
from src.models.specs import AttackConfig
from src.utils.container import ContainerFile
from src.utils.errors import DataFormatError, ShapeError
from src.utils.schema import to_dict
from src.utils.seeding import make_rng, mix_seed

logger = logging.getLogger(__name__)

ATTACK_CHUNK = 256


@dataclass
class LogitMask:
    """Binary keep-vector over the classes (1 = keep)."""
    keep: np.ndarray

    @property
    def num_kept(self) -> int:
        return int(self.keep.sum())


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    delta: np.ndarray
    fooled: np.ndarray  # per sample: surrogate no longer predicts the true label
    attack: str
    config: AttackConfig
    model_id: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.x_adv.shape[0])

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta).max()) if self.delta.size else 0.0

    def save(self, path: Union[str, Path]) -> Tuple[Path, Path]:
        """Tensors into the binary container, config and fooled flags into a JSON sidecar."""
        path = Path(path)
        header = {"kind": "adversarial_batch", "attack": self.attack, "model_id": self.model_id}
        ContainerFile(path).write(header, [("x_adv", self.x_adv), ("delta", self.delta)])
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps({
            "attack": self.attack,
            "model_id": self.model_id,
            "config": to_dict(self.config),
            "fooled": [bool(flag) for flag in self.fooled],
            "metadata": self.metadata,
        }, indent=2, sort_keys=True))
        logger.info(f"Saved adversarial batch of {len(self)} samples to {path}")
        return path, sidecar


def _validate_inputs(model: Model, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.ascontiguousarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
    if tuple(x.shape[1:]) != model.arch.input_shape:
        raise ShapeError(f"input shape {list(x.shape[1:])} does not match architecture {list(model.arch.input_shape)}")
    if y.size and (y.min() < 0 or y.max() >= model.arch.num_classes):
        raise DataFormatError(f"labels must lie in [0, {model.arch.num_classes}) for the attacked model")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DataFormatError("attack inputs must lie in [0, 1]")
    return x, y


def loss_gradient(model: Model, x_adv: np.ndarray, y: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of the (optionally logit-masked) cross-entropy w.r.t. the input."""
    # x_adv is already clamp(x + delta, 0, 1); the clamp counts as identity for the delta gradient
    with Tape() as tape:
        inputs = Tensor(x_adv, requires_grad=True)
        logits = forward(model, inputs)
        if mask is not None:
            logits = mul(logits, Tensor(mask))
        loss = softmax_cross_entropy(logits, y)
        tape.backward(loss)
    return inputs.grad


def _finish(model: Model, x: np.ndarray, y: np.ndarray, x_adv: np.ndarray, attack: str,
            config: AttackConfig) -> AdversarialBatch:
    fooled = argmax_rows(logits_of(model, x_adv)) != y
    return AdversarialBatch(
        x_adv=x_adv,
        delta=x_adv - x,
        fooled=fooled,
        attack=attack,
        config=config,
        model_id=model.fingerprint(),
    )


def fgsm(model: Model, x: np.ndarray, y: np.ndarray, epsilon: float) -> AdversarialBatch:
    """x_adv = clamp(x + eps * sign(grad_x loss), 0, 1)."""
    frozen = model.frozen()
    x, y = _validate_inputs(frozen, x, y)
    eps = np.float32(epsilon)
    x_adv = np.clip(x + eps * np.sign(loss_gradient(frozen, x, y)), 0.0, 1.0).astype(np.float32)
    config = AttackConfig(epsilon=float(epsilon), alpha=float(epsilon) if epsilon > 0 else AttackConfig.alpha,
                          pgd_iterations=1, random_start=False)
    return _finish(model, x, y, x_adv, "fgsm", config)


def sample_masks(labels: np.ndarray, num_classes: int, keep_probability: float, keep_true_class: bool,
                 rng: np.random.Generator) -> np.ndarray:
    """
    One Bernoulli(keep_probability) mask row per label.

    The true label is forced on when ``keep_true_class``; any row keeping fewer
    than two classes is redrawn so the softmax still contrasts classes.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be at least 2, got {num_classes}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows = np.arange(labels.size)
    masks = np.zeros((labels.size, num_classes), dtype=np.float32)
    pending = rows
    while pending.size:
        draw = (rng.random((pending.size, num_classes)) < keep_probability).astype(np.float32)
        if keep_true_class:
            draw[np.arange(pending.size), labels[pending]] = 1.0
        masks[pending] = draw
        pending = pending[draw.sum(axis=1) < 2]
    return masks


def sample_mask(num_classes: int, keep_probability: float, true_label: int, keep_true_class: bool,
                rng: np.random.Generator) -> LogitMask:
    """Single-sample form of ``sample_masks``."""
    return LogitMask(sample_masks(np.array([true_label]), num_classes, keep_probability, keep_true_class, rng)[0])


def _projected_loop(model: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig,
                    masked: bool) -> np.ndarray:
    """
    Shared PGD / masked PGD iteration; returns the final clamped input.

    Each of the N iterations starts from the current delta and averages T
    candidate steps, one per freshly sampled mask. Without masking T is 1 and
    the loop is plain PGD.
    """
    eps = np.float32(config.epsilon)
    alpha = np.float32(config.alpha)
    # one stream for both variants; the random start is drawn before any mask
    rng = make_rng(config.seed, "pgd")
    num_classes = model.arch.num_classes
    mask_iterations = config.mask_iterations if masked else 1

    if config.random_start:
        delta = (rng.uniform(-1.0, 1.0, size=x.shape).astype(np.float32) * eps)
    else:
        delta = np.zeros_like(x)

    for _ in range(config.pgd_iterations):
        x_adv = np.clip(x + delta, 0.0, 1.0)
        total = np.zeros_like(delta)
        for _ in range(mask_iterations):
            mask = None
            if masked:
                mask = sample_masks(y, num_classes, config.mask_keep_probability, config.keep_true_class, rng)
            grad = loss_gradient(model, x_adv, y, mask)
            total += np.clip(delta + alpha * np.sign(grad), -eps, eps)
        delta = total / np.float32(mask_iterations) if mask_iterations > 1 else total

    return np.clip(x + delta, 0.0, 1.0).astype(np.float32)


def pgd(model: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> AdversarialBatch:
    """
    Projected gradient ascent on the untargeted loss.

    Optional random start delta ~ U(-eps, eps), then N steps of
    delta <- clamp(delta + alpha * sign(grad), -eps, eps).
    """
    frozen = model.frozen()
    x, y = _validate_inputs(frozen, x, y)
    return _finish(model, x, y, _projected_loop(frozen, x, y, config, masked=False), "pgd", config)


def masked_pgd(model: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> AdversarialBatch:
    """
    PGD whose every step is the mean of T candidate steps taken under random
    per-sample logit masks (masked logits are zeroed, not removed).
    """
    frozen = model.frozen()
    x, y = _validate_inputs(frozen, x, y)
    return _finish(model, x, y, _projected_loop(frozen, x, y, config, masked=True), "masked_pgd", config)


def mi_fgsm(model: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> AdversarialBatch:
    """
    Momentum iterative FGSM.

    g <- mu * g + grad / ||grad||_1 (per sample), delta <- clamp(delta + alpha * sign(g), -eps, eps).
    Always starts from delta = 0; a sample with an all-zero gradient does not move.
    """
    frozen = model.frozen()
    x, y = _validate_inputs(frozen, x, y)
    eps = np.float32(config.epsilon)
    alpha = np.float32(config.alpha)
    # 64-bit normalization keeps sign(g) == sign(grad) exactly when mu = 0
    momentum = np.zeros(x.shape, dtype=np.float64)
    delta = np.zeros_like(x)
    axes = tuple(range(1, x.ndim))

    for _ in range(config.pgd_iterations):
        grad = loss_gradient(frozen, np.clip(x + delta, 0.0, 1.0), y).astype(np.float64)
        norms = np.abs(grad).sum(axis=axes, keepdims=True)
        normalized = np.divide(grad, norms, out=np.zeros_like(grad), where=norms > 0)
        momentum = config.momentum * momentum + normalized
        delta = np.clip(delta + alpha * np.sign(momentum).astype(np.float32), -eps, eps)

    x_adv = np.clip(x + delta, 0.0, 1.0).astype(np.float32)
    return _finish(model, x, y, x_adv, "mi_fgsm", config)


ATTACKS: Dict[str, Callable[[Model, np.ndarray, np.ndarray, AttackConfig], AdversarialBatch]] = {
    "fgsm": lambda model, x, y, config: fgsm(model, x, y, config.epsilon),
    "pgd": pgd,
    "mi_fgsm": mi_fgsm,
    "masked_pgd": masked_pgd,
}


def run_attack(kind: str, model: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig,
               chunk_size: int = ATTACK_CHUNK) -> AdversarialBatch:
    """
    Attack in chunks and stitch the results together.

    Chunk k runs with a seed derived from (config.seed, k), so results do not
    depend on how many chunks ran before on other threads.
    """
    if kind not in ATTACKS:
        raise ValueError(f"unknown attack {kind!r}; expected one of {sorted(ATTACKS)}")
    attack = ATTACKS[kind]
    parts = []
    for index, start in enumerate(range(0, len(x), chunk_size)):
        chunk_config = _chunk_config(config, index)
        parts.append(attack(model, x[start:start + chunk_size], y[start:start + chunk_size], chunk_config))
    if not parts:
        raise ShapeError("cannot attack an empty batch")

    return AdversarialBatch(
        x_adv=np.concatenate([p.x_adv for p in parts]),
        delta=np.concatenate([p.delta for p in parts]),
        fooled=np.concatenate([p.fooled for p in parts]),
        attack=kind,
        config=config,
        model_id=parts[0].model_id,
        metadata={"chunks": len(parts), "chunk_size": chunk_size},
    )


def _chunk_config(config: AttackConfig, index: int) -> AttackConfig:
    if index == 0:
        return config
    return replace(config, seed=mix_seed(config.seed, "chunk", index))
