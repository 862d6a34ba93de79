from dataclasses import dataclass, field, fields, replace
from typing import Dict, Literal, Optional, Tuple

from src.utils.errors import ConfigError, PartitionError

SCHEMA_VERSION = "v1"

ArchKind = Literal["mlp", "cnn"]
AttackKind = Literal["fgsm", "pgd", "mi_fgsm", "masked_pgd"]
HardeningKind = Literal["none", "fast_fgsm"]
DatasetKind = Literal["synth", "idx", "cifar"]


@dataclass(frozen=True)
class ConvBlock:
    """One conv -> relu -> average-pool stage of the small CNN."""
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: int = 2

    def __post_init__(self):
        if self.channels < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0 or self.pool < 1:
            raise ConfigError(f"invalid conv block {self}")


@dataclass(frozen=True)
class ArchConfig:
    """Architecture family as written in a run configuration (shape and classes come from the data)."""
    kind: ArchKind = "mlp"
    hidden: Tuple[int, ...] = (256, 128)
    conv: Tuple[ConvBlock, ...] = (ConvBlock(8), ConvBlock(16))

    def __post_init__(self):
        if any(width < 1 for width in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {list(self.hidden)}")
        if self.kind == "cnn" and not self.conv:
            raise ConfigError("cnn architecture needs at least one conv block")


@dataclass(frozen=True)
class ArchSpec:
    """Complete architecture: family, input shape (without batch) and output width."""
    kind: ArchKind
    input_shape: Tuple[int, ...]
    num_classes: int
    hidden: Tuple[int, ...] = (256, 128)
    conv: Tuple[ConvBlock, ...] = (ConvBlock(8), ConvBlock(16))

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"invalid input shape {list(self.input_shape)}")
        if self.kind == "cnn" and len(self.input_shape) != 3:
            raise ConfigError(f"cnn expects a [channels, height, width] input shape, got {list(self.input_shape)}")

    @classmethod
    def from_config(cls, arch: ArchConfig, input_shape: Tuple[int, ...], num_classes: int) -> "ArchSpec":
        return cls(
            kind=arch.kind,
            input_shape=tuple(int(d) for d in input_shape),
            num_classes=int(num_classes),
            hidden=arch.hidden,
            conv=arch.conv,
        )


@dataclass(frozen=True)
class OverlapSpec:
    """One grid cell's overlap definition: N total classes, o shared classes, fraction p of shared data."""
    total_classes: int
    shared_classes: int
    shared_data_fraction: float
    partition_seed: int = 0

    def __post_init__(self):
        if self.total_classes < 2 or self.total_classes % 2:
            raise PartitionError(f"total class count must be even and at least 2, got {self.total_classes}")
        if not 0 <= self.shared_classes <= self.total_classes // 2:
            raise PartitionError(
                f"shared classes must lie in [0, {self.total_classes // 2}], got {self.shared_classes}"
            )
        if not 0.0 <= self.shared_data_fraction <= 1.0:
            raise PartitionError(f"shared data fraction must lie in [0, 1], got {self.shared_data_fraction}")

    @property
    def classes_per_model(self) -> int:
        return self.total_classes // 2


@dataclass(frozen=True)
class HardeningConfig:
    kind: HardeningKind = "none"
    epsilon: Optional[float] = None  # None: use the attack epsilon
    alpha: Optional[float] = None  # None: 1.25 * epsilon

    def __post_init__(self):
        if self.epsilon is not None and not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"hardening epsilon must lie in [0, 1], got {self.epsilon}")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError(f"hardening alpha must be non-negative, got {self.alpha}")

    @property
    def enabled(self) -> bool:
        return self.kind != "none"

    def resolved(self, attack_epsilon: float) -> "HardeningConfig":
        """Fill the defaults: epsilon from the attack, alpha = 1.25 * epsilon."""
        if not self.enabled:
            return self
        epsilon = attack_epsilon if self.epsilon is None else self.epsilon
        alpha = 1.25 * epsilon if self.alpha is None else self.alpha
        return replace(self, epsilon=epsilon, alpha=alpha)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.0004
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    lr_milestones: Tuple[int, ...] = ()
    lr_gamma: float = 0.2
    hardening: HardeningConfig = field(default_factory=HardeningConfig)
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not all(0.0 <= beta < 1.0 for beta in self.betas):
            raise ConfigError(f"adam betas must lie in [0, 1), got {list(self.betas)}")
        if self.adam_epsilon <= 0:
            raise ConfigError(f"adam_epsilon must be positive, got {self.adam_epsilon}")

    def learning_rate_at(self, epoch: int) -> float:
        """Multi-step decay: multiply by gamma once for every milestone already reached."""
        passed = sum(1 for milestone in self.lr_milestones if epoch >= milestone)
        return self.learning_rate * (self.lr_gamma ** passed)


# Per-dataset protocol of the full-scale study; desk defaults stay at TrainConfig().
TRAIN_PRESETS: Dict[str, TrainConfig] = {
    "fashion-mnist": TrainConfig(epochs=10, batch_size=12),
    "cifar-10": TrainConfig(epochs=20, batch_size=12),
    "cifar-100": TrainConfig(epochs=200, batch_size=128, lr_milestones=(60, 120, 160), lr_gamma=0.2),
    "mini-imagenet": TrainConfig(epochs=200, batch_size=128, lr_milestones=(60, 120, 160), lr_gamma=0.2),
}


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.3
    alpha: float = 0.01
    pgd_iterations: int = 250
    mask_iterations: int = 100
    mask_keep_probability: float = 0.5
    keep_true_class: bool = True
    momentum: float = 1.0
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        # epsilon = 0 is the degenerate no-op attack; the step size is irrelevant there
        if self.epsilon > 0 and not 0.0 < self.alpha <= self.epsilon:
            raise ConfigError(f"alpha must lie in (0, epsilon={self.epsilon}], got {self.alpha}")
        if self.pgd_iterations < 1:
            raise ConfigError(f"pgd_iterations must be at least 1, got {self.pgd_iterations}")
        if self.mask_iterations < 1:
            raise ConfigError(f"mask_iterations must be at least 1, got {self.mask_iterations}")
        if not 0.0 < self.mask_keep_probability <= 1.0:
            raise ConfigError(f"mask_keep_probability must lie in (0, 1], got {self.mask_keep_probability}")
        if self.momentum < 0:
            raise ConfigError(f"momentum must be non-negative, got {self.momentum}")


@dataclass(frozen=True)
class AttackSection(AttackConfig):
    """The ``attack`` block of a run configuration: an AttackConfig plus the attack kind."""
    kind: AttackKind = "pgd"

    def config(self) -> AttackConfig:
        values = {f.name: getattr(self, f.name) for f in fields(AttackConfig)}
        return AttackConfig(**values)


@dataclass(frozen=True)
class DatasetSource:
    kind: DatasetKind = "synth"
    # synth
    num_classes: int = 10
    per_class_train: int = 100
    per_class_test: int = 50
    dim: int = 64
    spread: float = 0.05
    seed: int = 0
    # idx
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    # cifar
    train_files: Tuple[str, ...] = ()
    test_files: Tuple[str, ...] = ()
    fine_labels: Optional[bool] = None

    def __post_init__(self):
        if self.kind == "synth":
            if self.num_classes < 2 or self.dim < 2:
                raise ConfigError("synth dataset needs num_classes >= 2 and dim >= 2")
            if self.per_class_train < 1 or self.per_class_test < 0 or self.spread < 0:
                raise ConfigError("synth dataset needs positive per-class counts and non-negative spread")
        elif self.kind == "idx":
            missing = [name for name in ("train_images", "train_labels", "test_images", "test_labels")
                       if getattr(self, name) is None]
            if missing:
                raise ConfigError(f"idx dataset is missing {', '.join(missing)}")
        elif self.kind == "cifar":
            if not self.train_files or not self.test_files:
                raise ConfigError("cifar dataset needs train_files and test_files")


@dataclass(frozen=True)
class GridAxes:
    shared_classes: Tuple[int, ...] = (1, 2, 3, 4, 5)
    shared_data_fractions: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    repetitions: int = 1
    master_seed: int = 0
    twin: bool = False  # surrogate and victim share init/shuffle seeds
    max_test_samples: Optional[int] = None

    def __post_init__(self):
        if not self.shared_classes or not self.shared_data_fractions:
            raise ConfigError("grid needs at least one shared-class count and one shared-data fraction")
        if any(o < 1 for o in self.shared_classes):
            raise ConfigError(f"grid shared-class counts must all be >= 1, got {list(self.shared_classes)}")
        if any(not 0.0 <= p <= 1.0 for p in self.shared_data_fractions):
            raise ConfigError(f"shared-data fractions must lie in [0, 1], got {list(self.shared_data_fractions)}")
        if self.repetitions < 1:
            raise ConfigError(f"repetitions must be at least 1, got {self.repetitions}")
        if self.max_test_samples is not None and self.max_test_samples < 1:
            raise ConfigError(f"max_test_samples must be positive, got {self.max_test_samples}")


@dataclass(frozen=True)
class GridSpec:
    """Everything a grid run depends on; the JSON run configuration maps onto it one to one."""
    version: str = SCHEMA_VERSION
    dataset: DatasetSource = field(default_factory=DatasetSource)
    arch: ArchConfig = field(default_factory=ArchConfig)
    grid: GridAxes = field(default_factory=GridAxes)
    surrogate: TrainConfig = field(default_factory=TrainConfig)
    victim: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSection = field(default_factory=AttackSection)

    def __post_init__(self):
        if self.version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {self.version!r}, expected {SCHEMA_VERSION!r}")
        if self.dataset.kind == "synth":
            half = self.dataset.num_classes // 2
            too_many = [o for o in self.grid.shared_classes if o > half]
            if too_many:
                raise ConfigError(f"shared-class counts {too_many} exceed N/2 = {half}")

    @property
    def attack_kind(self) -> str:
        return self.attack.kind

    @property
    def attack_config(self) -> AttackConfig:
        return self.attack.config()
