from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from src.models.specs import OverlapSpec
from src.utils.errors import DataFormatError

Split = Literal["train", "test"]


@dataclass
class LabeledDataset:
    """
    Inputs in [0, 1] with integer labels drawn from a known class universe.

    ``sample_ids`` records the position of every sample in the dataset it was
    drawn from, so subsets stay auditable.
    """
    inputs: np.ndarray
    labels: np.ndarray
    class_universe: Tuple[int, ...]
    split: Split = "train"
    sample_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.class_universe = tuple(sorted(int(c) for c in self.class_universe))
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels), dtype=np.int64)
        else:
            self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64).reshape(-1)

        if self.inputs.shape[0] != self.labels.shape[0] or self.sample_ids.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"dataset has {self.inputs.shape[0]} inputs, {self.labels.shape[0]} labels "
                f"and {self.sample_ids.shape[0]} sample ids"
            )
        if self.labels.size and not np.isin(self.labels, self.class_universe).all():
            stray = sorted(set(self.labels.tolist()) - set(self.class_universe))
            raise DataFormatError(f"labels {stray[:5]} are not in the class universe")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise DataFormatError("dataset inputs must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    @property
    def num_classes(self) -> int:
        return len(self.class_universe)

    def subset(self, positions: Sequence[int]) -> "LabeledDataset":
        """Samples at the given positions, keeping their original sample ids."""
        positions = np.asarray(positions, dtype=np.int64)
        return LabeledDataset(
            inputs=self.inputs[positions],
            labels=self.labels[positions],
            class_universe=self.class_universe,
            split=self.split,
            sample_ids=self.sample_ids[positions],
        )

    def relabel(self, class_map: Dict[int, int]) -> "LabeledDataset":
        """Map labels into a model's dense index space; every label must be mapped."""
        unmapped = sorted(set(self.labels.tolist()) - set(class_map))
        if unmapped:
            raise DataFormatError(f"labels {unmapped[:5]} have no entry in the class map")
        lookup = np.vectorize(class_map.__getitem__, otypes=[np.int64])
        labels = lookup(self.labels) if len(self) else self.labels.copy()
        return LabeledDataset(
            inputs=self.inputs,
            labels=labels,
            class_universe=tuple(sorted(set(class_map.values()))),
            split=self.split,
            sample_ids=self.sample_ids,
        )

    def positions_by_class(self) -> Dict[int, np.ndarray]:
        """Positions of each universe class in dataset order."""
        return {c: np.flatnonzero(self.labels == c) for c in self.class_universe}


@dataclass
class ClassAssignment:
    shared: Tuple[int, ...]
    surrogate_only: Tuple[int, ...]
    victim_only: Tuple[int, ...]
    unused: Tuple[int, ...]

    @property
    def surrogate_classes(self) -> Tuple[int, ...]:
        return tuple(sorted(self.shared + self.surrogate_only))

    @property
    def victim_classes(self) -> Tuple[int, ...]:
        return tuple(sorted(self.shared + self.victim_only))


@dataclass
class PartitionResult:
    """
    Surrogate and victim training sets for one overlap cell plus the shared test set.

    ``surrogate`` and ``victim`` carry labels already re-indexed to their
    model's dense [0, N/2) space; ``shared_test`` keeps the original labels and
    is evaluated through ``surrogate_class_map`` / ``victim_class_map``.
    """
    spec: OverlapSpec
    surrogate: LabeledDataset
    victim: LabeledDataset
    shared_test: LabeledDataset
    assignment: ClassAssignment
    surrogate_class_map: Dict[int, int]
    victim_class_map: Dict[int, int]
    common_counts: Dict[int, int] = field(default_factory=dict)

    @property
    def surrogate_ids(self) -> np.ndarray:
        return self.surrogate.sample_ids

    @property
    def victim_ids(self) -> np.ndarray:
        return self.victim.sample_ids

    @property
    def evaluable(self) -> bool:
        """Transfer success is only defined when shared test samples exist."""
        return len(self.shared_test) > 0

    def to_audit(self) -> Dict[str, Any]:
        """JSON-ready audit record of class assignments and exact sample ids."""
        def _ids(values: np.ndarray) -> List[int]:
            return [int(v) for v in values]

        return {
            "spec": {
                "total_classes": self.spec.total_classes,
                "shared_classes": self.spec.shared_classes,
                "shared_data_fraction": self.spec.shared_data_fraction,
                "partition_seed": self.spec.partition_seed,
            },
            "classes": {
                "shared": list(self.assignment.shared),
                "surrogate_only": list(self.assignment.surrogate_only),
                "victim_only": list(self.assignment.victim_only),
                "unused": list(self.assignment.unused),
            },
            "class_maps": {
                "surrogate": {str(k): v for k, v in sorted(self.surrogate_class_map.items())},
                "victim": {str(k): v for k, v in sorted(self.victim_class_map.items())},
            },
            "common_counts": {str(k): v for k, v in sorted(self.common_counts.items())},
            "sizes": {
                "surrogate": len(self.surrogate),
                "victim": len(self.victim),
                "common": int(np.intersect1d(self.surrogate_ids, self.victim_ids).size),
                "shared_test": len(self.shared_test),
            },
            "sample_ids": {
                "surrogate": _ids(self.surrogate_ids),
                "victim": _ids(self.victim_ids),
                "shared_test": _ids(self.shared_test.sample_ids),
            },
        }
