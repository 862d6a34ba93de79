import logging
import math
from typing import Dict, List, Tuple

import numpy as np

from src.models.data import ClassAssignment, LabeledDataset, PartitionResult
from src.models.specs import OverlapSpec
from src.utils.errors import PartitionError
from src.utils.seeding import make_rng

logger = logging.getLogger(__name__)


def common_count(p: float, per_model: int) -> int:
    """round(p * per_model) with halves rounded up."""
    return int(math.floor(p * per_model + 0.5))


def assign_classes(universe: Tuple[int, ...], spec: OverlapSpec, rng: np.random.Generator) -> ClassAssignment:
    """
    Shuffle the classes, then take o shared, N/2 - o surrogate-only,
    N/2 - o victim-only; the remaining o classes go unused.
    """
    order = [universe[i] for i in rng.permutation(len(universe))]
    o, exclusive = spec.shared_classes, spec.classes_per_model - spec.shared_classes
    return ClassAssignment(
        shared=tuple(order[:o]),
        surrogate_only=tuple(order[o:o + exclusive]),
        victim_only=tuple(order[o + exclusive:o + 2 * exclusive]),
        unused=tuple(order[o + 2 * exclusive:]),
    )


def partition_overlap(train: LabeledDataset, test: LabeledDataset, spec: OverlapSpec) -> PartitionResult:
    """
    Split a dataset into surrogate and victim training sets for one overlap cell.

    Per shared class with m shuffled samples, each model holds h = floor(m/2);
    the surrogate takes positions [0, h), the victim the first c = round(p*h)
    of those plus the h - c fresh positions [h, 2h - c). Per exclusive class the
    owner takes the first h shuffled samples. The shared test set is every test
    sample of a shared class.

    Raises:
        PartitionError: universe size differs from N, or a class has fewer
            than two training samples
    """
    universe = train.class_universe
    if len(universe) != spec.total_classes:
        raise PartitionError(f"dataset has {len(universe)} classes, overlap spec expects {spec.total_classes}")

    by_class = train.positions_by_class()
    thin = [c for c, positions in by_class.items() if positions.size < 2]
    if thin:
        raise PartitionError(f"classes {thin} have fewer than 2 training samples")

    rng = make_rng(spec.partition_seed, "partition")
    assignment = assign_classes(universe, spec, rng)
    # one shuffle per class in universe order keeps the id sets independent of the assignment
    shuffled = {c: by_class[c][rng.permutation(by_class[c].size)] for c in universe}

    surrogate_positions: Dict[int, np.ndarray] = {}
    victim_positions: Dict[int, np.ndarray] = {}
    common_counts: Dict[int, int] = {}

    for c in assignment.shared:
        positions = shuffled[c]
        half = positions.size // 2
        common = common_count(spec.shared_data_fraction, half)
        surrogate_positions[c] = positions[:half]
        victim_positions[c] = np.concatenate([positions[:common], positions[half:2 * half - common]])
        common_counts[c] = common
    for c in assignment.surrogate_only:
        surrogate_positions[c] = shuffled[c][:shuffled[c].size // 2]
    for c in assignment.victim_only:
        victim_positions[c] = shuffled[c][:shuffled[c].size // 2]

    surrogate_map = {c: i for i, c in enumerate(assignment.surrogate_classes)}
    victim_map = {c: i for i, c in enumerate(assignment.victim_classes)}

    surrogate = _gather(train, surrogate_positions, assignment.surrogate_classes).relabel(surrogate_map)
    victim = _gather(train, victim_positions, assignment.victim_classes).relabel(victim_map)
    shared_test = test.subset(np.flatnonzero(np.isin(test.labels, assignment.shared)))

    if len(surrogate) != len(victim):
        logger.warning(f"Unbalanced classes: surrogate holds {len(surrogate)} samples, victim {len(victim)}")
    logger.info(
        f"Partitioned o={spec.shared_classes}, p={spec.shared_data_fraction}: "
        f"|D_S|={len(surrogate)}, |D_V|={len(victim)}, common={sum(common_counts.values())}, "
        f"shared test={len(shared_test)}"
    )
    return PartitionResult(
        spec=spec,
        surrogate=surrogate,
        victim=victim,
        shared_test=shared_test,
        assignment=assignment,
        surrogate_class_map=surrogate_map,
        victim_class_map=victim_map,
        common_counts=common_counts,
    )


def _gather(train: LabeledDataset, positions: Dict[int, np.ndarray], classes: Tuple[int, ...]) -> LabeledDataset:
    """Concatenate per-class positions in ascending class order."""
    parts: List[np.ndarray] = [positions[c] for c in classes]
    merged = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return train.subset(merged)
