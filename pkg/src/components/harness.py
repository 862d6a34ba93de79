"""
Grid runner: partition, train, attack and transfer for every
(shared classes, shared data, repetition) cell.
"""
import logging
import threading
from collections import defaultdict
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from src import __version__
from src.components.attacks import AdversarialBatch, run_attack
from src.components.datasets import load_source
from src.components.networks import Model, build_model
from src.components.partition import partition_overlap
from src.components.trainer import accuracy_on, train
from src.models.data import LabeledDataset, PartitionResult
from src.models.results import (
    CellDifference,
    CellResult,
    Correlation,
    GridDifference,
    GridResult,
    RepRecord,
    TrainingHistory,
    sample_std,
)
from src.models.specs import ArchSpec, GridSpec, OverlapSpec, TrainConfig
from src.utils.errors import CellError, ConfigError, DataFormatError, ShapeError
from src.utils.schema import to_dict
from src.utils.seeding import make_rng, mix_seed

logger = logging.getLogger(__name__)

Side = Literal["surrogate", "victim"]


@dataclass(frozen=True)
class CellSeeds:
    """Every seed a cell consumes, derived from (master seed, o, p index, rep)."""
    cell: int
    partition: int
    surrogate_init: int
    surrogate_shuffle: int
    victim_init: int
    victim_shuffle: int
    attack: int
    test_cap: int

    @classmethod
    def derive(cls, master_seed: int, o: int, p_index: int, rep: int, twin: bool = False) -> "CellSeeds":
        cell = mix_seed(master_seed, o, p_index, rep)
        surrogate_init = mix_seed(cell, "surrogate-init")
        surrogate_shuffle = mix_seed(cell, "surrogate-shuffle")
        return cls(
            cell=cell,
            partition=mix_seed(cell, "partition"),
            surrogate_init=surrogate_init,
            surrogate_shuffle=surrogate_shuffle,
            victim_init=surrogate_init if twin else mix_seed(cell, "victim-init"),
            victim_shuffle=surrogate_shuffle if twin else mix_seed(cell, "victim-shuffle"),
            attack=mix_seed(cell, "attack"),
            test_cap=mix_seed(cell, "test-cap"),
        )


@dataclass
class CellArtifacts:
    """Intermediate products of one cell, kept for the single-step subcommands."""
    partition: PartitionResult
    surrogate: Model
    victim: Model
    surrogate_history: TrainingHistory
    victim_history: TrainingHistory
    adversarial: AdversarialBatch
    record: RepRecord


class ExperimentRunner:
    """Runs cells of one GridSpec; the loaded dataset is shared read-only between cells."""

    def __init__(self, grid: GridSpec, threads: int = 1, progress: bool = False):
        self.grid = grid
        self.threads = max(1, int(threads))
        self.progress = progress
        self._data: Optional[Tuple[LabeledDataset, LabeledDataset]] = None
        self._data_lock = threading.Lock()

    def datasets(self) -> Tuple[LabeledDataset, LabeledDataset]:
        """Train and test splits, loaded once."""
        with self._data_lock:
            if self._data is None:
                self._data = load_source(self.grid.dataset)
            return self._data

    def p_index(self, p: float) -> int:
        fractions = list(self.grid.grid.shared_data_fractions)
        if p not in fractions:
            raise ConfigError(f"shared-data fraction {p} is not on the grid {fractions}")
        return fractions.index(p)

    def seeds(self, o: int, p: float, rep: int) -> CellSeeds:
        axes = self.grid.grid
        return CellSeeds.derive(axes.master_seed, o, self.p_index(p), rep, twin=axes.twin)

    def partition(self, o: int, p: float, rep: int) -> PartitionResult:
        train_set, test_set = self.datasets()
        spec = OverlapSpec(
            total_classes=len(train_set.class_universe),
            shared_classes=o,
            shared_data_fraction=p,
            partition_seed=self.seeds(o, p, rep).partition,
        )
        return partition_overlap(train_set, test_set, spec)

    def train_side(self, partition: PartitionResult, side: Side, seeds: CellSeeds) -> Tuple[Model, TrainingHistory]:
        """Build and train the surrogate or the victim on its half of the partition."""
        if side == "surrogate":
            dataset, config = partition.surrogate, self.grid.surrogate
            init_seed, shuffle_seed = seeds.surrogate_init, seeds.surrogate_shuffle
        else:
            dataset, config = partition.victim, self.grid.victim
            init_seed, shuffle_seed = seeds.victim_init, seeds.victim_shuffle

        arch = ArchSpec.from_config(self.grid.arch, dataset.input_shape, partition.spec.classes_per_model)
        model = build_model(arch, init_seed)
        return train(model, dataset, self._resolved(config, shuffle_seed))

    def _resolved(self, config: TrainConfig, shuffle_seed: int) -> TrainConfig:
        # hardening epsilon defaults to the attack epsilon
        hardening = config.hardening.resolved(self.grid.attack.epsilon)
        return replace(config, hardening=hardening, shuffle_seed=shuffle_seed)

    def attack_set(self, partition: PartitionResult, seeds: CellSeeds) -> LabeledDataset:
        """The shared-class test set, capped to a seeded prefix when max_test_samples is set."""
        shared_test = partition.shared_test
        if len(shared_test) == 0:
            raise DataFormatError(f"no test samples for the shared classes {list(partition.assignment.shared)}")
        cap = self.grid.grid.max_test_samples
        if cap is not None and len(shared_test) > cap:
            order = make_rng(seeds.test_cap, "test-cap").permutation(len(shared_test))
            shared_test = shared_test.subset(np.sort(order[:cap]))
        return shared_test

    def run_cell_artifacts(self, o: int, p: float, rep: int) -> CellArtifacts:
        """
        Full pipeline for one repetition of one cell.

        The adversarial inputs are crafted once against the surrogate and
        reused unchanged on the victim; the victim is scored through its own
        class map, so non-shared surrogate outputs never matter.
        """
        if o < 1:
            raise ConfigError(f"a cell needs at least one shared class, got o={o}")
        seeds = self.seeds(o, p, rep)
        partition = self.partition(o, p, rep)
        shared_test = self.attack_set(partition, seeds)
        surrogate, surrogate_history = self.train_side(partition, "surrogate", seeds)
        victim, victim_history = self.train_side(partition, "victim", seeds)

        x = shared_test.inputs
        y_surrogate = shared_test.relabel(partition.surrogate_class_map).labels
        y_victim = shared_test.relabel(partition.victim_class_map).labels

        attack_config = replace(self.grid.attack_config, seed=seeds.attack)
        adversarial = run_attack(self.grid.attack_kind, surrogate, x, y_surrogate, attack_config)

        record = RepRecord.from_accuracies(
            o=o,
            p=p,
            rep=rep,
            clean_acc=accuracy_on(victim, x, y_victim),
            attacked_acc=accuracy_on(victim, adversarial.x_adv, y_victim),
            surrogate_clean_acc=accuracy_on(surrogate, x, y_surrogate),
            surrogate_attacked_acc=accuracy_on(surrogate, adversarial.x_adv, y_surrogate),
            seed=seeds.cell,
        )
        logger.info(
            f"Cell o={o} p={p} rep={rep}: clean={record.clean_acc:.4f} attacked={record.attacked_acc:.4f} "
            f"success={record.success:.4f} whitebox={record.whitebox_success:.4f}"
        )
        return CellArtifacts(
            partition=partition,
            surrogate=surrogate,
            victim=victim,
            surrogate_history=surrogate_history,
            victim_history=victim_history,
            adversarial=adversarial,
            record=record,
        )

    def run_cell(self, o: int, p: float, rep: int) -> RepRecord:
        return self.run_cell_artifacts(o, p, rep).record

    def tasks(self) -> List[Tuple[int, float, int]]:
        axes = self.grid.grid
        return [
            (o, p, rep)
            for o in axes.shared_classes
            for p in axes.shared_data_fractions
            for rep in range(axes.repetitions)
        ]

    def run_grid(self) -> GridResult:
        """
        Execute every cell and repetition, up to ``threads`` at a time.

        Results are sorted by (o, p, rep) before aggregation, so the outcome
        does not depend on scheduling.

        Raises:
            CellError: the first failing cell in grid order, wrapping its cause
        """
        tasks = self.tasks()
        self.datasets()
        logger.info(f"Running {len(tasks)} cell repetitions of a {self.grid.attack_kind} grid on {self.threads} threads")

        records: List[RepRecord] = []
        failures: List[Tuple[Tuple[int, float, int], Exception]] = []
        with ThreadPoolExecutor(max_workers=self.threads) as pool, \
                tqdm(total=len(tasks), desc="grid", unit="cell", disable=not self.progress) as bar:
            futures = {pool.submit(self.run_cell, *task): task for task in tasks}
            pending = set(futures)
            while pending:
                done, pending = wait(pending, return_when=FIRST_COMPLETED)
                for future in done:
                    bar.update(1)
                    error = future.exception()
                    if error is None:
                        records.append(future.result())
                    else:
                        failures.append((futures[future], error))
                if failures:
                    for future in pending:
                        future.cancel()
                    break

        if failures:
            (o, p, rep), cause = min(failures, key=lambda failure: failure[0])
            logger.error(f"Grid cell o={o} p={p} rep={rep} failed: {str(cause)}")
            raise CellError(o, p, rep, cause) from cause

        return self._aggregate(records)

    def _aggregate(self, records: List[RepRecord]) -> GridResult:
        grouped: Dict[Tuple[int, float], List[RepRecord]] = defaultdict(list)
        for record in sorted(records, key=lambda r: (r.o, r.shared_data_fraction, r.rep)):
            grouped[(record.o, record.shared_data_fraction)].append(record)
        cells = [CellResult.from_reps(o, p, reps) for (o, p), reps in sorted(grouped.items())]

        result = GridResult(
            cells=cells,
            success_vs_classes=_axis_correlation([c.o for c in cells], [c.mean_success for c in cells]),
            success_vs_data=_axis_correlation([c.shared_data_fraction for c in cells], [c.mean_success for c in cells]),
            provenance={
                "version": __version__,
                "grid_spec": to_dict(self.grid),
                "cell_seeds": [
                    {"o": r.o, "shared_data_fraction": r.shared_data_fraction, "rep": r.rep, "seed": r.seed}
                    for r in sorted(records, key=lambda r: (r.o, r.shared_data_fraction, r.rep))
                ],
            },
        )
        logger.info(f"Grid finished: r(success, o)={result.success_vs_classes}, r(success, p)={result.success_vs_data}")
        return result


def run_cell(grid: GridSpec, o: int, p: float, rep_index: int) -> RepRecord:
    """One repetition of one grid cell, deterministic in (master seed, o, p index, rep)."""
    return ExperimentRunner(grid).run_cell(o, p, rep_index)


def run_grid(grid: GridSpec, threads: int = 1, progress: bool = False) -> GridResult:
    return ExperimentRunner(grid, threads=threads, progress=progress).run_grid()


def pearson(xs: Sequence[float], ys: Sequence[float]) -> Correlation:
    """
    Sample Pearson correlation.

    Returns an undefined Correlation when either sequence has zero variance.

    Raises:
        ShapeError: lengths differ or fewer than two points are given
    """
    if len(xs) != len(ys):
        raise ShapeError(f"pearson needs equal lengths, got {len(xs)} and {len(ys)}")
    if len(xs) < 2:
        raise ShapeError(f"pearson needs at least 2 points, got {len(xs)}")

    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return Correlation(r=None, defined=False)
    r = float(np.dot(dx, dy)) / (float(np.sqrt(sxx)) * float(np.sqrt(syy)))
    return Correlation(r=float(np.clip(r, -1.0, 1.0)), defined=True)


def _axis_correlation(xs: Sequence[float], ys: Sequence[float]) -> Correlation:
    if len(xs) < 2:
        return Correlation(r=None, defined=False)
    return pearson(xs, ys)


def aggregate_variance(cells: Iterable[Union[CellResult, CellDifference]],
                       by: Literal["o", "p"] = "o") -> Dict[Union[int, float], float]:
    """
    Sample standard deviation of cell mean success within each group.

    ``by="o"`` groups cells sharing a shared-class count (spread across p);
    ``by="p"`` groups cells sharing a data fraction (spread across o).
    """
    if by not in ("o", "p"):
        raise ValueError(f"by must be 'o' or 'p', got {by!r}")
    groups: Dict[Union[int, float], List[float]] = defaultdict(list)
    for cell in cells:
        key = cell.o if by == "o" else cell.shared_data_fraction
        value = cell.mean_success if isinstance(cell, CellResult) else cell.difference
        groups[key].append(value)
    return {key: sample_std(values) for key, values in sorted(groups.items())}


def difference(result_a: GridResult, result_b: GridResult) -> GridDifference:
    """
    Per-cell mean success of ``result_a`` minus ``result_b``.

    Raises:
        DataFormatError: the two grids do not cover the same cells
    """
    cells_a = {(c.o, c.shared_data_fraction): c for c in result_a.cells}
    cells_b = {(c.o, c.shared_data_fraction): c for c in result_b.cells}
    if cells_a.keys() != cells_b.keys():
        mismatch = sorted(cells_a.keys() ^ cells_b.keys())
        raise DataFormatError(f"grids cover different cells, e.g. {mismatch[:5]}")

    cells = [
        CellDifference(o, p, cells_a[(o, p)].mean_success, cells_b[(o, p)].mean_success)
        for o, p in sorted(cells_a)
    ]
    return GridDifference(
        cells=cells,
        difference_vs_classes=_axis_correlation([c.o for c in cells], [c.difference for c in cells]),
        difference_vs_data=_axis_correlation([c.shared_data_fraction for c in cells], [c.difference for c in cells]),
    )


def lower_bound_cell(result: GridResult) -> CellResult:
    """The least-overlap cell (fewest shared classes, then smallest data fraction)."""
    if not result.cells:
        raise DataFormatError("grid result holds no cells")
    return min(result.cells, key=lambda c: (c.o, c.shared_data_fraction))
