import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

RESULT_COLUMNS = ["o", "shared_data_fraction", "rep", "clean_acc", "attacked_acc", "success", "whitebox_success"]
SUMMARY_COLUMNS = ["o", "shared_data_fraction", "mean_success", "std_success"]
HISTORY_COLUMNS = ["epoch", "loss", "train_accuracy"]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float


@dataclass
class TrainingHistory:
    """Per-epoch mean loss and running train accuracy."""
    epochs: List[EpochRecord] = field(default_factory=list)

    def append(self, epoch: int, loss: float, train_accuracy: float) -> None:
        self.epochs.append(EpochRecord(epoch, float(loss), float(train_accuracy)))

    def to_frame(self) -> pd.DataFrame:
        rows = [(r.epoch, r.loss, r.train_accuracy) for r in self.epochs]
        return pd.DataFrame(rows, columns=HISTORY_COLUMNS)

    def __len__(self) -> int:
        return len(self.epochs)


@dataclass
class RepRecord:
    """One repetition of one grid cell."""
    o: int
    shared_data_fraction: float
    rep: int
    clean_acc: float
    attacked_acc: float
    success: float
    whitebox_success: float
    surrogate_clean_acc: float = float("nan")
    seed: int = 0

    @classmethod
    def from_accuracies(cls, o: int, p: float, rep: int, clean_acc: float, attacked_acc: float,
                        surrogate_clean_acc: float, surrogate_attacked_acc: float, seed: int) -> "RepRecord":
        """Transfer success is the victim's clean accuracy minus its accuracy under attack."""
        return cls(
            o=o,
            shared_data_fraction=p,
            rep=rep,
            clean_acc=clean_acc,
            attacked_acc=attacked_acc,
            success=clean_acc - attacked_acc,
            whitebox_success=surrogate_clean_acc - surrogate_attacked_acc,
            surrogate_clean_acc=surrogate_clean_acc,
            seed=seed,
        )


@dataclass
class CellResult:
    o: int
    shared_data_fraction: float
    reps: List[RepRecord]
    mean_success: float
    std_success: float

    @classmethod
    def from_reps(cls, o: int, p: float, reps: List[RepRecord]) -> "CellResult":
        reps = sorted(reps, key=lambda r: r.rep)
        successes = [r.success for r in reps]
        return cls(
            o=o,
            shared_data_fraction=p,
            reps=reps,
            mean_success=float(np.mean(successes)),
            std_success=sample_std(successes),
        )


@dataclass
class Correlation:
    """Pearson coefficient; ``defined`` is False when either axis has zero variance."""
    r: Optional[float]
    defined: bool

    def __str__(self) -> str:
        return f"{self.r:.4f}" if self.defined else "undefined"


@dataclass
class GridResult:
    cells: List[CellResult]
    success_vs_classes: Correlation
    success_vs_data: Correlation
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def records(self) -> List[RepRecord]:
        return [rep for cell in self.cells for rep in cell.reps]

    @property
    def shared_classes(self) -> List[int]:
        return sorted({cell.o for cell in self.cells})

    @property
    def shared_data_fractions(self) -> List[float]:
        return sorted({cell.shared_data_fraction for cell in self.cells})

    def cell(self, o: int, p: float) -> CellResult:
        for cell in self.cells:
            if cell.o == o and cell.shared_data_fraction == p:
                return cell
        raise KeyError(f"no cell for o={o}, p={p}")

    def matrix(self, value: str = "mean_success") -> Tuple[np.ndarray, List[int], List[float]]:
        """Heatmap layout of one cell attribute; see ``heatmap_matrix``."""
        return heatmap_matrix(self.cells, value)

    def results_frame(self) -> pd.DataFrame:
        rows = [
            (r.o, r.shared_data_fraction, r.rep, r.clean_acc, r.attacked_acc, r.success, r.whitebox_success)
            for r in sorted(self.records, key=lambda r: (r.o, r.shared_data_fraction, r.rep))
        ]
        return pd.DataFrame(rows, columns=RESULT_COLUMNS)

    def summary_frame(self) -> pd.DataFrame:
        rows = [
            (c.o, c.shared_data_fraction, c.mean_success, c.std_success)
            for c in sorted(self.cells, key=lambda c: (c.o, c.shared_data_fraction))
        ]
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def sample_std(values: List[float]) -> float:
    """Sample (n - 1) standard deviation; a single value has no spread and yields 0."""
    if len(values) < 2:
        return 0.0
    std = float(np.std(np.asarray(values, dtype=np.float64), ddof=1))
    return 0.0 if math.isnan(std) else std


DIFFERENCE_COLUMNS = ["o", "shared_data_fraction", "mean_success_a", "mean_success_b", "difference"]


@dataclass
class CellDifference:
    o: int
    shared_data_fraction: float
    mean_success_a: float
    mean_success_b: float

    @property
    def difference(self) -> float:
        return self.mean_success_a - self.mean_success_b


@dataclass
class GridDifference:
    """Per-cell gap in mean success between two grid runs (a - b)."""
    cells: List[CellDifference]
    difference_vs_classes: Correlation
    difference_vs_data: Correlation

    def matrix(self) -> Tuple[np.ndarray, List[int], List[float]]:
        return heatmap_matrix(self.cells, "difference")

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (c.o, c.shared_data_fraction, c.mean_success_a, c.mean_success_b, c.difference)
            for c in sorted(self.cells, key=lambda c: (c.o, c.shared_data_fraction))
        ]
        return pd.DataFrame(rows, columns=DIFFERENCE_COLUMNS)


def heatmap_matrix(cells: List[Any], value: str) -> Tuple[np.ndarray, List[int], List[float]]:
    """
    Cell values laid out for a heatmap.

    Returns:
        (matrix, row labels, column labels): rows are shared-class counts in
        descending order, columns shared-data fractions in ascending order;
        missing cells are NaN
    """
    rows = sorted({cell.o for cell in cells}, reverse=True)
    cols = sorted({cell.shared_data_fraction for cell in cells})
    matrix = np.full((len(rows), len(cols)), np.nan)
    for cell in cells:
        matrix[rows.index(cell.o), cols.index(cell.shared_data_fraction)] = getattr(cell, value)
    return matrix, rows, cols
