"""
Result files: the JSON bundle, results/summary CSVs and SVG heatmaps.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.models.results import GridDifference, GridResult
from src.utils.errors import ConfigError, DataFormatError, ShapeError, UsageError
from src.utils.schema import from_dict, to_dict

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

BUNDLE_FORMAT = "overlap-bench-bundle"
BUNDLE_FORMAT_VERSION = "1"

Ramp = Tuple[str, str]
SUCCESS_RAMP: Ramp = ("#ffffff", "#ff0000")
STD_RAMP: Ramp = ("#ffffff", "#0000ff")
DIFFERENCE_RAMP: Ramp = ("#ffffff", "#008000")

CELL_SIZE = 60
MARGIN_LEFT = 90
MARGIN_TOP = 50
MARGIN_RIGHT = 20
MARGIN_BOTTOM = 70


@dataclass
class HeatmapSpec:
    """
    A value matrix plus everything needed to draw it.

    Rows are shared-class counts (descending), columns shared-data fractions
    (ascending). ``value_range`` fixes the color scale; None uses the
    matrix minimum and maximum.
    """
    matrix: np.ndarray
    row_labels: Sequence[Union[int, float, str]]
    col_labels: Sequence[Union[int, float, str]]
    ramp: Ramp = SUCCESS_RAMP
    value_range: Optional[Tuple[float, float]] = None
    title: str = ""
    x_label: str = "shared data fraction"
    y_label: str = "shared classes"
    annotate: bool = True

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.size == 0:
            raise ShapeError(f"heatmap needs a non-empty 2-D matrix, got shape {list(self.matrix.shape)}")
        if self.matrix.shape != (len(self.row_labels), len(self.col_labels)):
            raise ShapeError(
                f"matrix shape {list(self.matrix.shape)} does not match "
                f"{len(self.row_labels)} row and {len(self.col_labels)} column labels"
            )
        if not np.all(np.isfinite(self.matrix)):
            raise DataFormatError("heatmap values must be finite (is the grid incomplete?)")
        for color in self.ramp:
            _parse_color(color)

    def bounds(self) -> Tuple[float, float]:
        if self.value_range is not None:
            return float(self.value_range[0]), float(self.value_range[1])
        return float(self.matrix.min()), float(self.matrix.max())


def _parse_color(color: str) -> Tuple[int, int, int]:
    if len(color) != 7 or not color.startswith("#"):
        raise ValueError(f"colors must be #rrggbb, got {color!r}")
    return int(color[1:3], 16), int(color[3:5], 16), int(color[5:7], 16)


def ramp_color(ramp: Ramp, t: float) -> str:
    """Linear interpolation between the ramp endpoints, t clipped to [0, 1]."""
    t = min(1.0, max(0.0, t))
    low, high = _parse_color(ramp[0]), _parse_color(ramp[1])
    channels = [int(math.floor(a + t * (b - a) + 0.5)) for a, b in zip(low, high)]
    return "#{:02x}{:02x}{:02x}".format(*channels)


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _label(value: Union[int, float, str]) -> str:
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def render_heatmap(spec: HeatmapSpec) -> str:
    """SVG document for a heatmap; identical specs render to identical text."""
    rows, cols = spec.matrix.shape
    width = MARGIN_LEFT + cols * CELL_SIZE + MARGIN_RIGHT
    height = MARGIN_TOP + rows * CELL_SIZE + MARGIN_BOTTOM
    low, high = spec.bounds()
    span = high - low

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if spec.title:
        parts.append(f'<text x="{width // 2}" y="24" text-anchor="middle" font-size="14">{_escape(spec.title)}</text>')

    for i in range(rows):
        for j in range(cols):
            value = float(spec.matrix[i, j])
            # a constant matrix has no scale; every cell takes the midpoint color
            t = 0.5 if span <= 0 else (value - low) / span
            x = MARGIN_LEFT + j * CELL_SIZE
            y = MARGIN_TOP + i * CELL_SIZE
            parts.append(
                f'<rect x="{x}" y="{y}" width="{CELL_SIZE}" height="{CELL_SIZE}" '
                f'fill="{ramp_color(spec.ramp, t)}" stroke="#cccccc" stroke-width="1"/>'
            )
            if spec.annotate:
                parts.append(
                    f'<text x="{x + CELL_SIZE // 2}" y="{y + CELL_SIZE // 2 + 4}" text-anchor="middle" '
                    f'font-size="12">{value:.2f}</text>'
                )

    grid_bottom = MARGIN_TOP + rows * CELL_SIZE
    for j, label in enumerate(spec.col_labels):
        x = MARGIN_LEFT + j * CELL_SIZE + CELL_SIZE // 2
        parts.append(f'<text x="{x}" y="{grid_bottom + 18}" text-anchor="middle" font-size="11">{_escape(_label(label))}</text>')
    for i, label in enumerate(spec.row_labels):
        y = MARGIN_TOP + i * CELL_SIZE + CELL_SIZE // 2 + 4
        parts.append(f'<text x="{MARGIN_LEFT - 8}" y="{y}" text-anchor="end" font-size="11">{_escape(_label(label))}</text>')

    parts.append(
        f'<text x="{MARGIN_LEFT + cols * CELL_SIZE // 2}" y="{grid_bottom + 45}" text-anchor="middle" '
        f'font-size="12">{_escape(spec.x_label)}</text>'
    )
    axis_y = MARGIN_TOP + rows * CELL_SIZE // 2
    parts.append(
        f'<text x="20" y="{axis_y}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 20 {axis_y})">{_escape(spec.y_label)}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_heatmap(spec: HeatmapSpec, path: PathLike) -> Path:
    """Write ``render_heatmap(spec)`` to ``path``, replacing any existing file."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(render_heatmap(spec), encoding="utf-8")
    except OSError as e:
        logger.error(f"Error writing heatmap {path}: {str(e)}")
        raise DataFormatError(f"cannot write heatmap {path}: {e}") from e
    logger.info(f"Wrote heatmap {path}")
    return path


def success_heatmap(result: GridResult, value_range: Optional[Tuple[float, float]] = None) -> HeatmapSpec:
    matrix, rows, cols = result.matrix("mean_success")
    return HeatmapSpec(matrix, rows, cols, ramp=SUCCESS_RAMP, value_range=value_range,
                       title=f"{_attack_name(result)} transfer success")


def std_heatmap(result: GridResult) -> HeatmapSpec:
    matrix, rows, cols = result.matrix("std_success")
    return HeatmapSpec(matrix, rows, cols, ramp=STD_RAMP,
                       title=f"{_attack_name(result)} success std between repetitions")


def difference_heatmap(diff: GridDifference, title: str = "difference in transfer success") -> HeatmapSpec:
    matrix, rows, cols = diff.matrix()
    return HeatmapSpec(matrix, rows, cols, ramp=DIFFERENCE_RAMP, title=title)


def _attack_name(result: GridResult) -> str:
    return str(result.provenance.get("grid_spec", {}).get("attack", {}).get("kind", "attack"))


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # default float formatting is repr, which round-trips exactly
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def emit_csv(result: GridResult, out_dir: PathLike) -> Tuple[Path, Path]:
    """
    Write results.csv (one row per repetition) and summary.csv (one row per cell).

    Returns:
        (results path, summary path)
    """
    out_dir = Path(out_dir)
    results_path = _write_frame(result.results_frame(), out_dir / "results.csv")
    summary_path = _write_frame(result.summary_frame(), out_dir / "summary.csv")
    logger.info(f"Wrote {len(result.records)} result rows and {len(result.cells)} summary rows to {out_dir}")
    return results_path, summary_path


def emit_difference_csv(diff: GridDifference, path: PathLike) -> Path:
    return _write_frame(diff.to_frame(), Path(path))


def write_bundle(result: GridResult, path: PathLike) -> Path:
    """JSON bundle of the full result, provenance included, tagged with the bundle format version."""
    path = Path(path)
    document = {"format": BUNDLE_FORMAT, "format_version": BUNDLE_FORMAT_VERSION, "result": to_dict(result)}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote result bundle {path}")
    return path


def load_bundle(path: PathLike) -> GridResult:
    """
    Read a result bundle back into a GridResult.

    Raises:
        UsageError: the file does not exist
        DataFormatError: invalid JSON, wrong format version or schema mismatch
    """
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"bundle not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: not a readable JSON bundle ({e})") from e

    if not isinstance(document, dict) or "result" not in document:
        raise DataFormatError(f"{path}: missing 'result' section")
    version = document.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported bundle format version {version!r}, expected {BUNDLE_FORMAT_VERSION!r}")
    try:
        result = from_dict(GridResult, document["result"], "result")
    except ConfigError as e:
        raise DataFormatError(f"{path}: {e}") from e
    logger.info(f"Loaded bundle {path} with {len(result.cells)} cells")
    return result


def write_outputs(result: GridResult, out_dir: PathLike) -> Dict[str, Path]:
    """Everything a grid run leaves behind: bundle, both CSVs and both heatmaps."""
    out_dir = Path(out_dir)
    results_path, summary_path = emit_csv(result, out_dir)
    return {
        "bundle": write_bundle(result, out_dir / "bundle.json"),
        "results": results_path,
        "summary": summary_path,
        "success_heatmap": emit_heatmap(success_heatmap(result), out_dir / "success.svg"),
        "std_heatmap": emit_heatmap(std_heatmap(result), out_dir / "std.svg"),
    }


def format_correlations(result: GridResult) -> List[str]:
    return [
        f"r(success, shared classes) = {result.success_vs_classes}",
        f"r(success, shared data) = {result.success_vs_data}",
    ]
