import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from src import __version__
from src.components.attacks import run_attack
from src.components.harness import ExperimentRunner, difference, lower_bound_cell
from src.components.networks import load_model, save_model
from src.components.reporting import (
    difference_heatmap,
    emit_csv,
    emit_difference_csv,
    emit_heatmap,
    format_correlations,
    load_bundle,
    std_heatmap,
    success_heatmap,
    write_outputs,
)
from src.components.trainer import accuracy_on
from src.config import config, resolve_threads
from src.models.specs import GridSpec
from src.utils.errors import ConfigError, OverlapBenchError, UsageError
from src.utils.schema import from_dict

logger = logging.getLogger(__name__)

COMMANDS = ("partition", "train", "attack", "grid", "report")
# dataset keys holding file paths, resolved against the config file's directory
_PATH_KEYS = ("train_images", "train_labels", "test_images", "test_labels")
_PATH_LIST_KEYS = ("train_files", "test_files")


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors share the exit-code contract."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help=f"output directory (default: {config.out_dir})")
    common.add_argument("--threads", type=int, default=None, help="grid cells run concurrently")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    cell = ArgumentParser(add_help=False)
    cell.add_argument("--config", required=True, help="JSON run configuration (schema v1)")
    cell.add_argument("--shared-classes", type=int, default=None, help="o (default: first grid entry)")
    cell.add_argument("--shared-data", type=float, default=None, help="p (default: first grid entry)")
    cell.add_argument("--rep", type=int, default=0, help="repetition index")

    parser = ArgumentParser(prog="overlap-bench", description="Transfer attacks under partial class and data overlap")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    commands.required = True

    commands.add_parser("partition", parents=[common, cell], help="write the partition audit of one cell")

    train = commands.add_parser("train", parents=[common, cell], help="train one side of one cell")
    train.add_argument("--side", choices=["surrogate", "victim"], default="surrogate")

    attack = commands.add_parser("attack", parents=[common, cell], help="attack one cell's shared test set")
    attack.add_argument("--model", default=None, help="surrogate checkpoint (default: train it)")

    grid = commands.add_parser("grid", parents=[common], help="run the full grid")
    grid.add_argument("--config", required=True, help="JSON run configuration (schema v1)")
    grid.add_argument("--no-progress", action="store_true", help="hide the progress bar")

    report = commands.add_parser("report", parents=[common], help="render CSV/SVG from a result bundle")
    report.add_argument("--bundle", required=True, help="bundle.json written by grid")
    report.add_argument("--heatmap", default=None, help="success heatmap SVG path")
    report.add_argument("--std-heatmap", default=None, help="standard-deviation heatmap SVG path")
    report.add_argument("--csv-dir", default=None, help="directory for results.csv and summary.csv")
    report.add_argument("--fixed-range", action="store_true", help="color the success heatmap over [0, 1]")
    report.add_argument("--compare", default=None, help="second bundle; report this bundle minus it")
    report.add_argument("--diff-heatmap", default=None, help="difference heatmap SVG path (with --compare)")
    report.add_argument("--diff-csv", default=None, help="difference CSV path (with --compare)")
    return parser


def load_grid_spec(path: str) -> GridSpec:
    """
    Parse and validate a JSON run configuration before any compute.

    Relative dataset paths are taken relative to the configuration file.

    Raises:
        UsageError: the file is missing or unreadable
        ConfigError: invalid JSON or a schema violation
    """
    config_path = Path(path)
    if not config_path.is_file():
        raise UsageError(f"config file not found: {config_path}")
    try:
        document = json.loads(config_path.read_text(encoding="utf-8"))
    except OSError as e:
        raise UsageError(f"cannot read config file {config_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{config_path}: invalid JSON ({e})") from e

    if isinstance(document, dict) and isinstance(document.get("dataset"), dict):
        document["dataset"] = _resolve_dataset_paths(document["dataset"], config_path.parent)
    return from_dict(GridSpec, document, "config")


def _resolve_dataset_paths(dataset: Dict[str, Any], base: Path) -> Dict[str, Any]:
    def _resolve(value: Any) -> Any:
        if isinstance(value, str) and not Path(value).is_absolute():
            return str(base / value)
        return value

    resolved = dict(dataset)
    for key in _PATH_KEYS:
        if key in resolved:
            resolved[key] = _resolve(resolved[key])
    for key in _PATH_LIST_KEYS:
        if isinstance(resolved.get(key), list):
            resolved[key] = [_resolve(item) for item in resolved[key]]
    return resolved


class OverlapBenchApplication:
    """Command-line application: one method per subcommand."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out_dir = Path(args.out or config.out_dir)
        self.threads = resolve_threads(args.threads)

    def run(self) -> int:
        handler = getattr(self, f"command_{self.args.command}")
        handler()
        return 0

    def _runner(self) -> ExperimentRunner:
        grid = load_grid_spec(self.args.config)
        progress = self.args.command == "grid" and not self.args.no_progress and not self.args.quiet
        return ExperimentRunner(grid, threads=self.threads, progress=progress)

    def _cell(self, runner: ExperimentRunner):
        axes = runner.grid.grid
        o = self.args.shared_classes if self.args.shared_classes is not None else axes.shared_classes[0]
        p = self.args.shared_data if self.args.shared_data is not None else axes.shared_data_fractions[0]
        if self.args.rep < 0:
            raise UsageError(f"--rep must be non-negative, got {self.args.rep}")
        return o, p, self.args.rep

    def _write_json(self, name: str, document: Dict[str, Any]) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info(f"Wrote {path}")
        return path

    def command_partition(self) -> None:
        runner = self._runner()
        partition = runner.partition(*self._cell(runner))
        self._write_json("partition.json", partition.to_audit())

    def command_train(self) -> None:
        runner = self._runner()
        o, p, rep = self._cell(runner)
        partition = runner.partition(o, p, rep)
        model, history = runner.train_side(partition, self.args.side, runner.seeds(o, p, rep))

        save_model(model, self.out_dir / f"{self.args.side}.ovlb")
        history_path = self.out_dir / f"{self.args.side}_history.csv"
        history.to_frame().to_csv(history_path, index=False, lineterminator="\n")
        logger.info(f"Wrote {history_path}")

    def command_attack(self) -> None:
        runner = self._runner()
        o, p, rep = self._cell(runner)
        seeds = runner.seeds(o, p, rep)
        partition = runner.partition(o, p, rep)
        if self.args.model:
            surrogate = load_model(self.args.model)
        else:
            surrogate, _ = runner.train_side(partition, "surrogate", seeds)

        shared_test = runner.attack_set(partition, seeds)
        labels = shared_test.relabel(partition.surrogate_class_map).labels
        attack_config = replace(runner.grid.attack_config, seed=seeds.attack)
        batch = run_attack(runner.grid.attack_kind, surrogate, shared_test.inputs, labels, attack_config)
        batch.save(self.out_dir / "adversarial.ovlb")

        clean = accuracy_on(surrogate, shared_test.inputs, labels)
        attacked = accuracy_on(surrogate, batch.x_adv, labels)
        self._write_json("attack_summary.json", {
            "attack": batch.attack,
            "model_id": batch.model_id,
            "o": o,
            "shared_data_fraction": p,
            "rep": rep,
            "samples": len(batch),
            "epsilon": attack_config.epsilon,
            "linf": batch.linf,
            "fooled_fraction": float(batch.fooled.mean()),
            "surrogate_clean_acc": clean,
            "surrogate_attacked_acc": attacked,
            "whitebox_success": clean - attacked,
        })

    def command_grid(self) -> None:
        result = self._runner().run_grid()
        write_outputs(result, self.out_dir)
        for line in format_correlations(result):
            logger.info(line)

    def command_report(self) -> None:
        result = load_bundle(self.args.bundle)
        for line in format_correlations(result):
            logger.info(line)
        cell = lower_bound_cell(result)
        logger.info(f"Lower-bound cell o={cell.o} p={cell.shared_data_fraction}: "
                    f"mean success {cell.mean_success:.4f} (std {cell.std_success:.4f})")

        wrote_any = False
        if self.args.heatmap:
            emit_heatmap(success_heatmap(result, (0.0, 1.0) if self.args.fixed_range else None), self.args.heatmap)
            wrote_any = True
        if self.args.std_heatmap:
            emit_heatmap(std_heatmap(result), self.args.std_heatmap)
            wrote_any = True
        if self.args.csv_dir:
            emit_csv(result, self.args.csv_dir)
            wrote_any = True

        if self.args.compare:
            diff = difference(result, load_bundle(self.args.compare))
            logger.info(f"r(difference, shared classes) = {diff.difference_vs_classes}, "
                        f"r(difference, shared data) = {diff.difference_vs_data}")
            emit_heatmap(difference_heatmap(diff), self.args.diff_heatmap or self.out_dir / "difference.svg")
            emit_difference_csv(diff, self.args.diff_csv or self.out_dir / "difference.csv")
            wrote_any = True
        elif self.args.diff_heatmap or self.args.diff_csv:
            raise UsageError("--diff-heatmap and --diff-csv need --compare")

        if not wrote_any:
            emit_heatmap(success_heatmap(result, (0.0, 1.0) if self.args.fixed_range else None),
                         self.out_dir / "success.svg")
            emit_heatmap(std_heatmap(result), self.out_dir / "std.svg")
            emit_csv(result, self.out_dir)


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else getattr(logging, config.log_level)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point; returns the process exit code.

    0 success, 1 usage or configuration error, 2 data or format error,
    3 numeric failure.
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)

    configure_logging(args.verbose, args.quiet)
    try:
        return OverlapBenchApplication(args).run()
    except OverlapBenchError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # invalid --threads and similar argument values
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(cli_main())
