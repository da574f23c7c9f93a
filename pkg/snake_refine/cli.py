#!/usr/bin/env python3
"""
snake-refine command line.

Subcommands:
  synth-gen        write a synthetic fixture (field volume, graphs, manifest)
  adjust           run the network snake on a volume/graph pair
  train-toy        optimize a pixel field against an annotation in one mode
  metrics          CCQ / APLS / TLTS of a prediction against ground truth
  reproduce-fig4   gap fixture trained in the full, fast and simple modes

Exit codes: 0 ok, 2 configuration error, 3 IO error, 4 numerical divergence,
5 other solver error.
"""

import argparse
import functools
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import find_dotenv, load_dotenv

from snake_refine.backprop import TrainingMode
from snake_refine.config.settings import DEFAULTS, RunConfig, load_run_config
from snake_refine.distance_field import distance_transform, rasterize_graph
from snake_refine.errors import ConfigError, SnakeRefineError
from snake_refine.field_model import PixelField, TrainConfig, adjusted_annotation_error, train
from snake_refine.geometry_graph import GridSpec
from snake_refine.metrics import REPORT_COLUMNS, evaluate, skeletonize_and_graph
from snake_refine.snake_core import (
    FastDriver,
    FullDriver,
    SmoothedField,
    build_snake_system,
    full_weight_for,
    run_snake,
)
from snake_refine.synth_data import make_fig4_fixture, make_fixture, save_fixture
from snake_refine.utils import file_formats
from snake_refine.utils.run_logger import RunLogger, create_adjust_logger, create_train_logger

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 3

FIG4_MODES = (TrainingMode.FULL, TrainingMode.FAST, TrainingMode.SIMPLE)
FIG4_COLUMNS = [
    "mode", "seconds_per_step", "final_loss", "initial_error", "final_error",
    "arc_length", "gap_max",
]

HELP = {
    "mode": "training mode: baseline, simple, full or fast",
    "lr": "voxel-relative learning rate",
    "train_steps": "gradient-descent steps",
    "seed": "random seed",
    "dump_every": "dump field and graph every k training steps (0 = never)",
    "alpha": "spring weight",
    "beta": "elasticity weight",
    "gamma": "viscosity",
    "steps_snake": "snake updates per adjustment (T)",
    "sigma": "Gaussian width of the fast driver's smoothing",
    "truncation": "distance-map truncation d",
    "full_weight": "stiffness of the full driver's external energy",
    "fast_weight": "weight of the fast driver's external energy",
    "max_step": "largest vertex move per update before the run counts as diverged",
    "damping": "full-driver viscosity floor as a multiple of each vertex's loss curvature (0 = plain gamma)",
    "loss": "training loss against the annotation distance map: mse or mae",
    "jacobian": "tape Jacobian: interpolant or gaussian",
    "driver": "snake driver: full or fast",
    "match_distance": "CCQ match distance in voxels",
    "snap_radius": "APLS/TLTS endpoint snapping radius in voxels",
    "n_pairs": "endpoint pairs sampled for APLS/TLTS",
    "tolerance": "TLTS relative length tolerance",
    "threshold": "distance-map threshold before skeletonization",
    "prune_length": "spur prune length in voxels",
    "fixture": "fixture name: fig4, steep or tree",
    "grid_size": "fixture grid extent per axis",
    "offset": "fig4 annotation offset in voxels",
    "gap": "fig4 gap length in voxels",
    "n_branches": "tree fixture branch count",
    "amplitude": "tree annotation perturbation amplitude",
    "correlation_length": "tree annotation perturbation correlation length",
    "volume": "input (or predicted) volume file",
    "graph": "input (or predicted) graph file",
    "truth": "ground-truth graph file",
    "truth_volume": "ground-truth volume file",
    "output": "output directory",
}

_SNAKE_KEYS = ["alpha", "beta", "gamma", "steps_snake", "sigma", "truncation",
               "full_weight", "fast_weight", "max_step", "damping"]
COMMAND_KEYS: Dict[str, List[str]] = {
    "synth-gen": ["fixture", "seed", "grid_size", "offset", "gap", "n_branches", "amplitude",
                  "correlation_length", "truncation", "output"],
    "adjust": ["volume", "graph", "truth", "driver", *_SNAKE_KEYS, "output"],
    "train-toy": ["fixture", "volume", "graph", "truth", "mode", "lr", "train_steps", "seed",
                  "dump_every", "loss", *_SNAKE_KEYS, "jacobian", "grid_size", "offset", "gap",
                  "n_branches", "amplitude", "correlation_length", "output"],
    "metrics": ["graph", "truth", "volume", "truth_volume", "match_distance", "snap_radius",
                "n_pairs", "tolerance", "threshold", "prune_length", "seed"],
    "reproduce-fig4": ["lr", "train_steps", "loss", *_SNAKE_KEYS, "jacobian", "grid_size",
                       "offset", "gap", "output"],
}


def exit_code_on_error(command: Callable[[RunConfig], int]) -> Callable[[RunConfig], int]:
    """Turn snake-refine and IO exceptions into the documented exit codes"""
    @functools.wraps(command)
    def wrapper(config: RunConfig) -> int:
        try:
            return command(config)
        except SnakeRefineError as e:
            logger.error(f"❌ {type(e).__name__}: {e}")
            return e.exit_code
        except OSError as e:
            logger.error(f"❌ IO error: {e}")
            return EXIT_IO
    return wrapper


def _fixture_kwargs(config: RunConfig) -> dict:
    if config.fixture in ("fig4", "steep"):
        return {"size": config.grid_size, "offset": config.offset, "gap": config.gap,
                "d": config.truncation}
    return {"grid": (config.grid_size, config.grid_size), "n_branches": config.n_branches,
            "d": config.truncation, "amplitude": config.amplitude,
            "correlation_length": config.correlation_length}


def _load_inputs(config: RunConfig):
    if config.volume is None or config.graph is None:
        raise ConfigError("Both --volume and --graph are required")
    volume = file_formats.read_volume(config.volume)
    graph = file_formats.read_graph(config.graph)
    truth = file_formats.read_graph(config.truth) if config.truth else None
    return volume, graph, truth


# ─── Subcommands ─────────────────────────────────────────────────

@exit_code_on_error
def cmd_synth_gen(config: RunConfig) -> int:
    """Generate a fixture and write its volume, graphs and manifest"""
    fixture = make_fixture(config.fixture, seed=config.seed, **_fixture_kwargs(config))
    paths = save_fixture(fixture, config.output)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


@exit_code_on_error
def cmd_adjust(config: RunConfig) -> int:
    """Snake adjustment of a graph against a volume; writes adjusted.graph and steps.csv"""
    volume, graph, truth = _load_inputs(config)
    out_dir = Path(config.output)
    run_logger = create_adjust_logger(run_dir=out_dir)
    try:
        with run_logger.run_context(config.steps_snake, metadata=config.to_dict()):
            system = build_snake_system(graph, config.alpha, config.beta, config.gamma,
                                        config.steps_snake, config.max_step)
            if config.driver == "full":
                weight = full_weight_for(volume.grid, config.truncation, config.full_weight)
                driver = FullDriver(volume, config.truncation, weight)
                system = driver.damped_system(system, graph, config.damping)
            else:
                driver = FastDriver(SmoothedField(volume, config.sigma), config.fast_weight)
            report = []
            try:
                adjusted, residuals = run_snake(system, graph, driver, report=report)
            finally:
                if report:
                    file_formats.write_csv(pd.DataFrame([vars(r) for r in report]),
                                           out_dir / "steps.csv")

            file_formats.write_graph(adjusted, out_dir / "adjusted.graph",
                                     comment=f"adjusted with the {config.driver} driver")
            if residuals[-1] > 0.05 * residuals[0]:
                run_logger.log_warning(
                    f"Snake still moving after {len(residuals)} updates",
                    {"first_residual": residuals[0], "final_residual": residuals[-1]},
                )
            summary = {"driver": config.driver, "final_residual": residuals[-1]}
            if truth is not None:
                summary["initial_error"] = adjusted_annotation_error(graph, truth)
                summary["final_error"] = adjusted_annotation_error(adjusted, truth)
                run_logger.log_info(
                    f"Annotation error {summary['initial_error']:.3f} -> {summary['final_error']:.3f}"
                )
            file_formats.write_manifest(summary, out_dir / "summary.json")
            run_logger.update_progress(len(residuals), stage="done")
    finally:
        run_logger.close()
    return EXIT_OK


@exit_code_on_error
def cmd_train_toy(config: RunConfig) -> int:
    """Train a pixel field in one mode; writes history.csv, final field and graph"""
    out_dir = Path(config.output)
    if config.volume is not None or config.graph is not None:
        volume, graph, truth = _load_inputs(config)
        grid = volume.grid
    else:
        fixture = make_fixture(config.fixture, seed=config.seed, **_fixture_kwargs(config))
        volume, graph, truth, grid = fixture.field, fixture.annotation, fixture.truth, fixture.grid

    train_config = TrainConfig.from_run_config(config, run_dir=str(out_dir))
    run_logger = create_train_logger(config.mode, run_dir=out_dir)
    try:
        with run_logger.run_context(config.train_steps, metadata=config.to_dict()):
            result = train(PixelField(volume), graph, train_config, run_logger)
            file_formats.write_csv(result.history, out_dir / "history.csv")
            file_formats.write_volume(result.field.evaluate(), out_dir / "final_field.raw")
            file_formats.write_graph(result.graph, out_dir / "final.graph")
            summary = {"mode": config.mode, "final_loss": float(result.history["L"].iloc[-1]),
                       "grid": list(grid.shape)}
            if truth is not None:
                summary["initial_error"] = adjusted_annotation_error(graph, truth)
                summary["final_error"] = adjusted_annotation_error(result.graph, truth)
            file_formats.write_manifest(summary, out_dir / "summary.json")
    finally:
        run_logger.close()
    return EXIT_OK


def _metric_grid(*graphs) -> GridSpec:
    points = np.vstack([g.vertices for g in graphs if g.num_vertices])
    extent = np.ceil(points.max(axis=0)).astype(int) + 2
    return GridSpec(tuple(int(e) for e in extent))


@exit_code_on_error
def cmd_metrics(config: RunConfig) -> int:
    """Print one CSV row in REPORT_COLUMNS order"""
    pred_volume = file_formats.read_volume(config.volume) if config.volume else None
    gt_volume = file_formats.read_volume(config.truth_volume) if config.truth_volume else None

    if config.graph:
        pred_graph = file_formats.read_graph(config.graph)
    elif pred_volume is not None:
        pred_graph = skeletonize_and_graph(pred_volume, config.threshold, config.prune_length)
    else:
        raise ConfigError("metrics needs --graph or --volume for the prediction")
    if config.truth:
        gt_graph = file_formats.read_graph(config.truth)
    elif gt_volume is not None:
        gt_graph = skeletonize_and_graph(gt_volume, config.threshold, config.prune_length)
    else:
        raise ConfigError("metrics needs --truth or --truth-volume for the ground truth")

    if pred_volume is not None and gt_volume is not None:
        if pred_volume.shape != gt_volume.shape:
            raise ConfigError(f"Volume shapes differ: {pred_volume.shape} vs {gt_volume.shape}")
        pred_mask = pred_volume.data < config.threshold
        gt_mask = gt_volume.data < config.threshold
    else:
        grid = pred_volume.grid if pred_volume is not None else (
            gt_volume.grid if gt_volume is not None else _metric_grid(pred_graph, gt_graph))
        pred_mask = rasterize_graph(pred_graph, grid)
        gt_mask = rasterize_graph(gt_graph, grid)

    report = evaluate(pred_graph, gt_graph, pred_mask, gt_mask, config.match_distance,
                      config.n_pairs, config.tolerance, config.seed, config.snap_radius)
    row = report.as_row()
    print(",".join(f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c])
                   for c in REPORT_COLUMNS))
    return EXIT_OK


def _write_panels(out_dir: Path, y, truth_map, d: float):
    file_formats.write_volume(y, out_dir / "final_field.raw")
    file_formats.write_volume(y - truth_map, out_dir / "diff_to_truth.raw")
    file_formats.write_pgm(y, out_dir / "final_field.pgm", value_range=(0.0, d))
    file_formats.write_pgm(np.abs(y - truth_map), out_dir / "diff_to_truth.pgm",
                           value_range=(0.0, d / 4.0))


@exit_code_on_error
def cmd_reproduce_fig4(config: RunConfig) -> int:
    """
    Train the gap fixture in the full, fast and simple modes and write per-mode
    volumes, graphs, difference-to-truth volumes, PGM panels and fig4.csv.
    """
    out_dir = Path(config.output)
    fixture = make_fig4_fixture(size=config.grid_size, offset=config.offset, gap=config.gap,
                                d=config.truncation)
    save_fixture(fixture, out_dir / "fixture")
    d = config.truncation
    truth_map = distance_transform(fixture.truth, fixture.grid, d).values.data
    file_formats.write_pgm(fixture.field, out_dir / "initial_field.pgm", value_range=(0.0, d))
    file_formats.write_pgm(truth_map, out_dir / "truth_field.pgm", value_range=(0.0, d))
    initial_error = adjusted_annotation_error(fixture.annotation, fixture.truth)

    rows = []
    run_logger = RunLogger("reproduce_fig4", run_dir=out_dir)
    try:
        with run_logger.run_context(len(FIG4_MODES) * config.train_steps,
                                    metadata=config.to_dict()):
            for k, mode in enumerate(FIG4_MODES):
                run_logger.log_info(f"Training mode {mode.value}")
                train_config = TrainConfig.from_run_config(config, mode=mode)
                result = train(PixelField(fixture.field), fixture.annotation, train_config)
                y = result.field.evaluate()
                mode_dir = out_dir / mode.value
                _write_panels(mode_dir, y, truth_map, d)
                file_formats.write_graph(result.graph, mode_dir / "final.graph")
                file_formats.write_csv(result.history.drop(columns=["seconds"]),
                                       mode_dir / "history.csv")
                rows.append({
                    "mode": mode.value,
                    "seconds_per_step": float(result.history["seconds"].mean()),
                    "final_loss": float(result.history["L"].iloc[-1]),
                    "initial_error": initial_error,
                    "final_error": adjusted_annotation_error(result.graph, fixture.truth),
                    "arc_length": result.graph.arc_length(),
                    "gap_max": float(y[fixture.gap_mask].max()) if fixture.gap_mask.any() else 0.0,
                })
                run_logger.update_progress((k + 1) * config.train_steps, stage=mode.value)
            file_formats.write_csv(pd.DataFrame(rows, columns=FIG4_COLUMNS), out_dir / "fig4.csv")
    finally:
        run_logger.close()
    for row in rows:
        print(f"{row['mode']:>6}: error {row['initial_error']:.2f} -> {row['final_error']:.2f}, "
              f"gap max {row['gap_max']:.2f}, {row['seconds_per_step'] * 1e3:.1f} ms/step")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "synth-gen": cmd_synth_gen,
    "adjust": cmd_adjust,
    "train-toy": cmd_train_toy,
    "metrics": cmd_metrics,
    "reproduce-fig4": cmd_reproduce_fig4,
}


# ─── Parser ──────────────────────────────────────────────────────

def _flag_type(key: str):
    default = DEFAULTS[key]
    if default is None or isinstance(default, str):
        return str
    return int if isinstance(default, int) else float


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snake-refine",
        description="Network-snake refinement of centerline annotations",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Exit codes: 0 ok, 2 config error, 3 IO error, 4 numerical divergence, "
               "5 other solver error",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMAND_KEYS.items():
        doc = (COMMANDS[name].__doc__ or "").strip().splitlines()
        p = sub.add_parser(name, help=doc[0] if doc else name, description=COMMANDS[name].__doc__)
        p.add_argument("--config", default=None, help="key = value configuration file")
        for key in keys:
            # flags default to None so that unset flags leave file/env values alone
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=_flag_type(key),
                           default=None, help=f"{HELP[key]} [default: {DEFAULTS[key]}]")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv(find_dotenv(usecwd=True))
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    overrides = {k: getattr(args, k) for k in COMMAND_KEYS[args.command]}
    try:
        config = load_run_config(args.config, overrides)
    except ConfigError as e:
        logger.error(f"❌ {e}")
        return e.exit_code
    return COMMANDS[args.command](config)


if __name__ == "__main__":
    sys.exit(main())
