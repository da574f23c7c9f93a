"""
Differentiable scalar fields standing in for a network output, and the
gradient-descent trainer that optimizes them against an annotation under each
TrainingMode.
"""

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from snake_refine.backprop import (
    JACOBIAN_INTERPOLANT,
    LOSS_MSE,
    LOSSES,
    TrainingMode,
    grad_fast,
    loss_and_grad_y,
    run_fast_recorded,
)
from snake_refine.distance_field import (
    DEFAULT_TRUNCATION,
    VolumeLike,
    _segment_projection,
    as_array,
)
from snake_refine.errors import ConfigError, DivergenceError, EmptyGraphError, GraphError
from snake_refine.geometry_graph import AnnotationGraph, GridSpec
from snake_refine.snake_core import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_DAMPING,
    DEFAULT_FAST_WEIGHT,
    DEFAULT_FULL_WEIGHT,
    DEFAULT_GAMMA,
    DEFAULT_SIGMA,
    DEFAULT_STEPS,
    FastDriver,
    FullDriver,
    SmoothedField,
    apply_separable,
    build_snake_system,
    full_weight_for,
    regularizer_energy,
    run_snake,
    stationarity_residual,
)
from snake_refine.synth_data import perturbation_levels
from snake_refine.utils import file_formats
from snake_refine.utils.run_logger import RunLogger

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["step", "L", "R", "stationarity", "displacement", "seconds"]


# ─── Fields ──────────────────────────────────────────────────────

def _bounded_step(direction: np.ndarray, rate: float, limit: Optional[float]) -> np.ndarray:
    """rate * direction, clipped elementwise to [-limit, limit] when a limit is given"""
    step = rate * np.asarray(direction, dtype=float)
    if limit is None:
        return step
    return np.clip(step, -limit, limit)


class PixelField:
    """One parameter per voxel; the field value is the parameter volume itself"""

    def __init__(self, values: VolumeLike):
        self.params = np.array(as_array(values), dtype=float, copy=True)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.params.shape)

    @property
    def step_scale(self) -> float:
        return 1.0

    def evaluate(self) -> np.ndarray:
        return self.params.copy()

    def pullback(self, grad_y: np.ndarray) -> np.ndarray:
        return np.asarray(grad_y, dtype=float)

    def apply_update(self, direction: np.ndarray, rate: float, limit: Optional[float] = None):
        self.params = self.params - _bounded_step(direction, rate, limit)

    def clip(self, lower: float, upper: float):
        np.clip(self.params, lower, upper, out=self.params)

    def copy(self) -> "PixelField":
        return PixelField(self.params)


def upsampling_matrix(n_fine: int, n_coarse: int) -> np.ndarray:
    """Linear interpolation from n_coarse samples to n_fine samples spanning the same axis"""
    if n_coarse < 2 or n_fine < 2:
        raise ConfigError(f"Upsampling needs >= 2 samples per axis, got {n_coarse} -> {n_fine}")
    position = np.arange(n_fine) * (n_coarse - 1) / (n_fine - 1)
    lower = np.minimum(np.floor(position).astype(int), n_coarse - 2)
    frac = position - lower
    matrix = np.zeros((n_fine, n_coarse))
    rows = np.arange(n_fine)
    matrix[rows, lower] = 1.0 - frac
    matrix[rows, lower + 1] += frac
    return matrix


class UpsampledField:
    """
    Low-resolution parameter grid upsampled multilinearly to the fine grid.
    The pullback is the transposed upsampling.
    """

    def __init__(self, coarse: np.ndarray, fine_shape: Sequence[int]):
        self.params = np.array(coarse, dtype=float, copy=True)
        self.fine_shape = tuple(int(s) for s in fine_shape)
        if self.params.ndim != len(self.fine_shape):
            raise ConfigError("Coarse and fine grids must have the same dimensionality")
        self.matrices = [upsampling_matrix(n, m)
                         for n, m in zip(self.fine_shape, self.params.shape)]

    @classmethod
    def from_volume(cls, volume: VolumeLike, factor: int = 2) -> "UpsampledField":
        """Least-squares coarse fit of `volume` on a grid `factor` times coarser"""
        fine = as_array(volume)
        coarse_shape = [max(2, (n - 1) // factor + 1) for n in fine.shape]
        matrices = [upsampling_matrix(n, m) for n, m in zip(fine.shape, coarse_shape)]
        coarse = apply_separable(fine, [np.linalg.pinv(u) for u in matrices])
        return cls(coarse, fine.shape)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.fine_shape)

    @property
    def step_scale(self) -> float:
        # 1 / largest eigenvalue of U^T U, separable over axes
        return float(1.0 / np.prod([np.linalg.norm(u, 2) ** 2 for u in self.matrices]))

    def evaluate(self) -> np.ndarray:
        return apply_separable(self.params, self.matrices)

    def pullback(self, grad_y: np.ndarray) -> np.ndarray:
        return apply_separable(grad_y, self.matrices, transpose=True)

    def apply_update(self, direction: np.ndarray, rate: float, limit: Optional[float] = None):
        self.params = self.params - _bounded_step(direction, rate, limit)

    def clip(self, lower: float, upper: float):
        # upsampling is a convex combination, so the fine field inherits the bounds
        np.clip(self.params, lower, upper, out=self.params)

    def copy(self) -> "UpsampledField":
        return UpsampledField(self.params, self.fine_shape)


# ─── Training ────────────────────────────────────────────────────

@dataclass(frozen=True)
class TrainConfig:
    mode: TrainingMode = TrainingMode.FAST
    steps: int = 100
    learning_rate: float = 0.1
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    snake_steps: int = DEFAULT_STEPS
    sigma: float = DEFAULT_SIGMA
    d: float = DEFAULT_TRUNCATION
    seed: int = 0
    full_weight: float = DEFAULT_FULL_WEIGHT
    fast_weight: float = DEFAULT_FAST_WEIGHT
    max_step: float = DEFAULT_TRUNCATION
    jacobian: str = JACOBIAN_INTERPOLANT
    loss: str = LOSS_MSE
    damping: float = DEFAULT_DAMPING
    # per-parameter step bound; None means learning_rate * d
    max_update: Optional[float] = None
    dump_every: int = 0
    run_dir: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", TrainingMode.parse(self.mode))
        if self.steps < 1:
            raise ConfigError(f"Training steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.loss not in LOSSES:
            raise ConfigError(f"Unknown loss '{self.loss}' (expected one of {', '.join(LOSSES)})")
        if self.damping < 0:
            raise ConfigError(f"damping must be >= 0, got {self.damping}")
        if self.max_update is not None and self.max_update <= 0:
            raise ConfigError(f"max_update must be > 0, got {self.max_update}")
        if self.dump_every > 0 and self.run_dir is None:
            raise ConfigError("dump_every needs a run_dir")

    @classmethod
    def from_run_config(cls, cfg, **overrides) -> "TrainConfig":
        base = cls(
            mode=cfg.mode, steps=cfg.train_steps, learning_rate=cfg.lr, alpha=cfg.alpha,
            beta=cfg.beta, gamma=cfg.gamma, snake_steps=cfg.steps_snake, sigma=cfg.sigma,
            d=cfg.truncation, seed=cfg.seed, full_weight=cfg.full_weight,
            fast_weight=cfg.fast_weight, max_step=cfg.max_step, jacobian=cfg.jacobian,
            loss=cfg.loss, damping=cfg.damping, dump_every=cfg.dump_every,
            run_dir=overrides.pop("run_dir", None),
        )
        return replace(base, **overrides)


class TrainResult(NamedTuple):
    field: Any
    graph: AnnotationGraph
    history: pd.DataFrame


def _adjust(mode: TrainingMode, system, graph: AnnotationGraph, y: np.ndarray,
            config: TrainConfig, full_weight: float):
    """Adjusted annotation and dL/dy for one training step, starting from `graph`"""
    if mode is TrainingMode.BASELINE:
        lg = loss_and_grad_y(graph, y, config.d, config.loss)
        return graph, lg.loss, lg.gradient

    if mode is TrainingMode.FULL:
        driver = FullDriver(y, config.d, full_weight)
        damped = driver.damped_system(system, graph, config.damping)
        adjusted, _ = run_snake(damped, graph, driver)
        # envelope gradient: dL/dy at the adjusted annotation
        lg = loss_and_grad_y(adjusted, y, config.d, config.loss)
        return adjusted, lg.loss, lg.gradient

    field = SmoothedField(y, config.sigma)
    if mode is TrainingMode.SIMPLE:
        adjusted, _ = run_snake(system, graph, FastDriver(field, config.fast_weight))
        lg = loss_and_grad_y(adjusted, y, config.d, config.loss)
        return adjusted, lg.loss, lg.gradient

    adjusted, _, tape = run_fast_recorded(system, graph, field, config.fast_weight)
    lg = loss_and_grad_y(adjusted, y, config.d, config.loss)
    grad = grad_fast(tape, system, adjusted, y, config.d, jacobian=config.jacobian, loss_grad=lg)
    return adjusted, lg.loss, grad


def _dump(run_dir: Path, step: int, y: np.ndarray, graph: AnnotationGraph):
    stem = run_dir / "dumps" / f"step_{step:04d}"
    file_formats.write_volume(y, stem.with_suffix(".raw"))
    file_formats.write_graph(graph, stem.with_suffix(".graph"))


def train(field, graph: AnnotationGraph, config: TrainConfig,
          run_logger: Optional[RunLogger] = None) -> TrainResult:
    """
    Gradient descent on the field parameters with per-mode annotation adjustment.

    Each step evaluates y, adjusts the given annotation (none for Baseline, fast
    driver for SnakeSimple/SnakeFast, full driver for SnakeFull), assembles
    dL/dy for the mode and takes theta <- theta - lr * (N/2) * dy/dtheta^T dL/dy.
    With lr = 1 and the mse loss a pixel field jumps straight to the current
    target distance map.

    Every step adjusts from the original annotation; the adjustment is never
    carried over to the next step. Each parameter moves by at most
    max_update (lr * d by default) per step and the parameters are then
    projected onto [0, d], the range of a truncated distance map. The direct
    dL/dy term never reaches the bound while y stays in range; only the term
    through the snake updates can.

    Returns:
        TrainResult(field, final adjusted graph, history DataFrame)

    Raises:
        DivergenceError with the training step index when the loss or the
        gradient stops being finite or a snake run diverges
    """
    grid = field.grid
    if graph.dim != grid.dim:
        raise GraphError(f"Graph is {graph.dim}D but the field grid is {grid.dim}D")
    if not grid.contains(graph.vertices):
        raise GraphError("Annotation graph must lie inside the field grid")

    field = field.copy()
    mode = config.mode
    system = build_snake_system(graph, config.alpha, config.beta, config.gamma,
                                config.snake_steps, config.max_step)
    full_weight = full_weight_for(grid, config.d, config.full_weight)
    rate = config.learning_rate * grid.n_voxels / 2.0 * field.step_scale
    limit = config.max_update if config.max_update is not None \
        else config.learning_rate * config.d
    run_dir = Path(config.run_dir) if config.run_dir is not None else None

    current = graph
    rows: List[Dict[str, float]] = []
    logger.info(f"Training {mode.value}: {config.steps} steps, lr={config.learning_rate}")
    for step in range(config.steps):
        y = field.evaluate()
        started = time.perf_counter()
        try:
            adjusted, loss, grad_y = _adjust(mode, system, graph, y, config, full_weight)
        except DivergenceError as e:
            if run_logger is not None:
                run_logger.log_error(f"Snake diverged at training step {step}", e)
            raise DivergenceError(step, f"Training step {step}: {e}") from e
        direction = field.pullback(grad_y)
        seconds = time.perf_counter() - started

        if not np.isfinite(loss) or not np.all(np.isfinite(direction)):
            raise DivergenceError(step, f"Non-finite loss or gradient at training step {step}")

        row = {
            "step": step,
            "L": loss,
            "R": regularizer_energy(adjusted, config.alpha, config.beta),
            "stationarity": stationarity_residual(system, adjusted, y, config.d, full_weight),
            "displacement": float(np.mean(np.linalg.norm(adjusted.vertices - graph.vertices,
                                                         axis=1))) if adjusted.num_vertices else 0.0,
            "seconds": seconds,
        }
        rows.append(row)
        if run_logger is not None:
            run_logger.log_step(step, {k: row[k] for k in ("L", "R", "displacement")})

        if run_dir is not None and config.dump_every and step % config.dump_every == 0:
            _dump(run_dir, step, y, adjusted)

        field.apply_update(direction, rate, limit)
        field.clip(0.0, config.d)
        current = adjusted

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    logger.info(
        f"Training {mode.value} done: L {history['L'].iloc[0]:.4g} -> {history['L'].iloc[-1]:.4g}, "
        f"{history['seconds'].mean() * 1e3:.1f} ms/step"
    )
    return TrainResult(field, current, history)


# ─── Evaluation helpers ──────────────────────────────────────────

def adjusted_annotation_error(graph_adj: AnnotationGraph, graph_truth: AnnotationGraph) -> float:
    """Mean distance from each vertex of graph_adj to the nearest point of graph_truth"""
    if graph_truth.num_vertices == 0:
        raise EmptyGraphError("Truth graph has no vertices")
    if graph_adj.num_vertices == 0:
        return 0.0
    points = graph_adj.vertices
    if graph_truth.num_edges == 0:
        diff = points[:, None, :] - graph_truth.vertices[None, :, :]
        return float(np.linalg.norm(diff, axis=2).min(axis=1).mean())
    best = np.full(points.shape[0], np.inf)
    for u, v in graph_truth.edges:
        dist, _ = _segment_projection(points, graph_truth.vertices[u], graph_truth.vertices[v])
        np.minimum(best, dist, out=best)
    return float(best.mean())


def robustness_sweep(truth: AnnotationGraph, initial_field: VolumeLike, config: TrainConfig,
                     levels: Sequence[float], correlation_length: float, seed: int = 0,
                     modes: Sequence[TrainingMode] = (TrainingMode.BASELINE, TrainingMode.FAST)
                     ) -> pd.DataFrame:
    """
    Train from the same initial field against smoothly perturbed annotations of
    `truth`, one run per (level, mode), and report annotation errors.
    """
    annotations = perturbation_levels(truth, seed, levels, correlation_length)
    rows = []
    for level, annotation in annotations.items():
        for mode in modes:
            result = train(PixelField(initial_field), annotation, replace(config, mode=mode))
            rows.append({
                "level": level,
                "mode": TrainingMode.parse(mode).value,
                "initial_error": adjusted_annotation_error(annotation, truth),
                "final_error": adjusted_annotation_error(result.graph, truth),
                "final_loss": float(result.history["L"].iloc[-1]),
            })
            logger.info(f"Robustness level {level} {rows[-1]['mode']}: "
                        f"error {rows[-1]['initial_error']:.3f} -> {rows[-1]['final_error']:.3f}")
    return pd.DataFrame(rows)


def precise_annotation_regression(truth: AnnotationGraph, grid: GridSpec,
                                  config: TrainConfig) -> Dict[str, float]:
    """
    Train Baseline and SnakeFast from a constant field against exact annotations.

    Returns:
        final losses per mode and the largest per-step mean vertex displacement
        seen under SnakeFast
    """
    start = np.full(grid.shape, float(config.d))
    baseline = train(PixelField(start), truth, replace(config, mode=TrainingMode.BASELINE))
    fast = train(PixelField(start), truth, replace(config, mode=TrainingMode.FAST))
    return {
        "baseline_loss": float(baseline.history["L"].iloc[-1]),
        "fast_loss": float(fast.history["L"].iloc[-1]),
        "max_displacement": float(fast.history["displacement"].max()),
    }
