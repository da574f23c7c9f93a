"""
Gradient assembly for the training modes.

- Baseline: dL/dy at the original annotation.
- SnakeFull: dL/dy at the snake optimum c*, which is treated as a constant.
- SnakeFast: total derivative of L(c_dagger(y), y), reverse-mode through the
  recorded fast-driver updates.
- SnakeSimple: dL/dy at c_dagger, dropping the term through the updates.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from snake_refine.distance_field import (
    DEFAULT_TRUNCATION,
    TruncatedDistanceMap,
    VolumeLike,
    as_array,
    distance_subgradient,
    distance_transform,
)
from snake_refine.errors import ConfigError, TapeMismatchError
from snake_refine.geometry_graph import AnnotationGraph, GridSpec
from snake_refine.snake_core import (
    FastDriver,
    SmoothedField,
    SnakeSystem,
    Stencil,
    _orders,
    multilinear_stencil,
    run_snake,
)

logger = logging.getLogger(__name__)

JACOBIAN_INTERPOLANT = "interpolant"
JACOBIAN_GAUSSIAN = "gaussian"


class TrainingMode(str, Enum):
    """Which gradient-assembly path a training step takes"""
    BASELINE = "baseline"
    SIMPLE = "simple"
    FULL = "full"
    FAST = "fast"

    @classmethod
    def parse(cls, value) -> "TrainingMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ConfigError(f"Unknown training mode '{value}' (expected one of {choices})")


class LossGrad(NamedTuple):
    loss: float
    gradient: np.ndarray
    dmap: TruncatedDistanceMap


LOSS_MSE = "mse"
LOSS_MAE = "mae"
LOSSES = (LOSS_MSE, LOSS_MAE)


def loss_and_grad_y(c: AnnotationGraph, y: VolumeLike, d: float = DEFAULT_TRUNCATION,
                    loss: str = LOSS_MSE) -> LossGrad:
    """
    Loss between y and D(c) with its gradient in y.

    mse: L = mean (y - D(c))^2, dL/dy = 2 (y - D(c)) / N
    mae: L = mean |y - D(c)|,   dL/dy = sign(y - D(c)) / N (zero where they agree)
    """
    y = as_array(y)
    dmap = distance_transform(c, GridSpec(y.shape), d)
    residual = y - dmap.values.data
    if loss == LOSS_MSE:
        return LossGrad(float(np.mean(residual ** 2)), 2.0 * residual / residual.size, dmap)
    if loss == LOSS_MAE:
        return LossGrad(float(np.mean(np.abs(residual))), np.sign(residual) / residual.size, dmap)
    raise ConfigError(f"Unknown loss '{loss}' (expected one of {', '.join(LOSSES)})")


def grad_baseline(c: AnnotationGraph, y: VolumeLike, d: float = DEFAULT_TRUNCATION,
                  loss: str = LOSS_MSE) -> np.ndarray:
    return loss_and_grad_y(c, y, d, loss).gradient


def grad_full(c_star: AnnotationGraph, y: VolumeLike, d: float = DEFAULT_TRUNCATION,
              loss: str = LOSS_MSE) -> np.ndarray:
    """Envelope gradient: the inner optimum is stationary, so dc*/dy drops out"""
    return loss_and_grad_y(c_star, y, d, loss).gradient


def grad_simple(c_dagger: AnnotationGraph, y: VolumeLike,
                d: float = DEFAULT_TRUNCATION, loss: str = LOSS_MSE) -> np.ndarray:
    """Fast-driver annotation, no term through the snake updates"""
    return loss_and_grad_y(c_dagger, y, d, loss).gradient


# ─── Tape ────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class TapeStep:
    coords: np.ndarray
    stencil: Stencil


@dataclass(eq=False)
class Tape:
    """Recorded fast-driver updates: inputs, sampling stencils and the field they read"""
    field: SmoothedField
    weight: float
    steps: List[TapeStep] = field(default_factory=list)
    final: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.steps)

    def replay(self, system: SnakeSystem) -> np.ndarray:
        """Re-run the recorded updates from the first input coordinates"""
        if not self.steps:
            return None if self.final is None else np.array(self.final)
        driver = FastDriver(self.field, self.weight)
        coords = np.array(self.steps[0].coords, dtype=float)
        for _ in self.steps:
            stencil = multilinear_stencil(coords, self.field.shape)
            coords = system.update(coords, driver.gradient_from_stencil(stencil))
        return coords

    def jacobian(self, step: TapeStep, mode: str = JACOBIAN_INTERPOLANT) -> np.ndarray:
        """
        d g_a / d c_b per vertex, (n, dim, dim), for the unweighted sampled
        field gradient g. Clamped coordinates have zero columns.

        The interpolant Jacobian is the default because it is the exact
        derivative of the multilinear sampling the forward updates perform, so
        the reverse sweep agrees with finite differences of the recorded run.
        The gaussian variant samples analytic second derivatives of the
        smoothed field instead; it is smoother across voxel faces but only
        approximates what the forward pass computed.
        """
        dim = self.field.dim
        stencil = step.stencil
        if mode == JACOBIAN_INTERPOLANT:
            jac = np.stack([stencil.sample_gradient(self.field.derivative(a))
                            for a in range(dim)], axis=1)
        elif mode == JACOBIAN_GAUSSIAN:
            jac = np.empty((stencil.weights.shape[0], dim, dim))
            for a in range(dim):
                for b in range(dim):
                    jac[:, a, b] = stencil.sample(self.field.second_derivative(a, b))
            jac *= ~stencil.outside[:, None, :]
        else:
            raise ConfigError(f"Unknown tape Jacobian '{mode}'")
        return jac


class RecordingFastDriver(FastDriver):
    """Fast driver that appends every evaluation to a Tape"""

    def __init__(self, field: SmoothedField, weight: float = 1.0):
        super().__init__(field, weight)
        self.tape = Tape(field=field, weight=self.weight)

    def gradient(self, graph: AnnotationGraph) -> Tuple[np.ndarray, Dict[str, float]]:
        stencil = self.stencil(graph)
        grad = self.gradient_from_stencil(stencil)
        self.tape.steps.append(TapeStep(coords=np.array(graph.vertices), stencil=stencil))
        info = {
            "S": float(stencil.sample(self.field.smoothed).sum()),
            "clamped": float(np.any(stencil.outside, axis=1).sum()),
        }
        return grad, info


def run_fast_recorded(system: SnakeSystem, graph: AnnotationGraph, field: SmoothedField,
                      weight: float = 1.0, steps: Optional[int] = None,
                      report=None) -> Tuple[AnnotationGraph, List[float], Tape]:
    """Fast-driver snake run that also returns the tape of its updates"""
    driver = RecordingFastDriver(field, weight)
    adjusted, residuals = run_snake(system, graph, driver, steps=steps, report=report)
    driver.tape.final = np.array(adjusted.vertices)
    return adjusted, residuals, driver.tape


# ─── Reverse sweep ───────────────────────────────────────────────

def reverse_sweep(system: SnakeSystem, n_steps: int, cotangent: np.ndarray,
                  step_vjp: Callable[[int, np.ndarray], np.ndarray]) -> np.ndarray:
    """
    Pull a cotangent on c^T back to c^0 through c^{t+1} = M (Gamma c^t - g(c^t))
    with M = (A + Gamma)^-1 and Gamma the system viscosity.

    `step_vjp(t, w)` receives w = M v and returns -(dg/dc at step t)^T w; it may
    accumulate parameter cotangents as a side effect. M is symmetric, so its
    adjoint is itself.
    """
    v = np.asarray(cotangent, dtype=float)
    for t in reversed(range(n_steps)):
        w = system.solve(v)
        v = system.viscosity[:, None] * w + step_vjp(t, w)
    return v


def grad_fast(tape: Tape, system: SnakeSystem, c_dagger: AnnotationGraph, y: VolumeLike,
              d: float = DEFAULT_TRUNCATION, jacobian: str = JACOBIAN_INTERPOLANT,
              loss_grad: Optional[LossGrad] = None, loss: str = LOSS_MSE) -> np.ndarray:
    """
    dL/dy + dL/dc . dc_dagger/dy for the run recorded in `tape`.

    Raises:
        TapeMismatchError if the tape did not produce c_dagger or was recorded
        on a field of another shape
    """
    y = as_array(y)
    if tape.final is None or tape.final.shape != c_dagger.vertices.shape \
            or not np.array_equal(tape.final, c_dagger.vertices):
        raise TapeMismatchError("Tape does not end at the given annotation coordinates")
    if tape.field.shape != y.shape:
        raise TapeMismatchError(f"Tape field shape {tape.field.shape} != volume {y.shape}")
    if system.num_vertices != c_dagger.num_vertices:
        raise TapeMismatchError("Snake system and tape disagree on the vertex count")

    lg = loss_grad if loss_grad is not None else loss_and_grad_y(c_dagger, y, d, loss)
    if len(tape) == 0:
        return lg.gradient

    # dL/dc at c_dagger: dL/dD = -dL/dy
    v_final = distance_subgradient(lg.dmap, c_dagger, -lg.gradient)
    dim = tape.field.dim
    filtered_bar = [np.zeros(y.shape) for _ in range(dim)]

    def step_vjp(t: int, w: np.ndarray) -> np.ndarray:
        step = tape.steps[t]
        g_bar = -tape.weight * w
        g_bar[step.stencil.outside] = 0.0
        for a in range(dim):
            filtered_bar[a] += step.stencil.scatter(g_bar[:, a], y.shape)
        return np.einsum("na,nab->nb", g_bar, tape.jacobian(step, jacobian))

    reverse_sweep(system, len(tape), v_final, step_vjp)

    through_updates = sum(tape.field.adjoint(_orders(dim, a), filtered_bar[a]) for a in range(dim))
    return lg.gradient + through_updates
