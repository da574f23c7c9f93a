"""
Network-snake machinery: regularizer assembly, the pre-factorized semi-implicit
update, and the two external-energy drivers.

One update is c <- (A + gamma I)^-1 (gamma c - g(c)) where g is the gradient
of the external energy: the distance-map loss L (full driver) or the smoothed
field sum S (fast driver). A acts identically on every coordinate axis, so a
single n x n factorization serves all of them.

The full driver may replace gamma I by a diagonal Gamma that is larger at
vertices where L is stiff (the open ends of a curve). The fixed point
A c + g(c) = 0 does not depend on Gamma.
"""

import itertools
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from snake_refine.distance_field import (
    DEFAULT_TRUNCATION,
    VolumeLike,
    as_array,
    distance_subgradient,
    distance_transform,
    gauss_newton_blocks,
)
from snake_refine.errors import DivergenceError, NonFiniteGradientError, SolverError
from snake_refine.geometry_graph import AnnotationGraph, GridSpec

logger = logging.getLogger(__name__)

# Regularizer weights, viscosity and update count used for training
DEFAULT_ALPHA = 1e-2
DEFAULT_BETA = 1e-3
DEFAULT_GAMMA = 10.0
DEFAULT_STEPS = 10
DEFAULT_SIGMA = 1.0
DEFAULT_KERNEL_TRUNCATE = 3.0

# External-energy stiffness so that gamma=10 settles inside 10 updates
DEFAULT_FULL_WEIGHT = 5.0
DEFAULT_FAST_WEIGHT = 8.0

# Full-driver viscosity floor as a multiple of each vertex's loss curvature
DEFAULT_DAMPING = 2.0


# ─── Regularizer ─────────────────────────────────────────────────

def difference_operators(graph: AnnotationGraph) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """First differences over edges and second differences over triples"""
    n = graph.num_vertices
    m = graph.num_edges
    rows = np.repeat(np.arange(m), 2)
    cols = graph.edges.ravel()
    vals = np.tile([1.0, -1.0], m)
    first = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))

    k = graph.triples.shape[0]
    rows = np.repeat(np.arange(k), 3)
    cols = graph.triples.ravel()
    vals = np.tile([1.0, -2.0, 1.0], k)
    second = sp.csr_matrix((vals, (rows, cols)), shape=(k, n))
    return first, second


def assemble_regularizer(graph: AnnotationGraph, alpha: float, beta: float) -> sp.csr_matrix:
    """
    Sparse symmetric A with R(c) = 1/2 c^T A c per coordinate axis, where
    R = alpha * sum_E |c_u - c_v|^2 + beta * sum_T |c_u - 2 c_v + c_w|^2.
    """
    if alpha < 0 or beta < 0:
        raise SolverError(f"alpha and beta must be >= 0, got alpha={alpha}, beta={beta}")
    first, second = difference_operators(graph)
    a = 2.0 * alpha * (first.T @ first) + 2.0 * beta * (second.T @ second)
    return sp.csr_matrix(a)


def regularizer_energy(graph: AnnotationGraph, alpha: float, beta: float,
                       coords: Optional[np.ndarray] = None) -> float:
    """Spring plus elasticity energy summed term by term"""
    c = graph.vertices if coords is None else np.asarray(coords, dtype=float)
    spring = 0.0
    if graph.num_edges:
        spring = float(np.sum((c[graph.edges[:, 0]] - c[graph.edges[:, 1]]) ** 2))
    bending = 0.0
    if graph.triples.shape[0]:
        u, v, w = graph.triples.T
        bending = float(np.sum((c[u] - 2.0 * c[v] + c[w]) ** 2))
    return alpha * spring + beta * bending


def _factorize(a: sp.csr_matrix, viscosity: np.ndarray) -> Tuple[sp.csc_matrix, spla.SuperLU]:
    matrix = sp.csc_matrix(a + sp.diags(viscosity))
    factor = spla.splu(
        matrix,
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )
    return matrix, factor


@dataclass(frozen=True, eq=False)
class SnakeSystem:
    """
    Regularizer matrix with its factorized (A + Gamma), shared read-only by
    every snake run on graphs of the same topology.

    Gamma is gamma * I unless the system was damped per vertex with
    `with_viscosity`; a diagonal Gamma leaves the fixed point A c + g = 0 of
    the update unchanged.
    """
    A: sp.csr_matrix
    gamma: float
    alpha: float
    beta: float
    steps: int
    max_step: float
    _factor: spla.SuperLU = field(repr=False)
    viscosity: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.viscosity is None:
            viscosity = np.full(self.num_vertices, self.gamma)
        else:
            viscosity = np.array(self.viscosity, dtype=float)
        viscosity.setflags(write=False)
        object.__setattr__(self, "viscosity", viscosity)

    @property
    def num_vertices(self) -> int:
        return int(self.A.shape[0])

    @property
    def damped(self) -> bool:
        return bool(np.any(self.viscosity != self.gamma))

    def system_matrix(self) -> sp.csc_matrix:
        return sp.csc_matrix(self.A + sp.diags(self.viscosity))

    def with_viscosity(self, viscosity: np.ndarray) -> "SnakeSystem":
        """Same regularizer refactorized with a per-vertex viscosity"""
        viscosity = np.asarray(viscosity, dtype=float)
        if viscosity.shape != (self.num_vertices,):
            raise SolverError(
                f"Viscosity needs {self.num_vertices} entries, got shape {viscosity.shape}"
            )
        if np.any(viscosity <= 0) or not np.all(np.isfinite(viscosity)):
            raise SolverError("Per-vertex viscosity must be finite and > 0")
        _, factor = _factorize(self.A, viscosity)
        return replace(self, _factor=factor, viscosity=viscosity)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply (A + Gamma)^-1 to each column of `rhs`"""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.num_vertices:
            raise SolverError(
                f"Right-hand side has {rhs.shape[0]} rows, system has {self.num_vertices}"
            )
        return self._factor.solve(np.ascontiguousarray(rhs))

    def energy(self, coords: np.ndarray) -> float:
        """1/2 c^T A c summed over axes"""
        c = np.asarray(coords, dtype=float)
        return 0.5 * float(np.sum(c * (self.A @ c)))

    def update(self, coords: np.ndarray, external_grad: np.ndarray) -> np.ndarray:
        return self.solve(self.viscosity[:, None] * coords - external_grad)


def build_snake_system(graph: AnnotationGraph, alpha: float = DEFAULT_ALPHA,
                       beta: float = DEFAULT_BETA, gamma: float = DEFAULT_GAMMA,
                       steps: int = DEFAULT_STEPS,
                       max_step: float = DEFAULT_TRUNCATION) -> SnakeSystem:
    """Assemble A for `graph` and factorize A + gamma I once"""
    if gamma <= 0:
        raise SolverError(f"Viscosity gamma must be > 0, got {gamma}")
    if steps < 1:
        raise SolverError(f"Snake update count must be >= 1, got {steps}")
    a = assemble_regularizer(graph, alpha, beta)
    matrix, factor = _factorize(a, np.full(graph.num_vertices, float(gamma)))
    logger.debug(
        f"Factorized snake system: n={graph.num_vertices}, nnz={matrix.nnz}, "
        f"alpha={alpha}, beta={beta}, gamma={gamma}"
    )
    return SnakeSystem(A=a, gamma=float(gamma), alpha=float(alpha), beta=float(beta),
                       steps=int(steps), max_step=float(max_step), _factor=factor)


# ─── Separable linear filters ────────────────────────────────────

@lru_cache(maxsize=256)
def axis_operator(n: int, sigma: float, order: int,
                  truncate: float = DEFAULT_KERNEL_TRUNCATE) -> np.ndarray:
    """
    Dense n x n matrix of the 1D filter applied along one axis: Gaussian
    derivative of the given order, or identity / central differences when
    sigma is zero.
    """
    eye = np.eye(n)
    if sigma > 0:
        matrix = ndimage.gaussian_filter1d(eye, sigma, axis=0, order=order,
                                           mode="reflect", truncate=truncate)
    elif order == 0:
        matrix = eye
    elif order == 1:
        matrix = ndimage.correlate1d(eye, [-0.5, 0.0, 0.5], axis=0, mode="nearest")
    elif order == 2:
        matrix = ndimage.correlate1d(eye, [1.0, -2.0, 1.0], axis=0, mode="nearest")
    else:
        raise SolverError(f"Unsupported derivative order {order}")
    matrix = np.array(matrix, dtype=float)
    matrix.setflags(write=False)
    return matrix


def apply_separable(volume: np.ndarray, matrices: Sequence[np.ndarray],
                    transpose: bool = False) -> np.ndarray:
    """Multiply `volume` by one matrix per axis; `transpose` applies the adjoint"""
    out = np.asarray(volume, dtype=float)
    for axis, matrix in enumerate(matrices):
        op = matrix.T if transpose else matrix
        out = np.moveaxis(np.tensordot(op, out, axes=(1, axis)), 0, axis)
    return out


def _orders(dim: int, *axes: int) -> Tuple[int, ...]:
    orders = [0] * dim
    for a in axes:
        orders[a] += 1
    return tuple(orders)


class SmoothedField:
    """
    A scalar volume y convolved with a Gaussian of width sigma, with cached
    Gaussian-derivative volumes. sigma <= 0 skips smoothing and falls back to
    central differences.
    """

    def __init__(self, base: VolumeLike, sigma: float = DEFAULT_SIGMA,
                 truncate: float = DEFAULT_KERNEL_TRUNCATE):
        base_array = np.array(as_array(base), dtype=float, copy=True)
        base_array.setflags(write=False)
        self.base = base_array
        self.sigma = float(sigma)
        self.truncate = float(truncate)
        self._cache: Dict[Tuple[int, ...], np.ndarray] = {}

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.base.shape

    @property
    def dim(self) -> int:
        return self.base.ndim

    def operators(self, orders: Tuple[int, ...]) -> List[np.ndarray]:
        return [axis_operator(n, self.sigma, o, self.truncate)
                for n, o in zip(self.shape, orders)]

    def filtered(self, orders: Tuple[int, ...]) -> np.ndarray:
        if orders not in self._cache:
            volume = apply_separable(self.base, self.operators(orders))
            volume.setflags(write=False)
            self._cache[orders] = volume
        return self._cache[orders]

    def adjoint(self, orders: Tuple[int, ...], volume: np.ndarray) -> np.ndarray:
        """Pull a cotangent on filtered(orders) back onto the base volume"""
        return apply_separable(volume, self.operators(orders), transpose=True)

    @property
    def smoothed(self) -> np.ndarray:
        return self.filtered(_orders(self.dim))

    def derivative(self, axis: int) -> np.ndarray:
        return self.filtered(_orders(self.dim, axis))

    def second_derivative(self, axis_a: int, axis_b: int) -> np.ndarray:
        return self.filtered(_orders(self.dim, axis_a, axis_b))


# ─── Multilinear sampling ────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class Stencil:
    """Multilinear interpolation corners and weights for a set of points"""
    corners: np.ndarray        # (n, 2**dim) flat C-order voxel indices
    weights: np.ndarray        # (n, 2**dim)
    weight_grads: np.ndarray   # (n, 2**dim, dim), zero along clamped axes
    outside: np.ndarray        # (n, dim) True where the point left the grid on that axis

    def sample(self, volume: np.ndarray) -> np.ndarray:
        return np.einsum("nk,nk->n", self.weights, volume.ravel()[self.corners])

    def sample_gradient(self, volume: np.ndarray) -> np.ndarray:
        """Derivative of the interpolant with respect to the point, (n, dim)"""
        return np.einsum("nkd,nk->nd", self.weight_grads, volume.ravel()[self.corners])

    def scatter(self, values: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Adjoint of `sample`: spread per-point values back onto the grid"""
        out = np.zeros(int(np.prod(shape)))
        np.add.at(out, self.corners.ravel(), (self.weights * values[:, None]).ravel())
        return out.reshape(shape)


def multilinear_stencil(points: np.ndarray, shape: Sequence[int]) -> Stencil:
    """Interpolation stencil with coordinates clamped to the valid box"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    shape_arr = np.asarray(shape)
    upper = (shape_arr - 1).astype(float)
    dim = len(shape_arr)
    outside = (points < 0.0) | (points > upper)
    clamped = np.clip(points, 0.0, upper)
    base = np.minimum(np.floor(clamped).astype(int), np.maximum(shape_arr - 2, 0))
    frac = clamped - base

    offsets = np.array(list(itertools.product((0, 1), repeat=dim)))
    idx = np.minimum(base[:, None, :] + offsets[None, :, :], shape_arr - 1)
    factors = np.where(offsets[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    weights = np.prod(factors, axis=2)

    signs = np.where(offsets == 1, 1.0, -1.0)
    grads = np.empty(factors.shape)
    for a in range(dim):
        others = np.delete(factors, a, axis=2)
        grads[:, :, a] = signs[None, :, a] * np.prod(others, axis=2)
    grads *= ~outside[:, None, :]

    corners = np.ravel_multi_index(tuple(np.moveaxis(idx, 2, 0)), tuple(shape_arr))
    return Stencil(corners=corners, weights=weights, weight_grads=grads, outside=outside)


# ─── External-energy drivers ─────────────────────────────────────

def full_weight_for(grid: GridSpec, d: float, stiffness: float = DEFAULT_FULL_WEIGHT) -> float:
    """Multiplier on the mean-squared L giving restoring force ~ stiffness per voxel of offset"""
    return stiffness * grid.n_voxels / (4.0 * d)


class FullDriver:
    """External energy weight * L(c, y), L the mean squared distance-map error"""
    name = "full"

    def __init__(self, y: VolumeLike, d: float = DEFAULT_TRUNCATION, weight: float = 1.0):
        self.y = as_array(y)
        self.grid = GridSpec(self.y.shape)
        self.d = float(d)
        self.weight = float(weight)

    def loss_gradient(self, graph: AnnotationGraph) -> Tuple[float, np.ndarray]:
        """Unweighted L and dL/dc at the graph's coordinates"""
        dmap = distance_transform(graph, self.grid, self.d)
        residual = dmap.values.data - self.y
        upstream = 2.0 * residual / residual.size
        return float(np.mean(residual ** 2)), distance_subgradient(dmap, graph, upstream)

    def gradient(self, graph: AnnotationGraph) -> Tuple[np.ndarray, Dict[str, float]]:
        loss, grad = self.loss_gradient(graph)
        return self.weight * grad, {"L": loss}

    def stiffness(self, graph: AnnotationGraph) -> np.ndarray:
        """
        Largest eigenvalue per vertex of the Gauss-Newton block of weight * L.

        Interior vertices of a curve own a strip of voxels on either side; an
        open end also owns the half-disc of radius d beyond it, which makes its
        block many times stiffer than its neighbours'.
        """
        dmap = distance_transform(graph, self.grid, self.d)
        upstream = np.full(self.grid.shape, 2.0 * self.weight / self.grid.n_voxels)
        blocks = gauss_newton_blocks(dmap, graph, upstream)
        if blocks.shape[0] == 0:
            return np.zeros(0)
        return np.linalg.eigvalsh(blocks)[:, -1]

    def damped_system(self, system: SnakeSystem, graph: AnnotationGraph,
                      damping: float = DEFAULT_DAMPING) -> SnakeSystem:
        """
        `system` with each vertex's viscosity raised to at least damping times
        its stiffness at `graph`. damping = 0 returns `system` unchanged.
        """
        if damping < 0:
            raise SolverError(f"damping must be >= 0, got {damping}")
        if damping == 0 or graph.num_vertices == 0:
            return system
        viscosity = np.maximum(system.gamma, damping * self.stiffness(graph))
        if np.all(viscosity == system.gamma):
            return system
        logger.debug(
            f"Damped {int(np.sum(viscosity > system.gamma))} of {graph.num_vertices} vertices, "
            f"viscosity up to {viscosity.max():.3g}"
        )
        return system.with_viscosity(viscosity)


class FastDriver:
    """External energy weight * S(c, y) = weight * sum_v (y * G)[c_v]"""
    name = "fast"

    def __init__(self, field: SmoothedField, weight: float = 1.0):
        self.field = field
        self.weight = float(weight)

    def stencil(self, graph: AnnotationGraph) -> Stencil:
        return multilinear_stencil(graph.vertices, self.field.shape)

    def gradient_from_stencil(self, stencil: Stencil) -> np.ndarray:
        grad = np.stack([stencil.sample(self.field.derivative(a))
                         for a in range(self.field.dim)], axis=1)
        grad[stencil.outside] = 0.0
        return self.weight * grad

    def gradient(self, graph: AnnotationGraph) -> Tuple[np.ndarray, Dict[str, float]]:
        stencil = self.stencil(graph)
        grad = self.gradient_from_stencil(stencil)
        info = {
            "S": float(stencil.sample(self.field.smoothed).sum()),
            "clamped": float(np.any(stencil.outside, axis=1).sum()),
        }
        return grad, info


def _check_finite(grad: np.ndarray):
    bad = ~np.all(np.isfinite(grad), axis=1)
    if np.any(bad):
        raise NonFiniteGradientError(int(np.flatnonzero(bad)[0]))


def _check_system(system: SnakeSystem, graph: AnnotationGraph):
    if system.num_vertices != graph.num_vertices:
        raise SolverError(
            f"Snake system factorized for {system.num_vertices} vertices, graph has "
            f"{graph.num_vertices}"
        )


def snake_step_full(system: SnakeSystem, graph: AnnotationGraph, y: VolumeLike,
                    d: float = DEFAULT_TRUNCATION, weight: float = 1.0) -> AnnotationGraph:
    """One semi-implicit update driven by the distance-map loss"""
    _check_system(system, graph)
    grad, _ = FullDriver(y, d, weight).gradient(graph)
    _check_finite(grad)
    return graph.with_vertices(system.update(graph.vertices, grad))


def snake_step_fast(system: SnakeSystem, graph: AnnotationGraph, field: SmoothedField,
                    weight: float = 1.0) -> AnnotationGraph:
    """One semi-implicit update driven by the smoothed-field gradient"""
    _check_system(system, graph)
    grad, info = FastDriver(field, weight).gradient(graph)
    _check_finite(grad)
    if info["clamped"]:
        logger.warning(f"⚠️  {int(info['clamped'])} vertices outside the grid were clamped")
    return graph.with_vertices(system.update(graph.vertices, grad))


@dataclass
class StepReport:
    """One CSV row of a snake run"""
    step: int
    residual: float
    L: float = float("nan")
    R: float = float("nan")
    S: float = float("nan")
    clamped: int = 0


def run_snake(system: SnakeSystem, graph: AnnotationGraph, driver,
              steps: Optional[int] = None,
              report: Optional[List[StepReport]] = None) -> Tuple[AnnotationGraph, List[float]]:
    """
    Apply `steps` (default system.steps) updates of `driver`.

    Returns:
        (final graph, per-step residual |c^{t+1} - c^t|_inf)

    Raises:
        DivergenceError when a residual is non-finite or exceeds system.max_step
    """
    steps = system.steps if steps is None else int(steps)
    if steps < 1:
        raise SolverError(f"run_snake needs at least one step, got {steps}")
    _check_system(system, graph)

    coords = np.array(graph.vertices, dtype=float)
    residuals: List[float] = []
    for t in range(steps):
        current = graph.with_vertices(coords)
        grad, info = driver.gradient(current)
        bad = ~np.all(np.isfinite(grad), axis=1)
        if np.any(bad):
            raise DivergenceError(
                t, f"Non-finite external gradient at vertex {int(np.flatnonzero(bad)[0])}, step {t}"
            )
        updated = system.update(coords, grad)
        residual = float(np.max(np.abs(updated - coords))) if coords.size else 0.0
        if report is not None:
            report.append(StepReport(
                step=t,
                residual=residual,
                L=info.get("L", float("nan")),
                R=system.energy(coords),
                S=info.get("S", float("nan")),
                clamped=int(info.get("clamped", 0)),
            ))
        if not np.isfinite(residual):
            raise DivergenceError(t, f"Snake diverged at step {t}: non-finite residual")
        if residual > system.max_step:
            raise DivergenceError(
                t, f"Snake diverged at step {t}: residual {residual:.3g} exceeds "
                   f"max_step {system.max_step:.3g} (gamma={system.gamma})"
            )
        residuals.append(residual)
        coords = updated

    logger.debug(f"Snake run ({driver.name}): residuals {residuals[0]:.3g} -> {residuals[-1]:.3g}")
    return graph.with_vertices(coords), residuals


def stationarity_residual(system: SnakeSystem, graph: AnnotationGraph, y: VolumeLike,
                          d: float = DEFAULT_TRUNCATION, weight: float = 1.0,
                          reference: Optional[AnnotationGraph] = None) -> float:
    """
    |A c + weight * dL/dc(c)| / max(1, |weight * dL/dc(c0)|), c0 being
    `reference` (defaults to the graph itself).
    """
    driver = FullDriver(y, d, weight)
    grad, _ = driver.gradient(graph)
    defect = system.A @ graph.vertices + grad
    grad0 = grad if reference is None else driver.gradient(reference)[0]
    return float(np.linalg.norm(defect) / max(1.0, np.linalg.norm(grad0)))
