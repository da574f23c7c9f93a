"""
Shared fixtures and derivative oracles for the snake-refine test suite.
"""

import numpy as np
import pytest

from snake_refine.backprop import loss_and_grad_y, reverse_sweep, run_fast_recorded
from snake_refine.distance_field import distance_jvp, distance_transform
from snake_refine.geometry_graph import GridSpec, build_graph
from snake_refine.snake_core import FullDriver, SmoothedField
from snake_refine.synth_data import make_fig4_fixture


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def straight_line():
    """Nine evenly spaced vertices along x on a 24 x 24 grid"""
    vertices = [(6.0 + 1.5 * i, 12.0) for i in range(9)]
    return build_graph(vertices, [(i, i + 1) for i in range(8)])


@pytest.fixture
def y_graph():
    """Three arms meeting at vertex 0"""
    vertices = [(10.0, 10.0), (7.0, 10.0), (4.0, 10.0), (12.0, 12.5), (14.0, 15.0),
                (12.0, 7.5), (14.0, 5.0)]
    edges = [(0, 1), (1, 2), (0, 3), (3, 4), (0, 5), (5, 6)]
    return build_graph(vertices, edges)


@pytest.fixture(scope="session")
def fig4_fixture():
    return make_fig4_fixture()


def random_chain(rng, n, dim=2, low=2.0, high=10.0, closed=False):
    """Random polyline with off-integer coordinates"""
    vertices = rng.uniform(low, high, size=(n, dim)) + 0.37
    edges = [(i, i + 1) for i in range(n - 1)]
    if closed and n >= 3:
        edges.append((n - 1, 0))
    return build_graph(vertices, edges)


def central_difference(fn, x, indices, h=1e-5):
    """Central differences of scalar fn at the flat `indices` of array x"""
    x = np.array(x, dtype=float)
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        plus, minus = x.copy(), x.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        out[k] = (fn(plus) - fn(minus)) / (2.0 * h)
    return out


def relative_error(approx, exact):
    approx, exact = np.ravel(approx), np.ravel(exact)
    return float(np.linalg.norm(approx - exact) / max(np.linalg.norm(exact), 1e-300))


def fast_objective(system, graph, sigma, weight, d):
    """y -> L(c_dagger(y), y) for the fast driver"""
    def objective(y):
        adjusted, _, _ = run_fast_recorded(system, graph, SmoothedField(y, sigma), weight)
        return loss_and_grad_y(adjusted, y, d).loss
    return objective


def unrolled_full_gradient(system, graph, y, d, weight, eps=1e-5):
    """
    Total derivative of (L + R / weight)(c^T(y), y) through the full-driver
    updates, by reverse sweep with finite-difference Hessian-vector products
    of dL/dc.
    """
    y = np.asarray(y, dtype=float)
    grid = GridSpec(y.shape)
    driver = FullDriver(y, d, 1.0)

    coords = [np.array(graph.vertices)]
    for _ in range(system.steps):
        _, grad = driver.loss_gradient(graph.with_vertices(coords[-1]))
        coords.append(system.update(coords[-1], weight * grad))

    final = graph.with_vertices(coords[-1])
    lg = loss_and_grad_y(final, y, d)
    _, grad_c = driver.loss_gradient(final)
    cotangent = grad_c + (system.A @ coords[-1]) / weight
    y_bar = np.zeros_like(y)

    def step_vjp(t, w):
        nonlocal y_bar
        current = graph.with_vertices(coords[t])
        dmap = distance_transform(current, grid, d)
        y_bar = y_bar + (2.0 * weight / y.size) * distance_jvp(dmap, current, w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return np.zeros_like(w)
        direction = w / norm
        _, g_plus = driver.loss_gradient(graph.with_vertices(coords[t] + eps * direction))
        _, g_minus = driver.loss_gradient(graph.with_vertices(coords[t] - eps * direction))
        return -weight * norm * (g_plus - g_minus) / (2.0 * eps)

    reverse_sweep(system, system.steps, cotangent, step_vjp)
    return lg.gradient + y_bar
