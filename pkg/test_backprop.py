#!/usr/bin/env python3
"""
Tests for the training-mode gradients: baseline, envelope (full), simple and the
reverse sweep through recorded fast-driver updates
"""

import numpy as np
import pytest
from scipy import ndimage

from conftest import (
    central_difference,
    fast_objective,
    relative_error,
    unrolled_full_gradient,
)
from snake_refine.backprop import (
    JACOBIAN_GAUSSIAN,
    JACOBIAN_INTERPOLANT,
    LOSS_MAE,
    Tape,
    TrainingMode,
    grad_baseline,
    grad_fast,
    grad_full,
    grad_simple,
    loss_and_grad_y,
    run_fast_recorded,
)
from snake_refine.distance_field import distance_transform
from snake_refine.errors import ConfigError, TapeMismatchError
from snake_refine.geometry_graph import GridSpec, build_graph
from snake_refine.snake_core import (
    FullDriver,
    SmoothedField,
    build_snake_system,
    full_weight_for,
    run_snake,
    stationarity_residual,
)


def cosine(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def small_instance(seed):
    """Short chain on an 8 x 8 grid (every fourth seed a 6 x 6 x 6 grid) with a smooth random field"""
    rng = np.random.default_rng(seed)
    dim = 3 if seed % 4 == 3 else 2
    shape = (6, 6, 6) if dim == 3 else (8, 8)
    start = rng.uniform(1.6, 2.4, size=dim) + 0.13
    heading = np.abs(rng.normal(size=dim)) + 0.2
    heading /= np.linalg.norm(heading)
    vertices = start + 0.6 * np.arange(4)[:, None] * heading
    graph = build_graph(vertices, [(0, 1), (1, 2), (2, 3)])
    y = 3.0 * ndimage.gaussian_filter(rng.normal(size=shape), 1.0) + 2.0
    return rng, graph, y


# ─── Loss ────────────────────────────────────────────────────────

def test_loss_is_zero_on_own_distance_map(straight_line):
    """Test y = D(c) gives zero loss and gradient"""
    y = distance_transform(straight_line, GridSpec((24, 24)), 20.0).values
    lg = loss_and_grad_y(straight_line, y, 20.0)
    assert lg.loss == 0.0
    assert np.all(lg.gradient == 0.0)


def test_loss_constant_offset(straight_line):
    """Test y = D(c) + 1 gives L = 1 and gradient 2/N"""
    y = distance_transform(straight_line, GridSpec((24, 24)), 20.0).values.data + 1.0
    lg = loss_and_grad_y(straight_line, y, 20.0)
    assert lg.loss == pytest.approx(1.0)
    assert np.allclose(lg.gradient, 2.0 / y.size)


def test_loss_gradient_matches_finite_differences(rng):
    """Test dL/dy on a random 8 x 8 volume"""
    graph = build_graph([(1.3, 2.2), (4.1, 5.6), (6.4, 3.3)], [(0, 1), (1, 2)])
    y = rng.normal(size=(8, 8)) * 3.0
    analytic = loss_and_grad_y(graph, y, 20.0).gradient
    numeric = central_difference(lambda v: loss_and_grad_y(graph, v, 20.0).loss,
                                 y, range(y.size), h=1e-4)
    assert relative_error(numeric, analytic.ravel()) < 1e-6


def test_mae_loss_and_gradient(straight_line):
    """Test y = D(c) +/- 1 gives L = 1 and a gradient of sign / N"""
    target = distance_transform(straight_line, GridSpec((24, 24)), 20.0).values.data
    signs = np.where(np.indices(target.shape).sum(axis=0) % 2 == 0, 1.0, -1.0)
    lg = loss_and_grad_y(straight_line, target + signs, 20.0, loss=LOSS_MAE)
    assert lg.loss == pytest.approx(1.0)
    assert np.allclose(lg.gradient, signs / target.size)
    exact = loss_and_grad_y(straight_line, target, 20.0, loss=LOSS_MAE)
    assert exact.loss == 0.0 and np.all(exact.gradient == 0.0)
    assert np.array_equal(grad_full(straight_line, target + signs, 20.0, loss=LOSS_MAE),
                          lg.gradient)


def test_unknown_loss_is_rejected(straight_line):
    """Test loss names other than mse and mae"""
    with pytest.raises(ConfigError):
        loss_and_grad_y(straight_line, np.zeros((24, 24)), 20.0, loss="huber")


def test_baseline_is_loss_gradient_at_annotation(y_graph, rng):
    """Test baseline mode does no adjustment"""
    y = rng.normal(size=(20, 20))
    assert np.array_equal(grad_baseline(y_graph, y), loss_and_grad_y(y_graph, y).gradient)


def test_training_mode_parse():
    """Test case-insensitive parsing and rejection of unknown modes"""
    assert TrainingMode.parse("FAST") is TrainingMode.FAST
    assert TrainingMode.parse(TrainingMode.FULL) is TrainingMode.FULL
    with pytest.raises(ConfigError):
        TrainingMode.parse("adam")


# ─── Solve adjoint ───────────────────────────────────────────────

def test_solve_is_self_adjoint(y_graph, rng):
    """Test <Mx, z> == <x, Mz> for M = (A + gamma I)^-1"""
    system = build_snake_system(y_graph, alpha=0.4, beta=0.2, gamma=3.0)
    x = rng.normal(size=(y_graph.num_vertices, 2))
    z = rng.normal(size=(y_graph.num_vertices, 2))
    assert np.sum(system.solve(x) * z) == pytest.approx(np.sum(x * system.solve(z)), rel=1e-9)


# ─── Fast-driver tape ────────────────────────────────────────────

@pytest.mark.parametrize("seed", range(20))
def test_grad_fast_matches_finite_differences(seed):
    """Test the reverse sweep against central differences over 20 random voxels"""
    rng, graph, y = small_instance(seed)
    d, sigma, weight = 20.0, 1.0, 2.0
    steps = 3 if seed % 2 else 5
    system = build_snake_system(graph, gamma=10.0, steps=steps)

    adjusted, _, tape = run_fast_recorded(system, graph, SmoothedField(y, sigma), weight)
    analytic = grad_fast(tape, system, adjusted, y, d, jacobian=JACOBIAN_INTERPOLANT)

    indices = rng.choice(y.size, size=20, replace=False)
    numeric = central_difference(fast_objective(system, graph, sigma, weight, d), y, indices, h=1e-5)
    assert relative_error(numeric, analytic.ravel()[indices]) < 1e-3


@pytest.mark.parametrize("seed", range(6))
def test_grad_fast_with_per_vertex_viscosity(seed):
    """Test the reverse sweep through a system damped per vertex against central differences"""
    rng, graph, y = small_instance(seed)
    d, sigma, weight = 20.0, 1.0, 2.0
    base = build_snake_system(graph, gamma=10.0, steps=4)
    system = base.with_viscosity(10.0 * (1.0 + rng.uniform(0.0, 3.0, size=graph.num_vertices)))
    assert system.damped

    adjusted, _, tape = run_fast_recorded(system, graph, SmoothedField(y, sigma), weight)
    analytic = grad_fast(tape, system, adjusted, y, d)

    indices = rng.choice(y.size, size=20, replace=False)
    numeric = central_difference(fast_objective(system, graph, sigma, weight, d), y, indices, h=1e-5)
    assert relative_error(numeric, analytic.ravel()[indices]) < 1e-3


@pytest.mark.parametrize("seed", range(4))
def test_grad_fast_mae_matches_finite_differences(seed):
    """Test the reverse sweep under the absolute-error loss"""
    rng, graph, y = small_instance(seed)
    d, sigma, weight = 20.0, 1.0, 2.0
    system = build_snake_system(graph, gamma=10.0, steps=3)

    def objective(volume):
        adjusted, _, _ = run_fast_recorded(system, graph, SmoothedField(volume, sigma), weight)
        return loss_and_grad_y(adjusted, volume, d, loss=LOSS_MAE).loss

    adjusted, _, tape = run_fast_recorded(system, graph, SmoothedField(y, sigma), weight)
    analytic = grad_fast(tape, system, adjusted, y, d, loss=LOSS_MAE)
    residual = y - distance_transform(adjusted, GridSpec(y.shape), d).values.data
    candidates = np.flatnonzero(np.abs(residual) > 1e-3)
    indices = rng.choice(candidates, size=20, replace=False)
    numeric = central_difference(objective, y, indices, h=1e-6)
    assert relative_error(numeric, analytic.ravel()[indices]) < 1e-3


def test_grad_fast_without_updates_is_loss_gradient(straight_line, rng):
    """Test an empty tape reduces to dL/dy"""
    y = rng.normal(size=(24, 24))
    field = SmoothedField(y, 1.0)
    tape = Tape(field=field, weight=8.0, final=np.array(straight_line.vertices))
    system = build_snake_system(straight_line)
    grad = grad_fast(tape, system, straight_line, y)
    assert np.array_equal(grad, loss_and_grad_y(straight_line, y).gradient)


def test_grad_fast_on_flat_smoothing_equals_simple(straight_line, rng):
    """Test a field smoothed flat leaves the tape term at zero"""
    y = rng.normal(size=(24, 24)) + 5.0
    system = build_snake_system(straight_line, alpha=0.0, steps=4)
    adjusted, _, tape = run_fast_recorded(system, straight_line, SmoothedField(y, 1000.0), 8.0)
    assert np.abs(adjusted.vertices - straight_line.vertices).max() < 1e-4
    fast = grad_fast(tape, system, adjusted, y)
    simple = grad_simple(adjusted, y)
    assert relative_error(fast, simple) < 1e-4


def test_tape_replay_is_bit_exact(fig4_fixture):
    """Test replaying the tape reproduces the final coordinates exactly"""
    system = build_snake_system(fig4_fixture.annotation, steps=7)
    adjusted, _, tape = run_fast_recorded(system, fig4_fixture.annotation,
                                          SmoothedField(fig4_fixture.field, 1.0), 8.0)
    assert len(tape) == 7
    assert np.array_equal(tape.replay(system), adjusted.vertices)


def test_grad_fast_differs_from_simple_on_fixture(fig4_fixture):
    """Test the tape term is not zero on the gap fixture"""
    y = fig4_fixture.field
    system = build_snake_system(fig4_fixture.annotation)
    adjusted, _, tape = run_fast_recorded(system, fig4_fixture.annotation, SmoothedField(y, 1.0), 8.0)
    fast = grad_fast(tape, system, adjusted, y, fig4_fixture.truncation)
    simple = grad_simple(adjusted, y, fig4_fixture.truncation)
    assert np.linalg.norm(fast - simple) > 1e-6 * np.linalg.norm(simple)


def test_gaussian_jacobian_agrees_with_interpolant():
    """Test the second-derivative Jacobian gives nearly the same total gradient"""
    _, graph, y = small_instance(0)
    system = build_snake_system(graph, steps=5)
    adjusted, _, tape = run_fast_recorded(system, graph, SmoothedField(y, 1.0), 2.0)
    exact = grad_fast(tape, system, adjusted, y, jacobian=JACOBIAN_INTERPOLANT)
    smooth = grad_fast(tape, system, adjusted, y, jacobian=JACOBIAN_GAUSSIAN)
    assert cosine(exact, smooth) > 0.99
    with pytest.raises(ConfigError):
        tape.jacobian(tape.steps[0], "spline")


def test_tape_mismatch_errors(straight_line, rng):
    """Test tapes used with the wrong coordinates, volume or system"""
    y = rng.normal(size=(24, 24))
    system = build_snake_system(straight_line, steps=2)
    adjusted, _, tape = run_fast_recorded(system, straight_line, SmoothedField(y, 1.0), 1.0)
    with pytest.raises(TapeMismatchError):
        grad_fast(tape, system, adjusted.translated([0.5, 0.0]), y)
    with pytest.raises(TapeMismatchError):
        grad_fast(tape, system, adjusted, np.zeros((30, 30)))
    with pytest.raises(TapeMismatchError):
        grad_fast(Tape(field=tape.field, weight=1.0), system, adjusted, y)


# ─── Envelope gradient ───────────────────────────────────────────

def test_grad_full_zero_when_field_matches(straight_line):
    """Test y = D(c*) gives zero gradient"""
    y = distance_transform(straight_line, GridSpec((24, 24)), 20.0).values
    assert np.all(grad_full(straight_line, y, 20.0) == 0.0)


def test_envelope_matches_unrolled_derivative(fig4_fixture):
    """Test grad_full against the total derivative through ten damped full-driver updates"""
    fixture = fig4_fixture
    y = fixture.field.data
    d = fixture.truncation
    weight = full_weight_for(fixture.grid, d)
    driver = FullDriver(y, d, weight)
    system = driver.damped_system(build_snake_system(fixture.annotation, gamma=10.0, steps=10),
                                  fixture.annotation)
    assert system.damped
    c_star, _ = run_snake(system, fixture.annotation, driver)

    assert stationarity_residual(system, c_star, y, d, weight, reference=fixture.annotation) <= 0.1
    unrolled = unrolled_full_gradient(system, fixture.annotation, y, d, weight)
    assert cosine(grad_full(c_star, y, d), unrolled) >= 0.99
