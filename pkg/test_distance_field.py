#!/usr/bin/env python3
"""
Tests for the truncated distance transform and its vertex subgradients
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, random_chain, relative_error
from snake_refine.distance_field import (
    ScalarVolume,
    distance_jvp,
    distance_subgradient,
    distance_transform,
    gauss_newton_blocks,
    point_segment_distance,
    rasterize_graph,
)
from snake_refine.errors import GraphError
from snake_refine.geometry_graph import GridSpec, build_graph


def brute_force_distances(graph, grid):
    """(N, E) distances from every voxel centre to every edge"""
    points = grid.voxel_coordinates()
    out = np.empty((points.shape[0], graph.num_edges))
    for e, (u, v) in enumerate(graph.edges):
        for i, q in enumerate(points):
            out[i, e] = point_segment_distance(q, graph.vertices[u], graph.vertices[v])[0]
    return out


def test_point_segment_distance():
    """Test interior, endpoint and degenerate projections"""
    dist, phi = point_segment_distance([1.0, 1.0], [2.0, 0.0], [0.0, 0.0])
    assert dist == pytest.approx(1.0)
    assert phi == pytest.approx(0.5)
    dist, phi = point_segment_distance([5.0, 0.0], [2.0, 0.0], [0.0, 0.0])
    assert dist == pytest.approx(3.0)
    assert phi == 1.0
    dist, phi = point_segment_distance([0.0, 4.0], [0.0, 1.0], [0.0, 1.0])
    assert dist == pytest.approx(3.0)
    assert phi == 0.5


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), d=st.sampled_from([1.5, 3.0, 20.0]))
def test_transform_matches_brute_force_2d(seed, d):
    """Test the bounding-box transform against an exhaustive scan"""
    rng = np.random.default_rng(seed)
    graph = random_chain(rng, 5, low=1.0, high=9.0)
    grid = GridSpec((12, 11))
    dmap = distance_transform(graph, grid, d)
    expected = np.minimum(brute_force_distances(graph, grid).min(axis=1), d)
    assert np.allclose(dmap.values.data.ravel(), expected, atol=1e-12)
    assert np.all(dmap.values.data <= d)
    assert np.all(dmap.values.data[np.unravel_index(dmap.active_index, grid.shape)] < d)


def test_transform_matches_brute_force_3d(rng):
    """Test a 3D chain"""
    graph = random_chain(rng, 4, dim=3, low=1.0, high=6.0)
    grid = GridSpec((8, 7, 9))
    dmap = distance_transform(graph, grid, 2.5)
    expected = np.minimum(brute_force_distances(graph, grid).min(axis=1), 2.5)
    assert np.allclose(dmap.values.data.ravel(), expected, atol=1e-12)


def test_ties_go_to_lowest_edge():
    """Test that coincident edges resolve to the first one"""
    graph = build_graph([(2.0, 2.0), (6.0, 2.0), (2.0, 2.0), (6.0, 2.0)], [(0, 1), (2, 3)])
    dmap = distance_transform(graph, GridSpec((9, 5)), 3.0)
    assert dmap.active_index.size > 0
    assert np.all(dmap.active_edge == 0)


def test_empty_graph_is_all_truncated():
    """Test a graph without edges"""
    graph = build_graph(np.zeros((0, 2)), [])
    dmap = distance_transform(graph, GridSpec((4, 4)), 5.0)
    assert np.all(dmap.values.data == 5.0)
    assert dmap.active_index.size == 0


def test_transform_rejects_bad_input(straight_line):
    """Test invalid truncation and mismatched dimensionality"""
    with pytest.raises(GraphError):
        distance_transform(straight_line, GridSpec((24, 24)), 0.0)
    with pytest.raises(GraphError):
        distance_transform(straight_line, GridSpec((24, 24, 24)), 5.0)


def safe_voxels(graph, grid, d, margin=1e-3):
    """Voxels away from ties, the truncation level and the graph itself"""
    dists = np.sort(brute_force_distances(graph, grid), axis=1)
    best = dists[:, 0]
    second = dists[:, 1] if dists.shape[1] > 1 else np.full_like(best, np.inf)
    return (second - best > margin) & (best < d - margin) & (best > margin)


@pytest.mark.parametrize("seed", range(24))
def test_subgradient_matches_finite_differences(seed):
    """Test dD/dc against central differences with ties excluded (every third seed in 3D)"""
    rng = np.random.default_rng(seed)
    if seed % 3 == 2:
        grid, d = GridSpec((12, 11, 10)), 5.0
        graph = random_chain(rng, 4, dim=3, low=1.5, high=8.0)
    else:
        grid, d = GridSpec((14, 13)), 6.0
        graph = random_chain(rng, 5, low=2.0, high=10.0)
    mask = safe_voxels(graph, grid, d).reshape(grid.shape)
    upstream = rng.normal(size=grid.shape) * mask

    def objective(flat_coords):
        moved = graph.with_vertices(flat_coords.reshape(graph.vertices.shape))
        return float(np.sum(distance_transform(moved, grid, d).values.data * upstream))

    dmap = distance_transform(graph, grid, d)
    analytic = distance_subgradient(dmap, graph, upstream)
    numeric = central_difference(objective, graph.vertices.ravel(),
                                 range(graph.vertices.size), h=1e-6)
    assert relative_error(numeric, analytic.ravel()) < 1e-4


def test_jvp_is_adjoint_of_subgradient(rng):
    """Test <jvp(u), w> == <u, vjp(w)>"""
    graph = random_chain(rng, 6, dim=3, low=1.0, high=7.0)
    grid = GridSpec((9, 9, 9))
    dmap = distance_transform(graph, grid, 4.0)
    direction = rng.normal(size=graph.vertices.shape)
    upstream = rng.normal(size=grid.shape)
    lhs = np.sum(distance_jvp(dmap, graph, direction) * upstream)
    rhs = np.sum(direction * distance_subgradient(dmap, graph, ScalarVolume(upstream)))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_gauss_newton_blocks_match_subgradient_outer_products(rng):
    """Test each block against sum_q w_q g_q g_q^T built from per-voxel subgradients"""
    graph = random_chain(rng, 4, low=2.0, high=8.0)
    grid = GridSpec((11, 11))
    dmap = distance_transform(graph, grid, 4.0)
    weights = rng.uniform(0.1, 1.0, size=grid.shape)
    blocks = gauss_newton_blocks(dmap, graph, weights)
    assert blocks.shape == (graph.num_vertices, 2, 2)

    expected = np.zeros_like(blocks)
    for q in dmap.active_index:
        indicator = np.zeros(grid.n_voxels)
        indicator[q] = 1.0
        g = distance_subgradient(dmap, graph, indicator.reshape(grid.shape))
        expected += weights.flat[q] * np.einsum("va,vb->vab", g, g)
    assert np.allclose(blocks, expected, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(blocks) >= -1e-12)
    with pytest.raises(GraphError):
        gauss_newton_blocks(dmap, graph, np.ones((3, 3)))


def test_subgradient_splits_by_foot_parameter():
    """Test the voxel above an edge midpoint pulls both endpoints equally"""
    graph = build_graph([(2.0, 4.0), (6.0, 4.0)], [(0, 1)])
    grid = GridSpec((9, 9))
    dmap = distance_transform(graph, grid, 10.0)
    upstream = np.zeros(grid.shape)
    upstream[4, 6] = 1.0
    grad = distance_subgradient(dmap, graph, upstream)
    assert np.allclose(grad, [[0.0, -0.5], [0.0, -0.5]])


def test_subgradient_checks_shapes(straight_line):
    """Test upstream shape and vertex count validation"""
    grid = GridSpec((24, 24))
    dmap = distance_transform(straight_line, grid, 5.0)
    with pytest.raises(GraphError):
        distance_subgradient(dmap, straight_line, np.zeros((3, 3)))
    other = build_graph([(1.0, 1.0), (3.0, 1.0)], [(0, 1)])
    with pytest.raises(GraphError):
        distance_subgradient(dmap, other, np.zeros(grid.shape))


def test_rasterize_graph(straight_line):
    """Test the centerline mask covers the line row and nothing far from it"""
    mask = rasterize_graph(straight_line, GridSpec((24, 24)))
    assert mask[6:19, 12].all()
    assert not mask[:, :11].any()
    assert not mask[:, 14:].any()
