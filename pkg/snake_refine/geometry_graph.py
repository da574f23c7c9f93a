"""
Annotation graphs: polyline networks whose vertex coordinates may move while the
edge topology stays fixed.

Coordinates are continuous voxel-space positions; voxel centres sit at integer
coordinates and coordinate k indexes volume axis k.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from snake_refine.errors import (
    DuplicateEdgeError,
    EmptyGraphError,
    GraphError,
    SelfLoopError,
    VertexIndexError,
)

logger = logging.getLogger(__name__)

# Sinusoids per axis in the smooth perturbation field
PERTURBATION_TERMS = 8


@dataclass(frozen=True)
class GridSpec:
    """Regular 2D/3D voxel grid, extents in voxels per axis"""
    shape: Tuple[int, ...]

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) not in (2, 3):
            raise GraphError(f"Grid must be 2D or 3D, got {len(shape)} axes")
        if any(s < 1 for s in shape):
            raise GraphError(f"Grid extents must be >= 1, got {shape}")
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.shape))

    def voxel_coordinates(self) -> np.ndarray:
        """All voxel centres as an (N, dim) array, C order over the volume axes"""
        axes = np.meshgrid(*[np.arange(s, dtype=float) for s in self.shape], indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1)

    def contains(self, points: np.ndarray, margin: float = 0.0) -> bool:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.size == 0:
            return True
        upper = np.asarray(self.shape, dtype=float) - 1.0 - margin
        return bool(np.all(points >= margin) and np.all(points <= upper))


@dataclass(frozen=True, eq=False)
class AnnotationGraph:
    """
    Vertices with continuous coordinates plus undirected edges.

    `triples` holds every (u, v, w) with (u, v) and (v, w) in the edge set and
    degree(v) == 2. Instances are immutable; coordinate updates go through
    `with_vertices`, which keeps the topology.
    """
    vertices: np.ndarray
    edges: np.ndarray
    triples: np.ndarray = field(repr=False)

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vertices.shape[1])

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_vertices)

    def neighbors(self) -> List[List[int]]:
        """Sorted neighbour lists per vertex"""
        adjacency: List[List[int]] = [[] for _ in range(self.num_vertices)]
        for u, v in self.edges:
            adjacency[int(u)].append(int(v))
            adjacency[int(v)].append(int(u))
        return [sorted(a) for a in adjacency]

    def key_nodes(self) -> np.ndarray:
        """Endpoints and junctions: connected vertices whose degree is not 2"""
        deg = self.degrees()
        return np.flatnonzero((deg != 2) & (deg > 0))

    def edge_lengths(self) -> np.ndarray:
        if self.num_edges == 0:
            return np.zeros(0)
        diff = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        return np.linalg.norm(diff, axis=1)

    def arc_length(self) -> float:
        return float(self.edge_lengths().sum())

    def with_vertices(self, vertices: np.ndarray) -> "AnnotationGraph":
        """Same topology, new coordinates"""
        coords = np.array(vertices, dtype=float, copy=True)
        if coords.shape != self.vertices.shape:
            raise GraphError(
                f"Coordinate shape {coords.shape} does not match graph {self.vertices.shape}"
            )
        coords.setflags(write=False)
        return AnnotationGraph(vertices=coords, edges=self.edges, triples=self.triples)

    def translated(self, offset: Sequence[float]) -> "AnnotationGraph":
        return self.with_vertices(self.vertices + np.asarray(offset, dtype=float))

    def to_networkx(self) -> nx.Graph:
        """Undirected networkx graph with Euclidean `length` edge weights"""
        g = nx.Graph()
        for i, point in enumerate(self.vertices):
            g.add_node(i, pos=tuple(float(x) for x in point))
        for (u, v), length in zip(self.edges, self.edge_lengths()):
            g.add_edge(int(u), int(v), length=float(length))
        return g


# ─── Construction ────────────────────────────────────────────────

def _compute_triples(num_vertices: int, edges: np.ndarray) -> np.ndarray:
    adjacency: List[List[int]] = [[] for _ in range(num_vertices)]
    for u, v in edges:
        adjacency[int(u)].append(int(v))
        adjacency[int(v)].append(int(u))
    triples = []
    for v, nbrs in enumerate(adjacency):
        if len(nbrs) == 2:
            u, w = sorted(nbrs)
            triples.append((u, v, w))
    return np.asarray(triples, dtype=np.int64).reshape(-1, 3)


def build_graph(vertices, edges: Iterable[Sequence[int]]) -> AnnotationGraph:
    """
    Build an AnnotationGraph, validating the edge list.

    Args:
        vertices: (n, dim) coordinates in voxel units
        edges: iterable of vertex-index pairs

    Returns:
        AnnotationGraph with triples derived from the degree-2 rule

    Raises:
        VertexIndexError, DuplicateEdgeError, SelfLoopError
    """
    coords = np.array(vertices, dtype=float, copy=True)
    if coords.size == 0:
        coords = coords.reshape(0, coords.shape[1] if coords.ndim == 2 else 2)
    if coords.ndim != 2:
        raise GraphError(f"Vertices must be an (n, dim) array, got shape {coords.shape}")
    n = coords.shape[0]

    edge_array = np.asarray([tuple(e) for e in edges], dtype=np.int64).reshape(-1, 2)
    seen = set()
    for u, v in edge_array:
        u, v = int(u), int(v)
        if not (0 <= u < n and 0 <= v < n):
            raise VertexIndexError(f"Edge ({u}, {v}) references a vertex outside [0, {n})")
        if u == v:
            raise SelfLoopError(f"Self-loop at vertex {u}")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise DuplicateEdgeError(f"Duplicate edge {key}")
        seen.add(key)

    coords.setflags(write=False)
    edge_array.setflags(write=False)
    triples = _compute_triples(n, edge_array)
    triples.setflags(write=False)
    return AnnotationGraph(vertices=coords, edges=edge_array, triples=triples)


# ─── Chain decomposition ─────────────────────────────────────────

def _decompose(graph: AnnotationGraph) -> Tuple[List[int], List[List[int]]]:
    """
    Split a graph into maximal degree-2 chains.

    Returns:
        (anchors, chains): anchors are degree != 2 vertices followed by one
        representative per pure cycle; each chain is a vertex path starting and
        ending at an anchor (a loop starts and ends at the same anchor).
    """
    adjacency = graph.neighbors()
    degrees = graph.degrees()
    anchors = [v for v in range(graph.num_vertices) if degrees[v] != 2]
    anchor_set = set(anchors)
    visited = set()
    chains: List[List[int]] = []

    def walk(start: int, first: int) -> List[int]:
        path = [start, first]
        visited.add((min(start, first), max(start, first)))
        prev, cur = start, first
        while cur not in anchor_set:
            a, b = adjacency[cur]
            nxt = b if a == prev else a
            visited.add((min(cur, nxt), max(cur, nxt)))
            path.append(nxt)
            prev, cur = cur, nxt
        return path

    for a in anchors:
        for b in adjacency[a]:
            if (min(a, b), max(a, b)) not in visited:
                chains.append(walk(a, b))

    # pure cycles have no anchor; promote their lowest-index vertex
    for v in range(graph.num_vertices):
        if degrees[v] == 2 and v not in anchor_set:
            nbr = adjacency[v][0]
            if (min(v, nbr), max(v, nbr)) in visited:
                continue
            anchors.append(v)
            anchor_set.add(v)
            chains.append(walk(v, nbr))
    return anchors, chains


# ─── Resampling ──────────────────────────────────────────────────

def resample_polylines(graph: AnnotationGraph, target_spacing: float) -> AnnotationGraph:
    """
    Re-divide every degree-2 chain so consecutive vertices sit about
    `target_spacing` apart along the arc. Endpoints and junctions keep their
    exact coordinates and come first in the output, in their original order.
    """
    if target_spacing <= 0:
        raise GraphError(f"target_spacing must be > 0, got {target_spacing}")
    anchors, chains = _decompose(graph)
    new_index: Dict[int, int] = {a: i for i, a in enumerate(anchors)}
    points: List[np.ndarray] = [graph.vertices[a] for a in anchors]
    edges: List[Tuple[int, int]] = []
    direct_pairs = set()

    for path in sorted(chains, key=len):
        coords = graph.vertices[path]
        seg = np.linalg.norm(np.diff(coords, axis=0), axis=1)
        cumulative = np.concatenate([[0.0], np.cumsum(seg)])
        total = cumulative[-1]
        n_seg = max(1, int(round(total / target_spacing)))
        start, end = new_index[path[0]], new_index[path[-1]]
        if start == end:
            n_seg = max(n_seg, 3)
        elif n_seg == 1 and (min(start, end), max(start, end)) in direct_pairs:
            n_seg = 2

        chain_ids = [start]
        for j in range(1, n_seg):
            s = total * j / n_seg
            point = np.array([np.interp(s, cumulative, coords[:, k]) for k in range(graph.dim)])
            chain_ids.append(len(points))
            points.append(point)
        chain_ids.append(end)
        if n_seg == 1:
            direct_pairs.add((min(start, end), max(start, end)))
        edges.extend(zip(chain_ids[:-1], chain_ids[1:]))

    vertices = np.asarray(points, dtype=float).reshape(-1, graph.dim)
    logger.debug(
        f"Resampled graph: {graph.num_vertices} -> {vertices.shape[0]} vertices "
        f"at spacing {target_spacing}"
    )
    return build_graph(vertices, edges)


# ─── Smooth perturbation ─────────────────────────────────────────

def unit_displacement_field(points: np.ndarray, correlation_length: float,
                            seed: int) -> np.ndarray:
    """
    Evaluate the seeded sum-of-sinusoids field at `points`.

    Each output axis averages PERTURBATION_TERMS cosines with random direction,
    phase and wavelength in [4, 8] x correlation_length, so every component lies
    in [-1, 1] and the field correlation decays to about 1/e at lag
    correlation_length.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    dim = points.shape[1]
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(dim, PERTURBATION_TERMS, dim))
    directions /= np.linalg.norm(directions, axis=2, keepdims=True)
    wavelengths = rng.uniform(4.0, 8.0, size=(dim, PERTURBATION_TERMS)) * correlation_length
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(dim, PERTURBATION_TERMS))

    projected = np.einsum("akd,nd->akn", directions, points)
    arguments = projected * (2.0 * np.pi / wavelengths)[..., None] + phases[..., None]
    return np.cos(arguments).mean(axis=1).T


def perturb_smooth(graph: AnnotationGraph, amplitude: float, correlation_length: float,
                   seed: int) -> AnnotationGraph:
    """
    Displace every vertex by a slowly varying random field whose largest
    displacement over the graph equals `amplitude`.
    """
    if amplitude < 0:
        raise GraphError(f"amplitude must be >= 0, got {amplitude}")
    if correlation_length <= 0:
        raise GraphError(f"correlation_length must be > 0, got {correlation_length}")
    if amplitude == 0 or graph.num_vertices == 0:
        return graph.with_vertices(graph.vertices)

    field_values = unit_displacement_field(graph.vertices, correlation_length, seed)
    peak = float(np.linalg.norm(field_values, axis=1).max())
    if peak == 0.0:
        return graph.with_vertices(graph.vertices)
    return graph.with_vertices(graph.vertices + amplitude * field_values / peak)


# ─── Coarsening ──────────────────────────────────────────────────

def coarsen(graph: AnnotationGraph) -> AnnotationGraph:
    """
    Replace each maximal degree-2 chain by a straight edge between its anchors.

    Loops keep two interior vertices (a triangle) and parallel chains between the
    same anchors keep their middle vertex, so the output has no self-loops or
    duplicate edges.
    """
    if graph.num_vertices == 0:
        raise EmptyGraphError("Cannot coarsen a graph with zero vertices")

    anchors, chains = _decompose(graph)
    kept = set(anchors)
    links: List[Tuple[int, int]] = []
    direct_pairs = set()

    for path in sorted(chains, key=len):
        start, end = path[0], path[-1]
        if start == end:
            via = [path[len(path) // 3], path[(2 * len(path)) // 3]]
        elif (min(start, end), max(start, end)) in direct_pairs:
            via = [path[len(path) // 2]]
        else:
            via = []
            direct_pairs.add((min(start, end), max(start, end)))
        kept.update(via)
        sequence = [start, *via, end]
        links.extend(zip(sequence[:-1], sequence[1:]))

    order = sorted(kept)
    remap = {old: new for new, old in enumerate(order)}
    edges = [(remap[u], remap[v]) for u, v in links]
    return build_graph(graph.vertices[order], edges)
