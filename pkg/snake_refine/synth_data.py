"""
Deterministic synthetic fixtures: ground-truth centerline graphs, their
truncated distance maps, and offset, perturbed or coarse annotations of them.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from snake_refine.distance_field import DEFAULT_TRUNCATION, ScalarVolume, distance_transform
from snake_refine.errors import FixtureError
from snake_refine.geometry_graph import (
    AnnotationGraph,
    GridSpec,
    build_graph,
    coarsen,
    perturb_smooth,
)
from snake_refine.utils import file_formats

logger = logging.getLogger(__name__)

# Annotation perturbation levels (amplitude in voxels) and their correlation length
PERTURBATION_LEVELS = (1.0, 2.0, 4.0)
PERTURBATION_CORRELATION = 24.0

FIG4_SIZE = 96
FIG4_OFFSET = 4.0
FIG4_GAP = 16
STEEP_SCALE = 4.0

BRANCH_MARGIN = 3.0
# first branch starts in the first quarter of axis 0, at least BRANCH_MARGIN + 1 in
MIN_TREE_GRID = int(4 * (BRANCH_MARGIN + 1))
MAX_BRANCH_RETRIES = 50

MANIFEST_NAME = "manifest.json"


@dataclass(eq=False)
class Fixture:
    name: str
    truth: AnnotationGraph
    annotation: AnnotationGraph
    field: ScalarVolume
    grid: GridSpec
    params: Dict[str, Any] = field(default_factory=dict)
    gap_mask: Optional[np.ndarray] = None

    @property
    def truncation(self) -> float:
        return float(self.params.get("truncation", DEFAULT_TRUNCATION))


def _path_graph(points: np.ndarray) -> AnnotationGraph:
    n = points.shape[0]
    return build_graph(points, [(i, i + 1) for i in range(n - 1)])


# ─── Sine gap fixture ─────────────────────────────────────────────

def _sine_curve(size: int, spacing: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Points at uniform arc spacing on one period of a sine across the middle of
    the grid, with unit normals.
    """
    x0, x1 = size / 6.0, size - size / 6.0
    amplitude = size / 8.0
    wavenumber = 2.0 * np.pi / (x1 - x0)
    centre = (size - 1) / 2.0

    dense_x = np.linspace(x0, x1, 20 * int(x1 - x0) + 1)
    slope = amplitude * wavenumber * np.cos(wavenumber * (dense_x - x0))
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(dense_x), 0.5 * (slope[1:] + slope[:-1]) * np.diff(dense_x)))])
    n_seg = max(1, int(round(arc[-1] / spacing)))
    x = np.interp(np.linspace(0.0, arc[-1], n_seg + 1), arc, dense_x)

    y = centre + amplitude * np.sin(wavenumber * (x - x0))
    dy = amplitude * wavenumber * np.cos(wavenumber * (x - x0))
    normals = np.stack([-dy, np.ones_like(dy)], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return np.stack([x, y], axis=1), normals


def _gap_voxels(points: np.ndarray, gap: int, shape: Tuple[int, ...]) -> np.ndarray:
    """Centerline voxels of a `gap`-voxel stretch of arc in the middle of the curve"""
    mask = np.zeros(shape, dtype=bool)
    if gap <= 0:
        return mask
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    start = 0.5 * (arc[-1] - gap)
    if start < 0:
        raise FixtureError(f"Gap of {gap} voxels is longer than the curve ({arc[-1]:.1f})")
    s = np.linspace(start, start + gap, 4 * gap + 1)
    samples = np.stack([np.interp(s, arc, points[:, k]) for k in range(points.shape[1])], axis=1)
    voxels = np.clip(np.rint(samples).astype(int), 0, np.asarray(shape) - 1)
    mask[tuple(voxels.T)] = True
    return mask


def make_fig4_fixture(size: int = FIG4_SIZE, offset: float = FIG4_OFFSET, gap: int = FIG4_GAP,
                      d: float = DEFAULT_TRUNCATION, spacing: float = 1.0) -> Fixture:
    """
    Open sine curve on a size x size grid.

    The field is the truth's truncated distance map with the centerline voxels of
    a `gap`-long stretch reset to d; the annotation is the truth shifted by
    `offset` voxels along its normal.
    """
    if size < 16:
        raise FixtureError(f"Gap fixture needs a grid of at least 16, got {size}")
    grid = GridSpec((size, size))
    points, normals = _sine_curve(size, spacing)
    truth = _path_graph(points)
    annotation = truth.with_vertices(points + offset * normals)

    values = np.array(distance_transform(truth, grid, d).values.data)
    gap_mask = _gap_voxels(points, gap, grid.shape)
    values[gap_mask] = d

    params = {
        "fixture": "fig4", "size": size, "offset": float(offset), "gap": int(gap),
        "truncation": float(d), "spacing": float(spacing),
    }
    logger.info(
        f"Gap fixture: {truth.num_vertices} vertices, offset {offset}, "
        f"{int(gap_mask.sum())} gap voxels"
    )
    return Fixture(name="fig4", truth=truth, annotation=annotation, field=ScalarVolume(values),
                   grid=grid, params=params, gap_mask=gap_mask)


def make_steep_fixture(scale: float = STEEP_SCALE, **kwargs) -> Fixture:
    """Gap fixture with the field multiplied by `scale` (for divergence checks)"""
    base = make_fig4_fixture(**kwargs)
    params = dict(base.params, fixture="steep", scale=float(scale))
    return Fixture(name="steep", truth=base.truth, annotation=base.annotation,
                   field=ScalarVolume(scale * base.field.data), grid=base.grid,
                   params=params, gap_mask=base.gap_mask)


# ─── Random trees ────────────────────────────────────────────────

def _random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _branch_direction(rng: np.random.Generator, parent_dir: np.ndarray) -> np.ndarray:
    """Child heading 35 to 60 degrees off the parent, to either side"""
    perp = _random_unit(rng, parent_dir.size)
    perp -= (perp @ parent_dir) * parent_dir
    norm = np.linalg.norm(perp)
    if norm < 1e-6:
        perp = np.roll(parent_dir, 1) * np.array([-1.0] + [1.0] * (parent_dir.size - 1))
        perp -= (perp @ parent_dir) * parent_dir
        norm = np.linalg.norm(perp)
    perp /= norm
    angle = np.deg2rad(rng.uniform(35.0, 60.0))
    return np.cos(angle) * parent_dir + np.sin(angle) * perp


def _grow(rng: np.random.Generator, start: np.ndarray, heading: np.ndarray,
          length: int, wobble: float = 0.12) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-step polyline whose heading drifts smoothly; returns points after `start`"""
    points = []
    direction = heading.copy()
    turn = np.zeros_like(heading)
    position = start.astype(float)
    for _ in range(length):
        turn = 0.8 * turn + wobble * rng.normal(size=heading.size)
        direction = direction + turn - (turn @ direction) * direction
        direction /= np.linalg.norm(direction)
        position = position + direction
        points.append(position)
    return np.asarray(points), direction


def make_tree_fixture(grid: Union[GridSpec, Sequence[int]] = (64, 64), n_branches: int = 3,
                      seed: int = 0, d: float = DEFAULT_TRUNCATION, amplitude: float = 2.0,
                      correlation_length: float = PERTURBATION_CORRELATION,
                      max_retries: int = MAX_BRANCH_RETRIES) -> Fixture:
    """
    Random binary tree of smooth unit-spaced polylines inside the grid.

    Each branch after the first leaves an interior vertex of an earlier branch
    that is not already a junction. Branches that would come within
    BRANCH_MARGIN voxels of the border are redrawn.

    Raises:
        FixtureError when the grid is shorter than MIN_TREE_GRID along an axis
        or a branch cannot be placed within `max_retries` draws
    """
    grid = grid if isinstance(grid, GridSpec) else GridSpec(tuple(grid))
    if n_branches < 1:
        raise FixtureError(f"n_branches must be >= 1, got {n_branches}")
    if min(grid.shape) < MIN_TREE_GRID:
        raise FixtureError(
            f"Tree fixture needs at least {MIN_TREE_GRID} voxels per axis, got {grid.shape}"
        )
    rng = np.random.default_rng(seed)
    extent = np.asarray(grid.shape, dtype=float)
    short_side = float(extent.min())

    def inside(points: np.ndarray) -> bool:
        return grid.contains(points, margin=BRANCH_MARGIN)

    points: List[np.ndarray] = []
    edges: List[Tuple[int, int]] = []
    branches: List[Dict[str, Any]] = []
    degree: Dict[int, int] = {}

    for b in range(n_branches):
        for attempt in range(max_retries):
            length = int(rng.integers(int(short_side / 4), int(short_side / 2) + 1))
            if b == 0:
                start = rng.uniform(0.3, 0.7, size=grid.dim) * (extent - 1)
                start[0] = rng.uniform(BRANCH_MARGIN + 1, 0.25 * extent[0])
                heading = _random_unit(rng, grid.dim)
                heading[0] = abs(heading[0]) + 1.0
                heading /= np.linalg.norm(heading)
                parent_index = None
            else:
                parent = branches[int(rng.integers(len(branches)))]
                interior = [i for i in parent["ids"][2:-2] if degree.get(i, 0) < 3]
                if not interior:
                    continue
                parent_index = int(rng.choice(interior))
                start = points[parent_index]
                heading = _branch_direction(rng, parent["directions"][parent_index])
            grown, _ = _grow(rng, start, heading, length)
            if inside(grown) and (b > 0 or inside(start)):
                break
        else:
            raise FixtureError(
                f"Could not place branch {b} inside grid {grid.shape} after {max_retries} draws"
            )

        ids: List[int] = []
        directions: Dict[int, np.ndarray] = {}
        if parent_index is None:
            ids.append(len(points))
            points.append(start)
        else:
            ids.append(parent_index)
        chain = np.vstack([start[None, :], grown])
        tangents = np.gradient(chain, axis=0)
        for p in grown:
            ids.append(len(points))
            points.append(p)
        for i, t in zip(ids, tangents):
            directions.setdefault(i, t / np.linalg.norm(t))
        for u, v in zip(ids[:-1], ids[1:]):
            edges.append((u, v))
            degree[u] = degree.get(u, 0) + 1
            degree[v] = degree.get(v, 0) + 1
        branches.append({"ids": ids, "directions": directions})

    truth = build_graph(np.asarray(points), edges)
    field_values = distance_transform(truth, grid, d).values
    annotation = perturb_smooth(truth, amplitude, correlation_length, seed + 1)
    params = {
        "fixture": "tree", "shape": list(grid.shape), "n_branches": int(n_branches),
        "seed": int(seed), "truncation": float(d), "amplitude": float(amplitude),
        "correlation_length": float(correlation_length),
    }
    logger.info(f"Tree fixture: {n_branches} branches, {truth.num_vertices} vertices, seed {seed}")
    return Fixture(name="tree", truth=truth, annotation=annotation, field=field_values,
                   grid=grid, params=params)


# ─── Annotation variants ─────────────────────────────────────────

def perturbation_levels(truth: AnnotationGraph, seed: int = 0,
                        levels: Sequence[float] = PERTURBATION_LEVELS,
                        correlation_length: float = PERTURBATION_CORRELATION
                        ) -> Dict[float, AnnotationGraph]:
    """One smoothly deformed annotation per amplitude, all from the same seeded field"""
    return {float(a): perturb_smooth(truth, a, correlation_length, seed) for a in levels}


def coarse_annotation(truth: AnnotationGraph) -> AnnotationGraph:
    return coarsen(truth)


def remove_vertices(graph: AnnotationGraph, drop: Sequence[int]) -> AnnotationGraph:
    """Delete vertices and their edges, re-indexing the survivors in order"""
    drop_set = {int(i) for i in drop}
    keep = [i for i in range(graph.num_vertices) if i not in drop_set]
    remap = {old: new for new, old in enumerate(keep)}
    edges = [(remap[int(u)], remap[int(v)]) for u, v in graph.edges
             if int(u) in remap and int(v) in remap]
    return build_graph(graph.vertices[keep], edges)


# ─── Persistence ─────────────────────────────────────────────────

def save_fixture(fixture: Fixture, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write field, graphs, optional gap mask and a manifest into `out_dir`"""
    out_dir = Path(out_dir)
    paths = {
        "field": file_formats.write_volume(fixture.field, out_dir / "field.raw"),
        "truth": file_formats.write_graph(fixture.truth, out_dir / "truth.graph",
                                          comment=f"{fixture.name} ground truth"),
        "annotation": file_formats.write_graph(fixture.annotation, out_dir / "annotation.graph",
                                               comment=f"{fixture.name} initial annotation"),
    }
    if fixture.gap_mask is not None:
        paths["gap_mask"] = file_formats.write_volume(fixture.gap_mask.astype(float),
                                                      out_dir / "gap_mask.raw")
    manifest = {
        "name": fixture.name,
        "grid": list(fixture.grid.shape),
        "params": fixture.params,
        "files": {k: p.name for k, p in paths.items()},
    }
    paths["manifest"] = file_formats.write_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info(f"Saved fixture '{fixture.name}' to {out_dir}")
    return paths


def load_fixture(out_dir: Union[str, Path]) -> Fixture:
    out_dir = Path(out_dir)
    manifest = file_formats.read_manifest(out_dir / MANIFEST_NAME)
    files = manifest["files"]
    gap_mask = None
    if "gap_mask" in files:
        gap_mask = file_formats.read_volume(out_dir / files["gap_mask"]).data > 0.5
    return Fixture(
        name=manifest["name"],
        truth=file_formats.read_graph(out_dir / files["truth"]),
        annotation=file_formats.read_graph(out_dir / files["annotation"]),
        field=file_formats.read_volume(out_dir / files["field"]),
        grid=GridSpec(tuple(manifest["grid"])),
        params=manifest["params"],
        gap_mask=gap_mask,
    )


def make_fixture(name: str, seed: int = 0, **kwargs) -> Fixture:
    """Fixture by name: 'fig4', 'steep' or 'tree'"""
    if name == "fig4":
        return make_fig4_fixture(**kwargs)
    if name == "steep":
        return make_steep_fixture(**kwargs)
    if name == "tree":
        return make_tree_fixture(seed=seed, **kwargs)
    raise FixtureError(f"Unknown fixture '{name}' (expected fig4, steep or tree)")
