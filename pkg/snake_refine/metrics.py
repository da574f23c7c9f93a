"""
Connectivity-aware delineation metrics: relaxed correctness/completeness/quality
(CCQ), average path length similarity (APLS) and the too-long-too-short path
fraction (TLTS), plus skeleton extraction from a predicted distance map.
"""

import itertools
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import networkx as nx
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize

from snake_refine.distance_field import VolumeLike, as_array
from snake_refine.errors import MetricError
from snake_refine.geometry_graph import AnnotationGraph, build_graph, resample_polylines

logger = logging.getLogger(__name__)

DEFAULT_MATCH_DISTANCE = 3.0
DEFAULT_SNAP_RADIUS = 4.0
DEFAULT_N_PAIRS = 200
DEFAULT_TOLERANCE = 0.15
DEFAULT_THRESHOLD = 2.0
DEFAULT_PRUNE_LENGTH = 3.0
DEFAULT_POLYLINE_SPACING = 3.0

REPORT_COLUMNS = [
    "correctness", "completeness", "quality", "apls", "tlts",
    "match_distance", "snap_radius", "tolerance", "n_pairs", "seed",
]


@dataclass(frozen=True)
class MetricsReport:
    correctness: float
    completeness: float
    quality: float
    apls: float
    tlts: float
    match_distance: float = DEFAULT_MATCH_DISTANCE
    snap_radius: float = DEFAULT_SNAP_RADIUS
    tolerance: float = DEFAULT_TOLERANCE
    n_pairs: int = DEFAULT_N_PAIRS
    seed: int = 0

    def __post_init__(self):
        for name in ("correctness", "completeness", "quality", "apls", "tlts"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise MetricError(f"{name} = {value} outside [0, 1]")

    def as_row(self) -> Dict[str, float]:
        row = asdict(self)
        return {k: row[k] for k in REPORT_COLUMNS}


# ─── CCQ ─────────────────────────────────────────────────────────

def ccq(pred_mask: np.ndarray, gt_mask: np.ndarray,
        match_distance: float = DEFAULT_MATCH_DISTANCE) -> Tuple[float, float, float]:
    """
    Correctness, completeness and quality with matches relaxed to
    `match_distance` voxels (Euclidean).

    Raises:
        MetricError for mismatched grids or an empty ground truth
    """
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise MetricError(f"Mask shapes differ: {pred.shape} vs {gt.shape}")
    n_gt = int(gt.sum())
    if n_gt == 0:
        raise MetricError("Ground-truth mask is empty; completeness is undefined")
    n_pred = int(pred.sum())
    if n_pred == 0:
        return 0.0, 0.0, 0.0

    to_gt = ndimage.distance_transform_edt(~gt)
    to_pred = ndimage.distance_transform_edt(~pred)
    tp_pred = int(np.count_nonzero(pred & (to_gt <= match_distance)))
    tp_gt = int(np.count_nonzero(gt & (to_pred <= match_distance)))
    false_pos = n_pred - tp_pred
    false_neg = n_gt - tp_gt

    correctness = tp_pred / n_pred
    completeness = tp_gt / n_gt
    quality = tp_pred / (tp_pred + false_pos + false_neg)
    return correctness, completeness, quality


# ─── Path metrics ────────────────────────────────────────────────

def _connected_key_pairs(graph: AnnotationGraph) -> List[Tuple[int, int]]:
    key = graph.key_nodes()
    component = {}
    for i, comp in enumerate(nx.connected_components(graph.to_networkx())):
        for node in comp:
            component[node] = i
    return [(int(a), int(b)) for a, b in itertools.combinations(key, 2)
            if component[int(a)] == component[int(b)]]


def _sample_pairs(pairs: List[Tuple[int, int]], n_pairs: int, seed: int) -> List[Tuple[int, int]]:
    if n_pairs >= len(pairs):
        return pairs
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(pairs), size=n_pairs, replace=False))
    return [pairs[i] for i in chosen]


class _PathLengths:
    """Lazy single-source Dijkstra lengths over a graph"""

    def __init__(self, graph: AnnotationGraph):
        self.graph = graph.to_networkx()
        self._cache: Dict[int, Dict[int, float]] = {}

    def __call__(self, source: int, target: int) -> Optional[float]:
        if source not in self._cache:
            self._cache[source] = nx.single_source_dijkstra_path_length(
                self.graph, source, weight="length"
            )
        return self._cache[source].get(target)


def _path_correspondences(source: AnnotationGraph, target: AnnotationGraph, n_pairs: int,
                          seed: int, snap_radius: float) -> List[Tuple[float, Optional[float]]]:
    """
    (source length, target length or None) for sampled key-node pairs of
    `source`; None marks an endpoint with no target vertex within snap_radius
    or a pair disconnected in the target.
    """
    if n_pairs < 1:
        raise MetricError(f"n_pairs must be >= 1, got {n_pairs}")
    pairs = _connected_key_pairs(source)
    if not pairs:
        raise MetricError("Graph has no connected pair of endpoints or junctions")
    pairs = _sample_pairs(pairs, n_pairs, seed)

    source_lengths = _PathLengths(source)
    target_lengths = _PathLengths(target)
    if target.num_vertices:
        tree = cKDTree(target.vertices)
        key = np.unique(np.asarray(pairs).ravel())
        dist, idx = tree.query(source.vertices[key], distance_upper_bound=snap_radius)
        snapped = {int(k): (int(i) if np.isfinite(dd) else None) for k, dd, i in zip(key, dist, idx)}
    else:
        snapped = {}

    out = []
    for a, b in pairs:
        len_source = source_lengths(a, b)
        ta, tb = snapped.get(a), snapped.get(b)
        len_target = None if ta is None or tb is None else target_lengths(ta, tb)
        out.append((float(len_source), None if len_target is None else float(len_target)))
    return out


def apls_directed(source: AnnotationGraph, target: AnnotationGraph,
                  n_pairs: int = DEFAULT_N_PAIRS, seed: int = 0,
                  snap_radius: float = DEFAULT_SNAP_RADIUS) -> float:
    """Mean over sampled source pairs of 1 - min(1, |len_s - len_t| / len_s)"""
    scores = []
    for len_s, len_t in _path_correspondences(source, target, n_pairs, seed, snap_radius):
        if len_t is None or len_s <= 0:
            scores.append(0.0)
        else:
            scores.append(1.0 - min(1.0, abs(len_s - len_t) / len_s))
    return float(np.mean(scores))


def apls(pred_graph: AnnotationGraph, gt_graph: AnnotationGraph, n_pairs: int = DEFAULT_N_PAIRS,
         seed: int = 0, snap_radius: float = DEFAULT_SNAP_RADIUS) -> float:
    """
    Symmetrized APLS: the average of the gt->pred and pred->gt scores. A
    prediction without any connected pair of key nodes scores 0 in its
    direction.

    Raises:
        MetricError when the ground truth has no connected pair of key nodes
    """
    forward = apls_directed(gt_graph, pred_graph, n_pairs, seed, snap_radius)
    if not _connected_key_pairs(pred_graph):
        backward = 0.0
    else:
        backward = apls_directed(pred_graph, gt_graph, n_pairs, seed, snap_radius)
    logger.debug(f"APLS gt->pred {forward:.4f}, pred->gt {backward:.4f}")
    return 0.5 * (forward + backward)


def tlts(pred_graph: AnnotationGraph, gt_graph: AnnotationGraph, n_pairs: int = DEFAULT_N_PAIRS,
         tolerance: float = DEFAULT_TOLERANCE, seed: int = 0,
         snap_radius: float = DEFAULT_SNAP_RADIUS) -> float:
    """Fraction of sampled gt pairs whose pred path exists and is within `tolerance` relative length"""
    if not 0.0 < tolerance < 1.0:
        raise MetricError(f"tolerance must lie in (0, 1), got {tolerance}")
    hits = [
        len_t is not None and len_g > 0 and abs(len_t - len_g) / len_g < tolerance
        for len_g, len_t in _path_correspondences(gt_graph, pred_graph, n_pairs, seed, snap_radius)
    ]
    return float(np.mean(hits))


# ─── Skeleton to graph ───────────────────────────────────────────

def _voxel_graph(skeleton: np.ndarray) -> nx.Graph:
    """Full-neighbourhood adjacency of skeleton voxels, diagonal steps flagged"""
    coords = np.argwhere(skeleton)
    index = {tuple(c): i for i, c in enumerate(coords)}
    dim = skeleton.ndim
    offsets = [np.array(o) for o in itertools.product((-1, 0, 1), repeat=dim) if o > (0,) * dim]
    g = nx.Graph()
    for i, c in enumerate(coords):
        g.add_node(i, pos=c.astype(float))
    for i, c in enumerate(coords):
        for o in offsets:
            j = index.get(tuple(c + o))
            if j is not None:
                g.add_edge(i, j, diagonal=int(np.abs(o).sum()) > 1)
    return g


def _drop_redundant_diagonals(g: nx.Graph):
    """A diagonal edge whose endpoints share a neighbour only closes a triangle"""
    for u, v, diagonal in list(g.edges(data="diagonal")):
        if diagonal and set(g[u]) & set(g[v]):
            g.remove_edge(u, v)


def _merge_junction_clusters(g: nx.Graph):
    junctions = [n for n in g if g.degree(n) >= 3]
    for cluster in list(nx.connected_components(g.subgraph(junctions))):
        if len(cluster) < 2:
            continue
        keep = min(cluster)
        outside = {nb for n in cluster for nb in g[n]} - cluster
        g.nodes[keep]["pos"] = np.mean([g.nodes[n]["pos"] for n in cluster], axis=0)
        g.remove_nodes_from(cluster - {keep})
        g.add_edges_from((keep, nb) for nb in outside)


def _spur_from(g: nx.Graph, end: int) -> Tuple[List[int], float, bool]:
    """Walk from a degree-1 node; returns (path, length, ends at a junction)"""
    path = [end]
    length = 0.0
    prev, cur = None, end
    while True:
        nxt = [n for n in g[cur] if n != prev]
        if not nxt:
            return path, length, False
        step = nxt[0]
        length += float(np.linalg.norm(g.nodes[step]["pos"] - g.nodes[cur]["pos"]))
        if g.degree(step) >= 3:
            return path, length, True
        if g.degree(step) == 1 or step == end:
            return path + [step], length, False
        path.append(step)
        prev, cur = cur, step


def _prune_spurs(g: nx.Graph, prune_length: float):
    changed = True
    while changed:
        changed = False
        for end in sorted(n for n in g if g.degree(n) == 1):
            if end not in g or g.degree(end) != 1:
                continue
            path, length, at_junction = _spur_from(g, end)
            if at_junction and length < prune_length:
                g.remove_nodes_from(path)
                changed = True


def skeletonize_and_graph(y: VolumeLike, threshold: float = DEFAULT_THRESHOLD,
                          prune_length: float = DEFAULT_PRUNE_LENGTH,
                          spacing: float = DEFAULT_POLYLINE_SPACING) -> AnnotationGraph:
    """
    Centerline graph of the region y < threshold.

    The mask is thinned to unit width, skeleton voxels become vertices joined to
    their neighbours, triangle-closing diagonals are dropped, adjacent junction
    voxels merge into one vertex at their centroid, and spurs shorter than
    `prune_length` that end at a junction are removed. Each remaining chain of
    degree-2 voxels between key nodes is then replaced by a polyline with
    vertices about `spacing` apart along the chain; spacing = 0 keeps one
    vertex per skeleton voxel.
    """
    if threshold <= 0:
        raise MetricError(f"threshold must be > 0, got {threshold}")
    if spacing < 0:
        raise MetricError(f"spacing must be >= 0, got {spacing}")
    data = as_array(y)
    mask = data < threshold
    if not mask.any():
        return build_graph(np.zeros((0, data.ndim)), [])

    skeleton = skeletonize(mask) if data.ndim == 2 else skeletonize(mask, method="lee")
    g = _voxel_graph(skeleton.astype(bool))
    _drop_redundant_diagonals(g)
    _merge_junction_clusters(g)
    _prune_spurs(g, prune_length)
    g.remove_nodes_from([n for n in list(g) if g.degree(n) == 0])

    order = sorted(g)
    remap = {n: i for i, n in enumerate(order)}
    vertices = np.array([g.nodes[n]["pos"] for n in order], dtype=float).reshape(-1, data.ndim)
    edges = [(remap[u], remap[v]) for u, v in g.edges]
    graph = build_graph(vertices, edges)
    if spacing > 0 and graph.num_edges:
        graph = resample_polylines(graph, spacing)
    logger.debug(
        f"Skeleton graph: {graph.num_vertices} vertices, {graph.num_edges} edges, "
        f"{len(graph.key_nodes())} key nodes"
    )
    return graph


def evaluate(pred_graph: AnnotationGraph, gt_graph: AnnotationGraph, pred_mask: np.ndarray,
             gt_mask: np.ndarray, match_distance: float = DEFAULT_MATCH_DISTANCE,
             n_pairs: int = DEFAULT_N_PAIRS, tolerance: float = DEFAULT_TOLERANCE,
             seed: int = 0, snap_radius: float = DEFAULT_SNAP_RADIUS) -> MetricsReport:
    correctness, completeness, quality = ccq(pred_mask, gt_mask, match_distance)
    return MetricsReport(
        correctness=correctness,
        completeness=completeness,
        quality=quality,
        apls=apls(pred_graph, gt_graph, n_pairs, seed, snap_radius),
        tlts=tlts(pred_graph, gt_graph, n_pairs, tolerance, seed, snap_radius),
        match_distance=float(match_distance),
        snap_radius=float(snap_radius),
        tolerance=float(tolerance),
        n_pairs=int(n_pairs),
        seed=int(seed),
    )
