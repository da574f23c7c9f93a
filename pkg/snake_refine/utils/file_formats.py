"""
On-disk formats for graphs, volumes, tables and images.

Graph text: one record per line, `v <id> <x> <y> [<z>]` for vertices then
`e <id1> <id2>` for edges, 0-based ids, '#' starts a comment. Coordinates are
written with 9 significant digits so that read -> write reproduces the file.

Volume: `<name>.raw` holds little-endian float32 samples with axis 0 (x)
varying fastest; `<name>.raw.hdr` holds `dims`, `dtype`, `order` and `endian`
keys as `key = value` lines.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from PIL import Image

from snake_refine.distance_field import ScalarVolume, VolumeLike, as_array
from snake_refine.errors import FormatError, GraphError
from snake_refine.geometry_graph import AnnotationGraph, build_graph

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GRAPH_DIGITS = 9
VOLUME_DTYPE = "float32"
VOLUME_ORDER = "x-fastest"
HEADER_SUFFIX = ".hdr"


# ─── Graphs ──────────────────────────────────────────────────────

def format_graph(graph: AnnotationGraph, comment: Optional[str] = None) -> str:
    lines = []
    if comment:
        lines.extend(f"# {line}" for line in comment.splitlines())
    for i, point in enumerate(graph.vertices):
        coords = " ".join(f"{float(x):.{GRAPH_DIGITS}g}" for x in point)
        lines.append(f"v {i} {coords}")
    for u, v in graph.edges:
        lines.append(f"e {int(u)} {int(v)}")
    return "\n".join(lines) + "\n"


def parse_graph(text: str, source: str = "<string>") -> AnnotationGraph:
    """
    Parse the graph text format.

    Raises:
        FormatError on malformed records, mixed dimensionality, missing or
        repeated vertex ids, or edges the graph constructor rejects
    """
    points: Dict[int, Tuple[float, ...]] = {}
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind = tokens[0]
        try:
            if kind == "v" and len(tokens) in (4, 5):
                vid = int(tokens[1])
                if vid in points:
                    raise FormatError(f"{source}:{lineno}: vertex id {vid} repeated")
                points[vid] = tuple(float(t) for t in tokens[2:])
            elif kind == "e" and len(tokens) == 3:
                edges.append((int(tokens[1]), int(tokens[2])))
            else:
                raise FormatError(f"{source}:{lineno}: cannot parse record '{raw.strip()}'")
        except ValueError as e:
            raise FormatError(f"{source}:{lineno}: {e}") from e

    n = len(points)
    if sorted(points) != list(range(n)):
        raise FormatError(f"{source}: vertex ids must be exactly 0..{n - 1}")
    dims = {len(p) for p in points.values()}
    if len(dims) > 1:
        raise FormatError(f"{source}: vertices mix 2D and 3D coordinates")
    dim = dims.pop() if dims else 2
    vertices = np.array([points[i] for i in range(n)], dtype=float).reshape(n, dim)
    try:
        return build_graph(vertices, edges)
    except GraphError as e:
        raise FormatError(f"{source}: {e}") from e


def write_graph(graph: AnnotationGraph, path: PathLike, comment: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_graph(graph, comment), encoding="utf-8")
    logger.debug(f"Wrote graph ({graph.num_vertices} vertices, {graph.num_edges} edges) to {path}")
    return path


def read_graph(path: PathLike) -> AnnotationGraph:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"Cannot read graph file {path}: {e}") from e
    return parse_graph(text, source=str(path))


# ─── Volumes ─────────────────────────────────────────────────────

def header_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + HEADER_SUFFIX)


def write_volume(volume: VolumeLike, path: PathLike) -> Path:
    """Raw float32 samples plus the text header next to them"""
    data = as_array(volume)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data.astype("<f4").tobytes(order="F"))
    header = (
        f"dims = {' '.join(str(s) for s in data.shape)}\n"
        f"dtype = {VOLUME_DTYPE}\n"
        f"order = {VOLUME_ORDER}\n"
        f"endian = little\n"
    )
    header_path(path).write_text(header, encoding="utf-8")
    logger.debug(f"Wrote volume {data.shape} to {path}")
    return path


def read_volume(path: PathLike) -> ScalarVolume:
    path = Path(path)
    hdr = header_path(path)
    if not hdr.exists():
        raise FormatError(f"Missing volume header {hdr}")
    values = dotenv_values(dotenv_path=hdr)
    try:
        dims = tuple(int(s) for s in (values.get("dims") or "").split())
    except ValueError as e:
        raise FormatError(f"{hdr}: bad dims '{values.get('dims')}'") from e
    if len(dims) not in (2, 3) or any(s < 1 for s in dims):
        raise FormatError(f"{hdr}: dims must list 2 or 3 positive extents, got {dims}")
    if values.get("dtype", VOLUME_DTYPE) != VOLUME_DTYPE:
        raise FormatError(f"{hdr}: unsupported dtype {values.get('dtype')}")
    if values.get("order", VOLUME_ORDER) != VOLUME_ORDER:
        raise FormatError(f"{hdr}: unsupported order {values.get('order')}")
    if values.get("endian", "little") != "little":
        raise FormatError(f"{hdr}: unsupported endianness {values.get('endian')}")

    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read volume file {path}: {e}") from e
    expected = int(np.prod(dims)) * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for dims {dims}, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F")
    return ScalarVolume(data.astype(float))


# ─── Tables, images, manifests ───────────────────────────────────

def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.9g")
    return path


def to_grayscale(volume: VolumeLike, value_range: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    8-bit panel of a 2D volume (3D volumes are min-projected along the last
    axis) with x running left to right.
    """
    data = as_array(volume)
    if data.ndim == 3:
        data = data.min(axis=2)
    lo, hi = value_range if value_range is not None else (float(data.min()), float(data.max()))
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((data - lo) / span, 0.0, 1.0)
    return np.round(scaled.T * 255.0).astype(np.uint8)


def write_pgm(volume: VolumeLike, path: PathLike,
              value_range: Optional[Sequence[float]] = None) -> Path:
    """Binary (P5) PGM image of a volume"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_grayscale(volume, value_range)).save(path, format="PPM")
    return path


def write_manifest(params: Dict[str, Any], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(params, indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")
    return path


def read_manifest(path: PathLike) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise FormatError(f"Cannot read manifest {path}: {e}") from e
