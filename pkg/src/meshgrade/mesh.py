"""Structured 2D meshes: parsing, writing and per-cell quality metrics.

Node ``(i, j)`` lives at ``coords[i, j]`` and has flat index ``j * ni + i``
(i varies fastest, the Plot3D order).  Cell ``(ci, cj)`` has flat index
``cj * (ni - 1) + ci`` and corners ``(ci, cj), (ci+1, cj), (ci+1, cj+1),
(ci, cj+1)`` in that order, which is counter-clockwise for a positively
oriented mesh.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DegenerateCell,
    DegenerateTriangle,
    DomainError,
    IndexOutOfRange,
    LengthMismatch,
    MalformedHeader,
    NonFiniteCoordinate,
    SchemaError,
    TruncatedData,
)

FEATURE_NAMES = (
    "area",
    "aspect_ratio",
    "skewness",
    "orthogonality_dev",
    "smoothness",
    "distribution",
)

# cells with signed area at or below this are rejected
AREA_EPS = 1e-14

_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True, eq=False)
class StructuredMesh:
    ni: int
    nj: int
    coords: np.ndarray  # (ni, nj, 2)
    name: str = "mesh"

    def __post_init__(self):
        ni, nj = int(self.ni), int(self.nj)
        if ni < 2 or nj < 2:
            raise DataError(f"mesh needs ni >= 2 and nj >= 2, got {ni}x{nj}")
        coords = np.array(self.coords, dtype=np.float64)
        if coords.shape != (ni, nj, 2):
            raise LengthMismatch(f"coords shape {coords.shape} != {(ni, nj, 2)}")
        if not np.all(np.isfinite(coords)):
            raise NonFiniteCoordinate("mesh contains NaN or infinite coordinates")
        coords.setflags(write=False)
        object.__setattr__(self, "ni", ni)
        object.__setattr__(self, "nj", nj)
        object.__setattr__(self, "coords", coords)

    @classmethod
    def from_xy(cls, ni, nj, x, y, name="mesh"):
        """Build from flat x/y arrays in node order (i fastest)."""
        x = np.asarray(x, dtype=np.float64).reshape(nj, ni)
        y = np.asarray(y, dtype=np.float64).reshape(nj, ni)
        return cls(ni, nj, np.stack([x.T, y.T], axis=-1), name)

    @property
    def n_cells(self):
        return (self.ni - 1) * (self.nj - 1)

    @property
    def n_nodes(self):
        return self.ni * self.nj

    def points(self):
        """Node coordinates as an (ni*nj, 2) array in flat node order."""
        return self.coords.transpose(1, 0, 2).reshape(-1, 2)

    def with_coords(self, coords, name=None):
        return StructuredMesh(self.ni, self.nj, coords, self.name if name is None else name)

    def __eq__(self, other):
        if not isinstance(other, StructuredMesh):
            return NotImplemented
        return (
            self.ni == other.ni
            and self.nj == other.nj
            and self.name == other.name
            and np.array_equal(self.coords, other.coords)
        )


# ---------------------------------------------------------------------------
# file formats


def _parse_int(token, what):
    try:
        return int(token)
    except ValueError:
        raise MalformedHeader(f"{what} is not an integer: {token!r}") from None


def parse_plot3d(text, name="mesh"):
    """Read a single-block 2D ASCII Plot3D grid."""
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("ascii")
    lines = text.splitlines()
    # skip blank lines ahead of the header
    lines = [ln for ln in lines if ln.strip()] if lines else []
    if len(lines) < 2:
        raise MalformedHeader("missing block-count or dimension line")
    head = lines[0].split()
    if len(head) != 1 or _parse_int(head[0], "block count") != 1:
        raise MalformedHeader(f"expected a single block, got {lines[0].strip()!r}")
    dims = lines[1].split()
    if len(dims) != 2:
        raise MalformedHeader(f"expected 'ni nj', got {lines[1].strip()!r}")
    ni, nj = (_parse_int(t, "dimension") for t in dims)
    if ni < 2 or nj < 2:
        raise MalformedHeader(f"dimensions must be >= 2, got {ni}x{nj}")

    tokens = " ".join(lines[2:]).split()
    need = 2 * ni * nj
    if len(tokens) < need:
        raise TruncatedData(f"expected {need} coordinate values, found {len(tokens)}")
    if len(tokens) > need:
        raise DataError(f"{len(tokens) - need} trailing values after coordinates")
    try:
        values = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"bad coordinate value: {exc}") from None
    if not np.all(np.isfinite(values)):
        raise NonFiniteCoordinate("coordinate list contains NaN or infinity")
    n = ni * nj
    return StructuredMesh.from_xy(ni, nj, values[:n], values[n:], name=name)


def write_plot3d(mesh):
    pts = mesh.points()
    out = ["1", f"{mesh.ni} {mesh.nj}"]
    for col in (pts[:, 0], pts[:, 1]):
        out.append(" ".join(repr(float(v)) for v in col))
    return "\n".join(out) + "\n"


def parse_native(text):
    """Read the JSON mesh document ``{name, ni, nj, x, y}``."""
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not a JSON document: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("mesh document must be an object")
    for key in ("ni", "nj", "x", "y"):
        if key not in doc:
            raise SchemaError(f"missing field {key!r}")
    ni, nj = doc["ni"], doc["nj"]
    if not (isinstance(ni, int) and isinstance(nj, int)) or isinstance(ni, bool):
        raise SchemaError("ni and nj must be integers")
    if ni < 2 or nj < 2:
        raise SchemaError(f"dimensions must be >= 2, got {ni}x{nj}")
    x, y = doc["x"], doc["y"]
    if not isinstance(x, list) or not isinstance(y, list):
        raise SchemaError("x and y must be arrays")
    if len(x) != ni * nj or len(y) != ni * nj:
        raise LengthMismatch(f"x/y lengths {len(x)}/{len(y)} != ni*nj = {ni * nj}")
    try:
        xa = np.array(x, dtype=np.float64)
        ya = np.array(y, dtype=np.float64)
    except (TypeError, ValueError):
        raise SchemaError("coordinates must be numbers") from None
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
        raise NonFiniteCoordinate("coordinate list contains NaN or infinity")
    return StructuredMesh.from_xy(ni, nj, xa, ya, name=str(doc.get("name", "mesh")))


def write_native(mesh):
    pts = mesh.points()
    doc = {
        "name": mesh.name,
        "ni": mesh.ni,
        "nj": mesh.nj,
        "x": [float(v) for v in pts[:, 0]],
        "y": [float(v) for v in pts[:, 1]],
    }
    return json.dumps(doc)


def load_mesh(path):
    """Load a mesh file, choosing the reader by extension (.json = native)."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".json":
        mesh = parse_native(data)
        if mesh.name == "mesh":
            mesh = mesh.with_coords(mesh.coords, name=path.stem)
        return mesh
    return parse_plot3d(data, name=path.stem)


def save_mesh(mesh, path):
    path = Path(path)
    text = write_native(mesh) if path.suffix.lower() == ".json" else write_plot3d(mesh)
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# scalar metrics


def aspect_ratio_tri(l0, l1, l2):
    """Longest side over ``4*sqrt(3)*S`` with S from Heron's formula.

    The expression is evaluated as written; it is not dimensionless and an
    equilateral unit triangle gives 1/3.
    """
    sides = sorted(float(v) for v in (l0, l1, l2))
    a, b, c = sides
    if a <= 0 or a + b <= c:
        raise DegenerateTriangle(f"sides {l0}, {l1}, {l2} do not form a triangle")
    s = 0.5 * (a + b + c)
    # Kahan's stable form of Heron's formula
    area = 0.25 * math.sqrt((c + (b + a)) * (a - (c - b)) * (a + (c - b)) * (c + (b - a)))
    if not area > 0:
        raise DegenerateTriangle(f"sides {l0}, {l1}, {l2} give zero area (s={s})")
    return c / (4.0 * _SQRT3 * area)


def skewness(q_max, q_min, q_ideal=90.0):
    """Equiangle skewness from extreme corner angles (degrees), clamped to [0, 1]."""
    if not (0.0 < q_ideal < 180.0):
        raise DomainError(f"q_ideal must lie in (0, 180), got {q_ideal}")
    if not (0.0 <= q_min <= q_ideal <= q_max <= 360.0):
        raise DomainError(
            f"need 0 <= q_min <= q_ideal <= q_max <= 360, got {q_min}, {q_ideal}, {q_max}"
        )
    val = max((q_max - q_ideal) / (180.0 - q_ideal), (q_ideal - q_min) / q_ideal)
    return min(max(val, 0.0), 1.0)


# ---------------------------------------------------------------------------
# vectorized cell features


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _tri_aspect(p, q, r):
    l0 = np.linalg.norm(q - p, axis=-1)
    l1 = np.linalg.norm(r - q, axis=-1)
    l2 = np.linalg.norm(p - r, axis=-1)
    area = 0.5 * np.abs(_cross(q - p, r - p))
    longest = np.maximum(np.maximum(l0, l1), l2)
    with np.errstate(divide="ignore"):
        return longest / (4.0 * _SQRT3 * area), area


def _first_bad(mask):
    ci, cj = np.argwhere(mask)[0]
    return int(ci), int(cj)


def _feature_grid(coords):
    """Features for every cell of a node grid, shape (ni-1, nj-1, 6)."""
    p00 = coords[:-1, :-1]
    p10 = coords[1:, :-1]
    p11 = coords[1:, 1:]
    p01 = coords[:-1, 1:]
    corners = (p00, p10, p11, p01)

    area = 0.5 * (
        _cross(p00, p10) + _cross(p10, p11) + _cross(p11, p01) + _cross(p01, p00)
    )
    bad = area <= AREA_EPS
    if np.any(bad):
        ci, cj = _first_bad(bad)
        raise DegenerateCell(
            f"cell ({ci},{cj}) has non-positive area {area[ci, cj]:.3e}", ci, cj
        )

    angles = []
    for k in range(4):
        here = corners[k]
        a = corners[(k + 1) % 4] - here
        b = corners[(k - 1) % 4] - here
        ang = np.degrees(np.arctan2(_cross(a, b), np.sum(a * b, axis=-1)))
        angles.append(np.mod(ang, 360.0))
    angles = np.stack(angles, axis=-1)
    q_max = angles.max(axis=-1)
    q_min = angles.min(axis=-1)
    skew = np.clip(np.maximum((q_max - 90.0) / 90.0, (90.0 - q_min) / 90.0), 0.0, 1.0)
    ortho = np.abs(angles - 90.0).max(axis=-1)

    # both diagonal splits, worst of the four triangles
    aspect = None
    for tri in ((p00, p10, p11), (p00, p11, p01), (p10, p11, p01), (p10, p01, p00)):
        ar, tri_area = _tri_aspect(*tri)
        collapsed = tri_area <= AREA_EPS
        if np.any(collapsed):
            ci, cj = _first_bad(collapsed)
            raise DegenerateCell(f"cell ({ci},{cj}) has a collapsed corner", ci, cj)
        aspect = ar if aspect is None else np.maximum(aspect, ar)

    centroid = 0.25 * (p00 + p10 + p11 + p01)

    nci, ncj = area.shape
    ratio = np.ones_like(area)
    dist_sum = np.zeros_like(area)
    dist_sq = []
    count = np.zeros(area.shape, dtype=np.int64)
    # neighbour slots in fixed order: -i, +i, -j, +j
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        src_i = slice(max(-di, 0), nci - max(di, 0))
        src_j = slice(max(-dj, 0), ncj - max(dj, 0))
        nb_i = slice(max(di, 0), nci - max(-di, 0))
        nb_j = slice(max(dj, 0), ncj - max(-dj, 0))
        present = np.zeros(area.shape, dtype=bool)
        present[src_i, src_j] = True
        nb_area = np.ones_like(area)
        nb_area[src_i, src_j] = area[nb_i, nb_j]
        r = np.maximum(area / nb_area, nb_area / area)
        ratio = np.where(present, np.maximum(ratio, r), ratio)
        d = np.zeros_like(area)
        d[src_i, src_j] = np.linalg.norm(centroid[nb_i, nb_j] - centroid[src_i, src_j], axis=-1)
        dist_sum = dist_sum + d
        dist_sq.append((d, present))
        count = count + present
    safe = np.maximum(count, 1)
    mean = dist_sum / safe
    var = np.zeros_like(area)
    for d, present in dist_sq:
        var = var + np.where(present, (d - mean) ** 2, 0.0)
    var = var / safe
    distribution = np.where(count >= 2, np.sqrt(var) / np.where(mean > 0, mean, 1.0), 0.0)

    return np.stack([area, aspect, skew, ortho, ratio, distribution], axis=-1)


def cell_feature_matrix(mesh):
    """All cell features as an (n_cells, 6) array in flat cell order."""
    grid = _feature_grid(mesh.coords)
    return np.ascontiguousarray(grid.transpose(1, 0, 2).reshape(-1, 6))


def cell_features(mesh, ci, cj):
    """The six features of cell (ci, cj): area, aspect ratio, skewness,
    orthogonality deviation, smoothness and distribution."""
    if not (0 <= ci < mesh.ni - 1 and 0 <= cj < mesh.nj - 1):
        raise IndexOutOfRange(
            f"cell ({ci},{cj}) outside {mesh.ni - 1}x{mesh.nj - 1} cells"
        )
    # a 3x3-cell window holds every neighbour the cell can see
    i0, j0 = max(ci - 1, 0), max(cj - 1, 0)
    i1, j1 = min(ci + 2, mesh.ni - 1), min(cj + 2, mesh.nj - 1)
    window = mesh.coords[i0 : i1 + 1, j0 : j1 + 1]
    try:
        grid = _feature_grid(window)
    except DegenerateCell as exc:
        gi, gj = exc.ci + i0, exc.cj + j0
        raise DegenerateCell(f"cell ({gi},{gj}) is degenerate", gi, gj) from None
    return grid[ci - i0, cj - j0].copy()


@dataclass
class QualityReport:
    ci: np.ndarray
    cj: np.ndarray
    table: np.ndarray  # (n_cells, 6)
    aggregates: dict = field(default_factory=dict)

    def row(self, ci, cj, ni):
        return self.table[cj * (ni - 1) + ci]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("ci", "cj") + FEATURE_NAMES)
        for k in range(len(self.table)):
            writer.writerow(
                [int(self.ci[k]), int(self.cj[k])] + [repr(float(v)) for v in self.table[k]]
            )
        return buf.getvalue()


def mesh_quality_report(mesh):
    table = cell_feature_matrix(mesh)
    nci = mesh.ni - 1
    idx = np.arange(mesh.n_cells)
    aggregates = {
        name: {
            "min": float(table[:, k].min()),
            "max": float(table[:, k].max()),
            "mean": float(table[:, k].mean()),
        }
        for k, name in enumerate(FEATURE_NAMES)
    }
    return QualityReport(idx % nci, idx // nci, table, aggregates)
