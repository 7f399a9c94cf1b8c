"""Mesh-to-graph conversion.

Two representations are supported.  The point graph uses mesh nodes as
graph nodes, connected along grid lines plus any pair of nodes closer than a
proximity radius.  The element graph uses cells as graph nodes; adjacency
comes from the strength matrix ``E^T A_N E`` where ``E`` is the node/cell
incidence matrix and ``A_N`` the node adjacency with a zero diagonal.  Two
quads sharing a side score exactly 6.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError, DimensionMismatch, NonPositiveRadius, SchemaError
from .mesh import cell_feature_matrix, load_mesh

MODES = ("point", "element")
_MAGIC = b"MQEG"


def _sorted_unique_pairs(pairs, n):
    """Deduplicate (row, col) pairs and sort lexicographically."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    keys = np.unique(pairs[:, 0] * n + pairs[:, 1])
    return np.stack([keys // n, keys % n], axis=1)


def symmetrize(pairs, n):
    """Both directions of every pair, self-loops dropped, sorted."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    both = np.concatenate([pairs, pairs[:, ::-1]])
    both = both[both[:, 0] != both[:, 1]]
    return _sorted_unique_pairs(both, n)


@dataclass(eq=False)
class SparseGraph:
    n: int
    features: np.ndarray  # (n, f)
    edges: np.ndarray  # (E, 2), symmetric, sorted
    mode: str = "element"
    name: str = "graph"
    label: int | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.features.ndim != 2 or self.features.shape[0] != self.n:
            raise DataError(f"features shape {self.features.shape} does not match n={self.n}")

    @property
    def f(self):
        return self.features.shape[1]

    @property
    def num_edges(self):
        """Undirected edge count."""
        return len(self.edges) // 2

    def validate(self):
        """Raise DataError unless the graph satisfies its structural invariants."""
        if self.mode not in MODES:
            raise DataError(f"unknown graph mode {self.mode!r}")
        e = self.edges
        if len(e):
            if e.min() < 0 or e.max() >= self.n:
                raise DataError("edge index out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise DataError("graph contains self-loops")
            keys = e[:, 0] * self.n + e[:, 1]
            if np.any(np.diff(keys) <= 0):
                raise DataError("edges are not sorted and unique")
            rev = np.sort(e[:, 1] * self.n + e[:, 0])
            if not np.array_equal(rev, keys):
                raise DataError("adjacency is not symmetric")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")
        return self

    def adjacency(self, dtype=np.int64):
        """Adjacency as a CSR matrix (zero diagonal)."""
        data = np.ones(len(self.edges), dtype=dtype)
        return sp.csr_matrix((data, (self.edges[:, 0], self.edges[:, 1])), shape=(self.n, self.n))

    def edge_set(self):
        """Undirected edges as a set of (i, j) tuples with i < j."""
        return {(int(a), int(b)) for a, b in self.edges if a < b}

    # serialization -------------------------------------------------------

    def to_json(self):
        doc = {
            "mode": self.mode,
            "n": int(self.n),
            "f": int(self.f),
            "features": [float(v) for v in self.features.ravel()],
            "edges": [int(v) for v in self.edges.ravel()],
            "name": self.name,
        }
        if self.label is not None:
            doc["label"] = int(self.label)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
            n, f = int(doc["n"]), int(doc["f"])
            feats = np.array(doc["features"], dtype=np.float64).reshape(n, f)
            edges = np.array(doc["edges"], dtype=np.int64).reshape(-1, 2)
            mode = doc["mode"]
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"bad graph document: {exc}") from None
        label = doc.get("label")
        return cls(n, feats, edges, mode, doc.get("name", "graph"), label).validate()

    def to_bytes(self):
        head = _MAGIC + struct.pack("<IIB", self.n, self.f, MODES.index(self.mode))
        feats = self.features.astype("<f8").tobytes()
        pairs = struct.pack("<I", len(self.edges)) + self.edges.astype("<u4").tobytes()
        return head + feats + pairs

    @classmethod
    def from_bytes(cls, blob, name="graph"):
        if blob[:4] != _MAGIC:
            raise SchemaError("missing MQEG magic")
        n, f, mode = struct.unpack_from("<IIB", blob, 4)
        off = 13
        feats = np.frombuffer(blob, dtype="<f8", count=n * f, offset=off).reshape(n, f)
        off += 8 * n * f
        (m,) = struct.unpack_from("<I", blob, off)
        edges = np.frombuffer(blob, dtype="<u4", count=2 * m, offset=off + 4).reshape(m, 2)
        return cls(n, feats.astype(np.float64), edges.astype(np.int64), MODES[mode], name).validate()

    def save(self, path):
        path = Path(path)
        if path.suffix == ".mqeg":
            path.write_bytes(self.to_bytes())
        else:
            path.write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.suffix == ".mqeg":
            return cls.from_bytes(path.read_bytes(), name=path.stem)
        return cls.from_json(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# point graph


def _grid_edge_pairs(ni, nj):
    idx = np.arange(ni * nj).reshape(nj, ni)
    along_i = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    along_j = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    return np.concatenate([along_i, along_j])


def _node_features(mesh):
    pts = mesh.points()
    boundary = np.zeros((mesh.nj, mesh.ni))
    boundary[0, :] = boundary[-1, :] = boundary[:, 0] = boundary[:, -1] = 1.0
    return np.column_stack([pts, boundary.ravel()])


def build_node_adjacency(mesh):
    """Point graph with grid-line edges only; features are [x, y, boundary_flag]."""
    n = mesh.n_nodes
    edges = symmetrize(_grid_edge_pairs(mesh.ni, mesh.nj), n)
    return SparseGraph(n, _node_features(mesh), edges, "point", mesh.name)


def _closer_than(diff, r_p):
    """Shared distance predicate so the hashed and brute-force paths agree to the last bit."""
    return np.sqrt(np.einsum("...k,...k->...", diff, diff)) < r_p


def proximity_edges_bruteforce(points, r_p):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not r_p > 0:
        raise NonPositiveRadius(f"radius must be positive, got {r_p}")
    close = _closer_than(pts[:, None, :] - pts[None, :, :], r_p)
    i, j = np.nonzero(np.triu(close, k=1))
    return {(int(a), int(b)) for a, b in zip(i, j)}


def proximity_pairs(points, r_p):
    """Pairs (i < j) with distance strictly below ``r_p``, as an (m, 2) array.

    Points are hashed into square buckets of side ``r_p``; only the bucket
    itself and four of its eight neighbours are scanned so each bucket pair is
    visited once.  The bucket side is inflated by a relative 1e-9 so that
    rounding in the floor division cannot push a close pair two buckets apart.
    """
    if not r_p > 0:
        raise NonPositiveRadius(f"radius must be positive, got {r_p}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    side = r_p * (1.0 + 1e-9)
    cells = np.floor((pts - pts.min(axis=0)) / side).astype(np.int64)
    order = np.lexsort((cells[:, 1], cells[:, 0]))
    sc = cells[order]
    change = np.nonzero(np.any(np.diff(sc, axis=0) != 0, axis=1))[0] + 1
    starts = np.concatenate([[0], change])
    stops = np.concatenate([change, [len(sc)]])
    buckets = {
        (int(sc[s, 0]), int(sc[s, 1])): order[s:e] for s, e in zip(starts, stops)
    }
    found = []
    for (cx, cy), members in buckets.items():
        here = pts[members]
        for dx, dy in ((0, 0), (1, -1), (1, 0), (1, 1), (0, 1)):
            other = buckets.get((cx + dx, cy + dy))
            if other is None:
                continue
            close = _closer_than(here[:, None, :] - pts[other][None, :, :], r_p)
            a, b = np.nonzero(close)
            if dx == 0 and dy == 0:
                keep = a < b
                a, b = a[keep], b[keep]
            if len(a):
                p, q = members[a], other[b]
                found.append(np.stack([np.minimum(p, q), np.maximum(p, q)], axis=1))
    if not found:
        return np.zeros((0, 2), dtype=np.int64)
    return _sorted_unique_pairs(np.concatenate(found), len(pts))


def proximity_edges(points, r_p):
    """Unordered index pairs closer than ``r_p``, as a set of (i, j) with i < j."""
    return {(int(a), int(b)) for a, b in proximity_pairs(points, r_p)}


def min_edge_length(mesh):
    c = mesh.coords
    di = np.linalg.norm(c[1:, :] - c[:-1, :], axis=-1)
    dj = np.linalg.norm(c[:, 1:] - c[:, :-1], axis=-1)
    return float(min(di.min(), dj.min()))


def default_radius(mesh):
    return 1.5 * min_edge_length(mesh)


def build_point_graph(mesh, r_p=None):
    """Grid-line edges united with proximity edges (``dist < r_p``)."""
    if r_p is None:
        r_p = default_radius(mesh)
    base = build_node_adjacency(mesh)
    prox = proximity_pairs(mesh.points(), r_p)
    edges = symmetrize(np.concatenate([_grid_edge_pairs(mesh.ni, mesh.nj), prox]), base.n)
    return SparseGraph(base.n, base.features, edges, "point", mesh.name)


# ---------------------------------------------------------------------------
# element graph


def build_incidence(mesh):
    """Sparse (n_nodes, n_cells) 0/1 matrix; column j marks the corners of cell j."""
    ni, nj = mesh.ni, mesh.nj
    ci, cj = np.meshgrid(np.arange(ni - 1), np.arange(nj - 1))
    ci, cj = ci.ravel(), cj.ravel()
    base = cj * ni + ci
    rows = np.stack([base, base + 1, base + ni, base + ni + 1], axis=1).ravel()
    cols = np.repeat(np.arange(len(base)), 4)
    data = np.ones(len(rows), dtype=np.int64)
    return sp.csc_matrix((data, (rows, cols)), shape=(ni * nj, len(base)))


def strength_matrix(e, a_n):
    """``E^T A_N E`` as two sparse-sparse products in integer arithmetic.

    ``a_n`` may be a point-mode SparseGraph or any sparse/dense square matrix.
    """
    if isinstance(a_n, SparseGraph):
        a_n = a_n.adjacency()
    a_n = sp.csr_matrix(a_n, dtype=np.int64)
    e = sp.csc_matrix(e, dtype=np.int64)
    if a_n.shape[0] != a_n.shape[1] or a_n.shape[0] != e.shape[0]:
        raise DimensionMismatch(f"A_N {a_n.shape} incompatible with E {e.shape}")
    return (e.T.tocsr() @ (a_n @ e)).tocsr()


def threshold_adjacency(s, strength=6):
    """0/1 CSR adjacency with ones where ``S_ij == strength`` off the diagonal."""
    s = sp.coo_matrix(s)
    keep = (s.data == strength) & (s.row != s.col)
    n = s.shape[0]
    data = np.ones(int(keep.sum()), dtype=np.int64)
    return sp.csr_matrix((data, (s.row[keep], s.col[keep])), shape=(n, n))


def _adjacency_edges(a):
    a = sp.coo_matrix(a)
    return _sorted_unique_pairs(np.stack([a.row, a.col], axis=1), a.shape[0])


def element_adjacency(mesh, diagonal="zero"):
    """Cell adjacency pairs via the strength matrix.

    ``diagonal="ones"`` reproduces the older formulation where ``A_N`` carries
    self-loops; shared sides then score 8 instead of 6.  It exists for
    benchmarking only.
    """
    e = build_incidence(mesh)
    n = mesh.n_nodes
    pairs = _grid_edge_pairs(mesh.ni, mesh.nj)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    if diagonal == "zero":
        data = np.ones(len(rows), dtype=np.int64)
        a_n = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
        strength = 6
    elif diagonal == "ones":
        diag = np.arange(n)
        rows, cols = np.concatenate([rows, diag]), np.concatenate([cols, diag])
        a_n = sp.csr_matrix((np.ones(len(rows), dtype=np.int64), (rows, cols)), shape=(n, n))
        strength = 8
    else:
        raise ValueError(f"diagonal must be 'zero' or 'ones', got {diagonal!r}")
    return _adjacency_edges(threshold_adjacency(strength_matrix(e, a_n), strength))


def build_element_graph(mesh, diagonal="zero"):
    """Cell graph: features from the six cell metrics, edges between cells sharing a side."""
    feats = cell_feature_matrix(mesh)
    edges = element_adjacency(mesh, diagonal)
    return SparseGraph(mesh.n_cells, feats, edges, "element", mesh.name)


def shared_side_oracle(mesh):
    """Brute-force cell adjacency: two cells are adjacent iff they share exactly
    one grid side.  Quadratic in the number of cells."""
    ni, nj = mesh.ni, mesh.nj
    sides = []
    for cj in range(nj - 1):
        for ci in range(ni - 1):
            a = cj * ni + ci
            corners = (a, a + 1, a + ni + 1, a + ni)
            sides.append({frozenset((corners[k], corners[(k + 1) % 4])) for k in range(4)})
    out = set()
    for p in range(len(sides)):
        for q in range(p + 1, len(sides)):
            if len(sides[p] & sides[q]) == 1:
                out.add((p, q))
    return out


# ---------------------------------------------------------------------------
# batch conversion


def convert_mesh(mesh, mode="element", radius=None):
    if mode == "element":
        return build_element_graph(mesh)
    if mode == "point":
        return build_point_graph(mesh, radius)
    raise ValueError(f"unknown mode {mode!r}")


def _convert_path(args):
    path, mode, radius = args
    return convert_mesh(load_mesh(path), mode, radius)


def convert_files(paths, mode="element", radius=None, jobs=1):
    """Convert mesh files to graphs; output order follows input order for any ``jobs``."""
    work = [(str(p), mode, radius) for p in paths]
    if jobs <= 1 or len(work) <= 1:
        return [_convert_path(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_convert_path, work))
