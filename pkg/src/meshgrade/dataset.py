"""Labeled mesh datasets: NACA-Market ingestion and a synthetic generator.

Synthetic meshes start from a rectangle or a quarter-like annulus sector and
receive any combination of three defects, one per quality property:

* ortho   - a band of grid rows zig-zags along the j direction so the
            i-lines tilt by +-45*magnitude degrees;
* smooth  - spacings along every j-line alternate between (1+m) and (1-m);
* distrib - nodes along every i-line are redistributed with ``t**(1+2m)``.

The eight flag combinations map to the eight class labels.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DefectCollapse,
    DegenerateCell,
    DimensionTooSmall,
    MissingManifest,
    NoParsableFiles,
    NonFiniteCoordinate,
    SchemaError,
)
from .graph import SparseGraph, build_element_graph
from .mesh import StructuredMesh, cell_feature_matrix, load_mesh
from .rng import SplitMix64, derive_seed
from .train import LABEL_NAMES

log = logging.getLogger(__name__)

# flag set of each label, in label order
LABEL_FLAGS = (
    frozenset(),
    frozenset({"ortho"}),
    frozenset({"smooth"}),
    frozenset({"distrib"}),
    frozenset({"ortho", "smooth"}),
    frozenset({"ortho", "distrib"}),
    frozenset({"smooth", "distrib"}),
    frozenset({"ortho", "smooth", "distrib"}),
)

# a property counts as defective when its aggregate exceeds this value
DEFECT_THRESHOLDS = {"ortho": 8.0, "smooth": 1.6, "distrib": 0.125}
MAGNITUDE_RANGE = (0.4, 0.8)
ANNULUS_SPAN = math.pi / 4


def label_of(flags):
    return LABEL_FLAGS.index(frozenset(flags))


@dataclass
class LabeledGraphDataset:
    items: list  # [(SparseGraph, label)]
    label_names: tuple = LABEL_NAMES
    provenance: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        widths = {g.f for g, _ in self.items}
        modes = {g.mode for g, _ in self.items}
        if len(widths) > 1 or len(modes) > 1:
            raise DataError("all graphs must share mode and feature width")
        for _, lab in self.items:
            if not 0 <= lab < len(self.label_names):
                raise DataError(f"label {lab} out of range")

    def __len__(self):
        return len(self.items)

    @property
    def graphs(self):
        return [g for g, _ in self.items]

    @property
    def labels(self):
        return np.array([lab for _, lab in self.items], dtype=np.int64)

    def counts(self):
        return np.bincount(self.labels, minlength=len(self.label_names))

    def subset(self, idx):
        return LabeledGraphDataset(
            [self.items[i] for i in idx], self.label_names, dict(self.provenance)
        )


# ---------------------------------------------------------------------------
# metric aggregates


def defect_aggregates(mesh_or_features):
    """Scalar summaries that decide each property: max orthogonality
    deviation, median smoothness and mean distribution."""
    if isinstance(mesh_or_features, StructuredMesh):
        feats = cell_feature_matrix(mesh_or_features)
    else:
        feats = np.asarray(mesh_or_features)
    return {
        "ortho": float(feats[:, 3].max()),
        "smooth": float(np.median(feats[:, 4])),
        "distrib": float(feats[:, 5].mean()),
    }


def measured_flags(mesh_or_features):
    agg = defect_aggregates(mesh_or_features)
    return frozenset(k for k, v in agg.items() if v > DEFECT_THRESHOLDS[k])


def threshold_classify(mesh_or_features):
    """Label predicted by thresholding the three aggregates."""
    return label_of(measured_flags(mesh_or_features))


# ---------------------------------------------------------------------------
# synthetic meshes


def gen_base_grid(ni, nj, profile="rect", name=None):
    """Uniform unit-square grid (``rect``) or polar sector between radii 1
    and 2 (``annulus``); i runs outward so cells are positively oriented."""
    if ni < 3 or nj < 3:
        raise DimensionTooSmall(f"base grids need ni, nj >= 3, got {ni}x{nj}")
    u = np.arange(ni) / (ni - 1)
    v = np.arange(nj) / (nj - 1)
    U, V = np.meshgrid(u, v, indexing="ij")
    if profile == "rect":
        coords = np.stack([U, V], axis=-1)
    elif profile == "annulus":
        r, t = 1.0 + U, ANNULUS_SPAN * V
        coords = np.stack([r * np.cos(t), r * np.sin(t)], axis=-1)
    else:
        raise ValueError(f"unknown profile {profile!r}")
    return StructuredMesh(ni, nj, coords, name or f"{profile}_{ni}x{nj}")


def _redistribute(line, targets):
    """Move nodes of a polyline to the given normalized arc-length positions."""
    seg = np.linalg.norm(np.diff(line, axis=0), axis=-1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    s /= s[-1]
    return np.stack([np.interp(targets, s, line[:, 0]), np.interp(targets, s, line[:, 1])], axis=-1)


def _alternating(n_seg, m, phase):
    d = 1.0 + m * (-1.0) ** (np.arange(n_seg) + phase)
    t = np.concatenate([[0.0], np.cumsum(d)])
    return t / t[-1]


def _smooth_defect(coords, m, phase):
    out = coords.copy()
    targets = _alternating(coords.shape[1] - 1, m, phase)
    for i in range(coords.shape[0]):
        out[i] = _redistribute(coords[i], targets)
    return out


def _distrib_defect(coords, m):
    out = coords.copy()
    ni = coords.shape[0]
    targets = (np.arange(ni) / (ni - 1)) ** (1.0 + 2.0 * m)
    for j in range(coords.shape[1]):
        out[:, j] = _redistribute(coords[:, j], targets)
    return out


def _ortho_defect(coords, m, start):
    """Shift every other row inside a band along the local j tangent."""
    out = coords.copy()
    ni = coords.shape[0]
    width = max(2, 2 * ((ni - 1) // 4))
    start = min(start, ni - 1 - width)
    slope = math.tan(math.radians(45.0 * m))
    for i in range(start + 1, start + width, 2):
        tangent = np.gradient(coords[i], axis=0)
        tangent /= np.linalg.norm(tangent, axis=-1, keepdims=True)
        step = np.linalg.norm(coords[i] - coords[i - 1], axis=-1)
        out[i] = coords[i] + (slope * step)[:, None] * tangent
    return out


def inject_defects(mesh, flags, magnitude, seed=0):
    """Apply the requested defects; magnitude in (0, 1].

    If the result has a degenerate cell the magnitude is reduced by a quarter
    and the attempt repeated, at most three times.
    """
    flags = frozenset(flags)
    unknown = flags - {"ortho", "smooth", "distrib"}
    if unknown:
        raise ValueError(f"unknown defect flags {sorted(unknown)}")
    if not (0 < magnitude <= 1):
        raise ValueError(f"magnitude must lie in (0, 1], got {magnitude}")
    if not flags:
        return mesh
    rng = SplitMix64(seed)
    phase = rng.randint(0, 1)
    start = rng.randint(0, max(0, (mesh.ni - 1) // 2))
    m = magnitude
    for _ in range(4):
        coords = mesh.coords
        # coincident nodes make tangents 0/0; that is reported as a collapse below
        with np.errstate(invalid="ignore", divide="ignore"):
            if "smooth" in flags:
                coords = _smooth_defect(coords, m, phase)
            if "distrib" in flags:
                coords = _distrib_defect(coords, m)
            if "ortho" in flags:
                coords = _ortho_defect(coords, m, start)
        try:
            out = mesh.with_coords(coords)
            cell_feature_matrix(out)
            return out
        except (DegenerateCell, NonFiniteCoordinate):
            m *= 0.75
    raise DefectCollapse(f"defects {sorted(flags)} collapse the mesh even at magnitude {m:.3f}")


def synth_mesh(label, grid, seed, profile="annulus"):
    """One synthetic mesh whose measured defects match ``label``; returns
    (mesh, parameters)."""
    ni, nj = grid
    base = gen_base_grid(ni, nj, profile)
    flags = LABEL_FLAGS[label]
    for attempt in range(8):
        rng = SplitMix64(derive_seed(seed, attempt))
        m = rng.uniform(*MAGNITUDE_RANGE)
        mesh = inject_defects(base, flags, m, rng.next_u64())
        if measured_flags(mesh) == flags:
            params = {"label": LABEL_NAMES[label], "magnitude": m, "attempt": attempt}
            return mesh, params
    raise DefectCollapse(f"could not realize label {LABEL_NAMES[label]} on a {ni}x{nj} grid")


def _synth_item(args):
    k, label, grid, seed, profile = args
    mesh, params = synth_mesh(label, grid, derive_seed(seed, k), profile)
    mesh = mesh.with_coords(mesh.coords, name=f"synth_{k:05d}")
    g = build_element_graph(mesh)
    g.label = label
    return g, params


def make_synthetic(count_per_label, grid=(17, 17), seed=0, profile="annulus", jobs=1):
    """Balanced synthetic dataset, ``count_per_label`` meshes for each of the
    eight labels, item order label-major.  Deterministic for a given seed and
    independent of ``jobs``."""
    if count_per_label < 1:
        raise ValueError("count_per_label must be >= 1")
    work = []
    for label in range(len(LABEL_FLAGS)):
        for c in range(count_per_label):
            k = label * count_per_label + c
            work.append((k, label, tuple(grid), seed, profile))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_synth_item, work))
    else:
        results = [_synth_item(w) for w in work]
    items = [(g, g.label) for g, _ in results]
    provenance = {
        "kind": "synthetic",
        "seed": seed,
        "grid": list(grid),
        "profile": profile,
        "count_per_label": count_per_label,
        "rng": "splitmix64",
        "magnitude_range": list(MAGNITUDE_RANGE),
        "thresholds": dict(DEFECT_THRESHOLDS),
        "items": [p for _, p in results],
    }
    return LabeledGraphDataset(items, LABEL_NAMES, provenance)


# ---------------------------------------------------------------------------
# on-disk datasets

MANIFEST = "manifest.json"


def write_dataset(ds, directory):
    """One graph document per item plus ``manifest.json`` mapping file -> label."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for k, (g, lab) in enumerate(ds.items):
        fname = f"item_{k:05d}.json"
        g.label = lab
        (directory / fname).write_text(g.to_json(), encoding="utf-8")
        files[fname] = ds.label_names[lab]
    manifest = {
        "label_names": list(ds.label_names),
        "provenance": ds.provenance,
        "files": files,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return directory


def _read_manifest(directory):
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise MissingManifest(f"no {MANIFEST} in {directory}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        files = doc["files"] if "files" in doc else doc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaError(f"bad manifest: {exc}") from None
    if not isinstance(files, dict):
        raise SchemaError("manifest must map file paths to label names")
    return doc, files


def load_dataset(directory):
    """Read a directory of graph documents written by :func:`write_dataset`."""
    directory = Path(directory)
    doc, files = _read_manifest(directory)
    names = tuple(doc.get("label_names", LABEL_NAMES))
    items = []
    for rel, lab in files.items():
        if lab not in names:
            raise SchemaError(f"unknown label {lab!r} for {rel}")
        items.append((SparseGraph.load(directory / rel), names.index(lab)))
    if not items:
        raise NoParsableFiles(f"manifest in {directory} lists no files")
    return LabeledGraphDataset(items, names, doc.get("provenance", {}))


def load_naca_market(directory, parser=load_mesh):
    """Convert a directory of labeled mesh files into element graphs.

    Labels come from ``manifest.json`` (relative path -> label name) or, when
    there is no manifest, from per-label subdirectories named ``W``, ``N-O``
    and so on.  ``parser`` turns a path into a StructuredMesh.  Files that
    fail to parse are logged and listed in ``dataset.skipped``.
    """
    directory = Path(directory)
    if (directory / MANIFEST).exists():
        _, files = _read_manifest(directory)
        entries = [(directory / rel, lab) for rel, lab in files.items()]
    else:
        entries = []
        for lab in LABEL_NAMES:
            sub = directory / lab
            if sub.is_dir():
                entries.extend((p, lab) for p in sorted(sub.iterdir()) if p.is_file())
        if not entries:
            raise MissingManifest(f"{directory} has neither {MANIFEST} nor label subdirectories")
    items, skipped = [], []
    for path, lab in entries:
        if lab not in LABEL_NAMES:
            skipped.append((str(path), f"unknown label {lab!r}"))
            continue
        try:
            g = build_element_graph(parser(path))
        except (DataError, OSError, UnicodeDecodeError) as exc:
            skipped.append((str(path), str(exc)))
            log.warning("skipping %s: %s", path, exc)
            continue
        g.label = LABEL_NAMES.index(lab)
        items.append((g, g.label))
    if not items:
        raise NoParsableFiles(f"none of {len(entries)} files in {directory} could be parsed")
    ds = LabeledGraphDataset(items, LABEL_NAMES, {"kind": "naca-market", "root": str(directory)})
    ds.skipped = skipped
    for name, count in zip(LABEL_NAMES, ds.counts()):
        log.info("label %s: %d meshes", name, count)
    return ds
