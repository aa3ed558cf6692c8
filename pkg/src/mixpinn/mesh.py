"""Synthetic soft/rigid tetrahedral phantom: generation, labeling, serialization.

All coordinates are millimeters. Node labels are integers: 0 marks soft
tissue, 1..R mark rigid components. An edge carries label k > 0 only when
both of its endpoints carry label k; every other edge is soft (label 0).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

__all__ = [
    "Mesh",
    "MeshError",
    "MeshFormatError",
    "PhantomConfig",
    "center_mesh",
    "derive_edges",
    "generate_phantom",
    "label_edges",
    "load_mesh",
    "mesh_hash",
    "save_mesh",
    "tet_volumes",
]

_FACES = ("-x", "+x", "-y", "+y", "-z", "+z")


class MeshError(ValueError):
    """Invalid mesh data or configuration."""


class MeshFormatError(MeshError):
    """Malformed mesh file."""


# 6-tet subdivision of a hex cell (Freudenthal/Kuhn). Corner index is
# ix | iy << 1 | iz << 2. Applying the same split to every cell yields
# conforming faces; vertex orderings are chosen for positive signed volume.
_CELL_TETS = np.array(
    [
        (0, 1, 3, 7),
        (0, 1, 7, 5),
        (0, 2, 7, 3),
        (0, 2, 6, 7),
        (0, 4, 5, 7),
        (0, 4, 7, 6),
    ],
    dtype=np.int64,
)

# The 6 undirected edges of a tet, as local vertex index pairs.
_TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], dtype=np.int64)


@dataclass(eq=False)
class Mesh:
    """Labeled tetrahedral mesh with fixed and probe-facing node sets.

    Edges are always derived from the tetrahedra; construct instances via
    :func:`make_mesh` (or the loaders) so that edges, edge labels and the
    validity checks stay consistent.
    """

    rest_positions: np.ndarray  # (N, 3) float64, mm
    tetrahedra: np.ndarray  # (M, 4) int64
    node_labels: np.ndarray  # (N,) int64
    fixed_nodes: np.ndarray  # sorted int64 indices
    back_surface_nodes: np.ndarray  # sorted int64 indices
    edges: np.ndarray  # (E, 2) int64, i < j, lexicographically sorted
    edge_labels: np.ndarray  # (E,) int64

    @property
    def node_count(self) -> int:
        return self.rest_positions.shape[0]

    @property
    def rigid_count(self) -> int:
        return int(self.node_labels.max(initial=0))

    def rigid_component(self, label: int) -> np.ndarray:
        """Node indices of rigid component ``label`` (1..R), ascending."""
        return np.flatnonzero(self.node_labels == label)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mesh):
            return NotImplemented
        return (
            np.array_equal(self.rest_positions, other.rest_positions)
            and np.array_equal(self.tetrahedra, other.tetrahedra)
            and np.array_equal(self.node_labels, other.node_labels)
            and np.array_equal(self.fixed_nodes, other.fixed_nodes)
            and np.array_equal(self.back_surface_nodes, other.back_surface_nodes)
        )


@dataclass
class PhantomConfig:
    """Axis-aligned soft box with rigid inclusion boxes.

    ``inclusions`` is a sequence of ``(lo, hi)`` corner pairs in box
    coordinates (origin at the box corner, before centering). Inclusion k
    becomes rigid label k+1. ``fixed_face`` selects the anterior face whose
    nodes are pinned; the opposite face becomes the probe-facing surface.
    """

    box_mm: tuple[float, float, float] = (160.0, 80.0, 80.0)
    cells: tuple[int, int, int] = (16, 8, 8)
    inclusions: tuple = (
        ((30.0, 30.0, 40.0), (70.0, 60.0, 70.0)),
        ((90.0, 30.0, 40.0), (130.0, 60.0, 70.0)),
    )
    fixed_face: str = "-z"
    seed: int = 0


def derive_edges(tetrahedra: np.ndarray) -> np.ndarray:
    """Unique undirected edges of a tet list, sorted lexicographically."""
    tets = np.asarray(tetrahedra, dtype=np.int64).reshape(-1, 4)
    pairs = tets[:, _TET_EDGES].reshape(-1, 2)
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


def label_edges(node_labels: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Edge label k > 0 iff both endpoints are labeled k, else 0."""
    a = node_labels[edges[:, 0]]
    b = node_labels[edges[:, 1]]
    return np.where((a == b) & (a > 0), a, 0).astype(np.int64)


def tet_volumes(positions: np.ndarray, tetrahedra: np.ndarray) -> np.ndarray:
    """Signed tet volumes (positive for correctly oriented tets)."""
    p = positions[tetrahedra]
    d = p[:, 1:] - p[:, :1]
    return np.linalg.det(d) / 6.0


def make_mesh(positions, tetrahedra, node_labels, fixed_nodes, back_nodes) -> Mesh:
    """Assemble and validate a Mesh, deriving edges and edge labels."""
    positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    tetrahedra = np.ascontiguousarray(tetrahedra, dtype=np.int64).reshape(-1, 4)
    node_labels = np.ascontiguousarray(node_labels, dtype=np.int64).reshape(-1)
    fixed_nodes = np.unique(np.asarray(fixed_nodes, dtype=np.int64))
    back_nodes = np.unique(np.asarray(back_nodes, dtype=np.int64))
    if tetrahedra.size and (tetrahedra.min() < 0 or tetrahedra.max() >= positions.shape[0]):
        raise MeshError("tetrahedra reference out-of-range node index")
    edges = derive_edges(tetrahedra)
    mesh = Mesh(
        rest_positions=positions,
        tetrahedra=tetrahedra,
        node_labels=node_labels,
        fixed_nodes=fixed_nodes,
        back_surface_nodes=back_nodes,
        edges=edges,
        edge_labels=label_edges(node_labels, edges),
    )
    validate_mesh(mesh)
    return mesh


def validate_mesh(mesh: Mesh) -> None:
    n = mesh.node_count
    if n == 0:
        raise MeshError("mesh has no nodes")
    if mesh.node_labels.shape != (n,):
        raise MeshError("node label count does not match node count")
    for name, idx in (
        ("tetrahedra", mesh.tetrahedra),
        ("fixed_nodes", mesh.fixed_nodes),
        ("back_surface_nodes", mesh.back_surface_nodes),
    ):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise MeshError(f"{name} reference out-of-range node index")
    if mesh.node_labels.min(initial=0) < 0:
        raise MeshError("negative node label")
    if np.intersect1d(mesh.fixed_nodes, mesh.back_surface_nodes).size:
        raise MeshError("fixed and back-surface node sets overlap")
    if mesh.tetrahedra.size:
        vols = tet_volumes(mesh.rest_positions, mesh.tetrahedra)
        bad = np.flatnonzero(vols <= 0)
        if bad.size:
            raise MeshError(f"tet {bad[0]} has non-positive volume {vols[bad[0]]:g}")
    _check_rigid_connectivity(mesh)


def _check_rigid_connectivity(mesh: Mesh) -> None:
    # Each rigid component must be edge-connected through its own label,
    # otherwise the virtual-node/edge augmentations are ill-posed.
    for label in range(1, mesh.rigid_count + 1):
        nodes = mesh.rigid_component(label)
        if nodes.size == 0:
            raise MeshError(f"rigid label {label} has no nodes")
        if nodes.size == 1:
            continue
        sel = mesh.edges[mesh.edge_labels == label]
        remap = -np.ones(mesh.node_count, dtype=np.int64)
        remap[nodes] = np.arange(nodes.size)
        rows, cols = remap[sel[:, 0]], remap[sel[:, 1]]
        adj = coo_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(nodes.size, nodes.size)
        )
        n_comp, _ = connected_components(adj, directed=False)
        if n_comp != 1:
            raise MeshError(f"rigid label {label} is not edge-connected")


def _face_nodes(cells, axis: int, high: bool) -> np.ndarray:
    nx, ny, nz = cells
    ii, jj, kk = np.meshgrid(
        np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij"
    )
    coord = (ii, jj, kk)[axis]
    limit = (nx, ny, nz)[axis] if high else 0
    mask = coord == limit
    ids = (ii * (ny + 1) + jj) * (nz + 1) + kk
    return np.sort(ids[mask].ravel())


def generate_phantom(config: PhantomConfig) -> Mesh:
    """Build the structured soft box with rigid inclusions, centered at origin.

    Every hex cell is split into the same 6 tets so faces conform; node
    labels are assigned by half-open containment in the inclusion boxes.
    """
    nx, ny, nz = config.cells
    if min(nx, ny, nz) < 2:
        raise MeshError(f"grid resolution {config.cells} too coarse; need >= 2 cells per axis")
    if config.fixed_face not in _FACES:
        raise MeshError(f"unknown fixed_face {config.fixed_face!r}; expected one of {_FACES}")
    box = np.asarray(config.box_mm, dtype=np.float64)
    if np.any(box <= 0):
        raise MeshError("box dimensions must be positive")
    incl = [
        (np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64))
        for lo, hi in config.inclusions
    ]
    for k, (lo, hi) in enumerate(incl):
        if np.any(lo >= hi):
            raise MeshError(f"inclusion {k} has empty extent")
        if np.any(lo <= 0.0) or np.any(hi >= box):
            raise MeshError(f"inclusion {k} must lie strictly inside the box")
    for a in range(len(incl)):
        for b in range(a + 1, len(incl)):
            lo_a, hi_a = incl[a]
            lo_b, hi_b = incl[b]
            if np.all(hi_a > lo_b) and np.all(hi_b > lo_a):
                raise MeshError(f"inclusions {a} and {b} overlap")

    h = box / np.array([nx, ny, nz], dtype=np.float64)
    ii, jj, kk = np.meshgrid(
        np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij"
    )
    positions = np.stack([ii * h[0], jj * h[1], kk * h[2]], axis=-1).reshape(-1, 3)

    labels = np.zeros(positions.shape[0], dtype=np.int64)
    for k, (lo, hi) in enumerate(incl):
        inside = np.all((positions >= lo) & (positions < hi), axis=1)
        if not inside.any():
            raise MeshError(f"inclusion {k} contains no grid nodes")
        labels[inside] = k + 1

    # Cell corner ids, corner index = ix | iy<<1 | iz<<2.
    ci, cj, ck = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    corners = np.empty((nx * ny * nz, 8), dtype=np.int64)
    for c in range(8):
        bx, by, bz = c & 1, (c >> 1) & 1, (c >> 2) & 1
        corners[:, c] = (
            ((ci + bx) * (ny + 1) + (cj + by)) * (nz + 1) + (ck + bz)
        ).ravel()
    tets = corners[:, _CELL_TETS].reshape(-1, 4)

    axis = "xyz".index(config.fixed_face[1])
    high = config.fixed_face[0] == "+"
    fixed = _face_nodes(config.cells, axis, high)
    back = _face_nodes(config.cells, axis, not high)

    mesh = make_mesh(positions, tets, labels, fixed, back)
    return center_mesh(mesh)


def center_mesh(mesh: Mesh) -> Mesh:
    """Translate rest positions so that their mean is the origin."""
    centered = mesh.rest_positions - mesh.rest_positions.mean(axis=0)
    out = Mesh(
        rest_positions=centered,
        tetrahedra=mesh.tetrahedra,
        node_labels=mesh.node_labels,
        fixed_nodes=mesh.fixed_nodes,
        back_surface_nodes=mesh.back_surface_nodes,
        edges=mesh.edges,
        edge_labels=mesh.edge_labels,
    )
    return out


def mesh_hash(mesh: Mesh) -> int:
    """Stable 64-bit content hash used to pair meshes with derived artifacts."""
    digest = hashlib.sha256()
    digest.update(b"MIXMESH")
    for arr in (
        mesh.rest_positions.astype(np.float64),
        mesh.tetrahedra.astype(np.int64),
        mesh.node_labels.astype(np.int64),
        mesh.fixed_nodes.astype(np.int64),
        mesh.back_surface_nodes.astype(np.int64),
    ):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return int.from_bytes(digest.digest()[:8], "little")


def save_mesh(mesh: Mesh, path) -> None:
    """Write the line-oriented text format (edges are not stored)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("MIXMESH 1\n")
        fh.write(f"nodes {mesh.node_count}\n")
        for pos, lab in zip(mesh.rest_positions, mesh.node_labels):
            fh.write(f"{pos[0]:.17g} {pos[1]:.17g} {pos[2]:.17g} {lab}\n")
        fh.write(f"tets {mesh.tetrahedra.shape[0]}\n")
        for t in mesh.tetrahedra:
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]}\n")
        fh.write(f"fixed {mesh.fixed_nodes.size}\n")
        fh.write(" ".join(str(i) for i in mesh.fixed_nodes) + "\n")
        fh.write(f"back {mesh.back_surface_nodes.size}\n")
        fh.write(" ".join(str(i) for i in mesh.back_surface_nodes) + "\n")


class _LineReader:
    def __init__(self, path):
        with open(path, "r", encoding="ascii") as fh:
            self.lines = fh.read().splitlines()
        self.lineno = 0

    def next(self, what: str) -> str:
        if self.lineno >= len(self.lines):
            raise MeshFormatError(f"line {self.lineno + 1}: unexpected end of file, expected {what}")
        line = self.lines[self.lineno]
        self.lineno += 1
        return line

    def fail(self, message: str):
        raise MeshFormatError(f"line {self.lineno}: {message}")


def _read_count(reader: _LineReader, keyword: str) -> int:
    parts = reader.next(f"'{keyword} <count>'").split()
    if len(parts) != 2 or parts[0] != keyword:
        reader.fail(f"expected '{keyword} <count>'")
    try:
        count = int(parts[1])
    except ValueError:
        reader.fail(f"bad {keyword} count {parts[1]!r}")
    if count < 0:
        reader.fail(f"negative {keyword} count")
    return count


def _read_index_line(reader: _LineReader, count: int, what: str) -> np.ndarray:
    parts = reader.next(f"{count} {what} indices").split()
    if len(parts) != count:
        reader.fail(f"expected {count} {what} indices, found {len(parts)}")
    try:
        return np.array([int(p) for p in parts], dtype=np.int64)
    except ValueError:
        reader.fail(f"non-integer {what} index")


def load_mesh(path) -> Mesh:
    """Parse the text format; re-derives edges and validates invariants."""
    reader = _LineReader(path)
    header = reader.next("header")
    if header != "MIXMESH 1":
        reader.fail(f"unsupported header {header!r}, expected 'MIXMESH 1'")
    n = _read_count(reader, "nodes")
    positions = np.empty((n, 3), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        parts = reader.next("node line 'x y z label'").split()
        if len(parts) != 4:
            reader.fail(f"node {i}: expected 4 fields, found {len(parts)}")
        try:
            positions[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
            labels[i] = int(parts[3])
        except ValueError:
            reader.fail(f"node {i}: unparseable values {parts!r}")
    m = _read_count(reader, "tets")
    tets = np.empty((m, 4), dtype=np.int64)
    for i in range(m):
        parts = reader.next("tet line of 4 indices").split()
        if len(parts) != 4:
            reader.fail(f"tet {i}: expected 4 indices, found {len(parts)}")
        try:
            tets[i] = [int(p) for p in parts]
        except ValueError:
            reader.fail(f"tet {i}: non-integer index")
    k = _read_count(reader, "fixed")
    fixed = _read_index_line(reader, k, "fixed")
    k2 = _read_count(reader, "back")
    back = _read_index_line(reader, k2, "back")
    return make_mesh(positions, tets, labels, fixed, back)
