"""GNN-ready graphs from (mesh, simulation sample) plus the virtual-node and
virtual-edge augmentations that densify rigid components.

Node features (width 9+R): contact displacement (3), Cartesian rest position
(3), spherical rest position (3), one-hot rigid mask (R). Edge features
(width 1+R): rest length and the one-hot rigid mask of the edge. Undirected
mesh edges are materialized as two directed (src, dst) rows with identical
features; self terms are handled inside the attention layer, not as edges.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .mesh import Mesh, mesh_hash
from .oracle import SimulationSample

__all__ = [
    "GraphBuilder",
    "GraphCacheError",
    "GraphSample",
    "RigidEdgeRegistry",
    "augment_ve",
    "augment_vn",
    "build_features",
    "build_graph",
    "contact_centroid",
    "load_graph_cache",
    "rigid_edge_residuals",
    "save_graph_cache",
    "spherical",
]

_CACHE_MAGIC = b"MIXGRAPH 1\n"


class GraphCacheError(ValueError):
    """Malformed graph cache file."""


@dataclass
class RigidEdgeRegistry:
    """Undirected edges inside rigid components, with rest lengths."""

    endpoints: np.ndarray  # (E_r, 2) int64
    rest_lengths: np.ndarray  # (E_r,) float64 mm
    component: np.ndarray  # (E_r,) int64, label > 0
    virtual: np.ndarray  # (E_r,) bool, True for augmentation-added entries

    @property
    def size(self) -> int:
        return self.endpoints.shape[0]

    def select(self, include_virtual: bool = True):
        if include_virtual:
            return self
        keep = ~self.virtual
        return RigidEdgeRegistry(
            self.endpoints[keep],
            self.rest_lengths[keep],
            self.component[keep],
            self.virtual[keep],
        )


@dataclass
class GraphSample:
    node_features: np.ndarray  # (V, 9+R)
    directed_edges: np.ndarray  # (E, 2) int64 rows (src, dst)
    edge_features: np.ndarray  # (E, 1+R)
    targets: np.ndarray  # (V, 3)
    rigid_edges: RigidEdgeRegistry
    virtual_node_ids: np.ndarray  # nodes appended by VN augmentation
    virtual_edge_ids: np.ndarray  # directed-edge rows appended by VN/VE
    real_node_count: int
    rigid_count: int

    @property
    def node_count(self) -> int:
        return self.node_features.shape[0]

    @property
    def rest_positions(self) -> np.ndarray:
        return self.node_features[:, 3:6]


def spherical(p: np.ndarray) -> np.ndarray:
    """(r, theta, phi) with theta = arccos(z/r) in [0, pi] and
    phi = atan2(y, x); the origin maps to (0, 0, 0)."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    r = np.linalg.norm(pts, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.arccos(np.clip(pts[:, 2] / r, -1.0, 1.0))
    phi = np.arctan2(pts[:, 1], pts[:, 0])
    out = np.stack([r, theta, phi], axis=1)
    out[r == 0.0] = 0.0
    return out[0] if single else out


def _one_hot(labels: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((labels.size, width))
    hot = labels > 0
    out[np.flatnonzero(hot), labels[hot] - 1] = 1.0
    return out


def _node_feature_block(positions: np.ndarray, labels: np.ndarray, width: int) -> np.ndarray:
    feats = np.zeros((positions.shape[0], 9 + width))
    feats[:, 3:6] = positions
    feats[:, 6:9] = spherical(positions)
    feats[:, 9:] = _one_hot(labels, width)
    return feats


def _edge_feature_block(
    positions: np.ndarray, pairs: np.ndarray, labels: np.ndarray, width: int
) -> np.ndarray:
    feats = np.zeros((pairs.shape[0], 1 + width))
    feats[:, 0] = np.linalg.norm(positions[pairs[:, 0]] - positions[pairs[:, 1]], axis=1)
    feats[:, 1:] = _one_hot(labels, width)
    return feats


def _check_centered(mesh: Mesh) -> None:
    extent = np.abs(mesh.rest_positions).max()
    center = np.linalg.norm(mesh.rest_positions.mean(axis=0))
    if center > 1e-6 * max(extent, 1.0):
        raise ValueError(
            f"mesh is not centered (mean position norm {center:g}); "
            "apply center_mesh before building graphs"
        )


def build_features(mesh: Mesh, sample: SimulationSample) -> GraphSample:
    """Base graph: features, bidirectional mesh edges, targets, rigid registry."""
    _check_centered(mesh)
    if sample.mesh_hash != mesh_hash(mesh):
        raise ValueError(
            f"sample was generated from mesh {sample.mesh_hash:#018x}, "
            f"not from this mesh ({mesh_hash(mesh):#018x})"
        )
    width = mesh.rigid_count
    feats = _node_feature_block(mesh.rest_positions, mesh.node_labels, width)
    feats[sample.contact_nodes, 0:3] = sample.prescribed_displacements

    directed = np.vstack([mesh.edges, mesh.edges[:, ::-1]]).astype(np.int64)
    efeats = _edge_feature_block(mesh.rest_positions, mesh.edges, mesh.edge_labels, width)
    efeats = np.vstack([efeats, efeats])

    rigid_sel = mesh.edge_labels > 0
    rigid_pairs = mesh.edges[rigid_sel]
    registry = RigidEdgeRegistry(
        endpoints=rigid_pairs.copy(),
        rest_lengths=np.linalg.norm(
            mesh.rest_positions[rigid_pairs[:, 0]] - mesh.rest_positions[rigid_pairs[:, 1]],
            axis=1,
        ),
        component=mesh.edge_labels[rigid_sel].copy(),
        virtual=np.zeros(rigid_pairs.shape[0], dtype=bool),
    )
    return GraphSample(
        node_features=feats,
        directed_edges=directed,
        edge_features=efeats,
        targets=sample.ground_truth.copy(),
        rigid_edges=registry,
        virtual_node_ids=np.empty(0, dtype=np.int64),
        virtual_edge_ids=np.empty(0, dtype=np.int64),
        real_node_count=mesh.node_count,
        rigid_count=width,
    )


def _append_rigid_pairs(graph: GraphSample, pairs, lengths, labels) -> tuple:
    """Directed rows, edge features and registry for new undirected pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    width = graph.rigid_count
    feats = np.zeros((pairs.shape[0], 1 + width))
    feats[:, 0] = lengths
    feats[:, 1:] = _one_hot(np.asarray(labels, dtype=np.int64), width)
    directed = np.vstack([pairs, pairs[:, ::-1]])
    dfeats = np.vstack([feats, feats])
    registry = RigidEdgeRegistry(
        endpoints=np.vstack([graph.rigid_edges.endpoints, pairs]),
        rest_lengths=np.concatenate([graph.rigid_edges.rest_lengths, lengths]),
        component=np.concatenate(
            [graph.rigid_edges.component, np.asarray(labels, dtype=np.int64)]
        ),
        virtual=np.concatenate(
            [graph.rigid_edges.virtual, np.ones(pairs.shape[0], dtype=bool)]
        ),
    )
    return directed, dfeats, registry


def augment_vn(graph: GraphSample, mesh: Mesh) -> GraphSample:
    """Append one virtual node per rigid component at its geometric center,
    connected to every node of the component.

    The virtual node starts with zero contact displacement, carries the
    component's one-hot mask, and is supervised with the component's mean
    displacement. All added edges join the rigid registry.
    """
    width = graph.rigid_count
    new_feats = [graph.node_features]
    new_targets = [graph.targets]
    pairs, lengths, labels = [], [], []
    vn_ids = []
    next_id = graph.node_count
    for label in range(1, width + 1):
        nodes = mesh.rigid_component(label)
        if nodes.size == 0:
            raise ValueError(f"rigid component {label} is empty")
        pos = mesh.rest_positions[nodes].mean(axis=0)
        row = np.zeros((1, 9 + width))
        row[0, 3:6] = pos
        row[0, 6:9] = spherical(pos)
        row[0, 9 + label - 1] = 1.0
        new_feats.append(row)
        new_targets.append(graph.targets[nodes].mean(axis=0, keepdims=True))
        for n in nodes:
            pairs.append((n, next_id))
            lengths.append(np.linalg.norm(mesh.rest_positions[n] - pos))
            labels.append(label)
        vn_ids.append(next_id)
        next_id += 1

    lengths = np.asarray(lengths)
    directed, dfeats, registry = _append_rigid_pairs(graph, pairs, lengths, labels)
    edge_ids = np.arange(
        graph.directed_edges.shape[0],
        graph.directed_edges.shape[0] + directed.shape[0],
        dtype=np.int64,
    )
    return GraphSample(
        node_features=np.vstack(new_feats),
        directed_edges=np.vstack([graph.directed_edges, directed]),
        edge_features=np.vstack([graph.edge_features, dfeats]),
        targets=np.vstack(new_targets),
        rigid_edges=registry,
        virtual_node_ids=np.concatenate(
            [graph.virtual_node_ids, np.asarray(vn_ids, dtype=np.int64)]
        ),
        virtual_edge_ids=np.concatenate([graph.virtual_edge_ids, edge_ids]),
        real_node_count=graph.real_node_count,
        rigid_count=width,
    )


def select_representatives(mesh: Mesh, contact_centroid: np.ndarray) -> np.ndarray:
    """Per component, the node closest to the contact centroid (rest
    distance, ties broken by lowest node index)."""
    reps = np.empty(mesh.rigid_count, dtype=np.int64)
    for label in range(1, mesh.rigid_count + 1):
        nodes = mesh.rigid_component(label)
        dist = np.linalg.norm(mesh.rest_positions[nodes] - contact_centroid, axis=1)
        reps[label - 1] = nodes[np.argmin(dist)]
    return reps


def augment_ve(graph: GraphSample, mesh: Mesh, contact_centroid: np.ndarray) -> GraphSample:
    """Connect every rigid-component node to the component's representative
    (the existing node closest to the contact centroid), skipping pairs that
    are already adjacent. No nodes are added."""
    reps = select_representatives(mesh, np.asarray(contact_centroid, dtype=np.float64))
    existing = {(int(a), int(b)) for a, b in graph.directed_edges}
    pairs, lengths, labels = [], [], []
    for label in range(1, mesh.rigid_count + 1):
        rep = int(reps[label - 1])
        for n in mesh.rigid_component(label):
            n = int(n)
            if n == rep or (n, rep) in existing:
                continue
            pairs.append((n, rep))
            lengths.append(
                np.linalg.norm(mesh.rest_positions[n] - mesh.rest_positions[rep])
            )
            labels.append(label)
    if not pairs:
        return replace(graph)
    directed, dfeats, registry = _append_rigid_pairs(
        graph, pairs, np.asarray(lengths), labels
    )
    edge_ids = np.arange(
        graph.directed_edges.shape[0],
        graph.directed_edges.shape[0] + directed.shape[0],
        dtype=np.int64,
    )
    return GraphSample(
        node_features=graph.node_features,
        directed_edges=np.vstack([graph.directed_edges, directed]),
        edge_features=np.vstack([graph.edge_features, dfeats]),
        targets=graph.targets,
        rigid_edges=registry,
        virtual_node_ids=graph.virtual_node_ids,
        virtual_edge_ids=np.concatenate([graph.virtual_edge_ids, edge_ids]),
        real_node_count=graph.real_node_count,
        rigid_count=graph.rigid_count,
    )


def contact_centroid(mesh: Mesh, sample: SimulationSample) -> np.ndarray:
    """Unweighted mean rest position of the sample's contact nodes."""
    if sample.contact_nodes.size == 0:
        raise ValueError("sample has no contact nodes")
    return mesh.rest_positions[sample.contact_nodes].mean(axis=0)


def rigid_edge_residuals(graph: GraphSample, predicted: np.ndarray, include_virtual=True):
    """Rest lengths c and deformed lengths d for every registry edge under
    the predicted displacement of all nodes (virtual ones included)."""
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.shape[0] != graph.node_count:
        raise ValueError(
            f"prediction covers {predicted.shape[0]} nodes, graph has {graph.node_count}"
        )
    reg = graph.rigid_edges.select(include_virtual)
    deformed = graph.rest_positions + predicted
    d = np.linalg.norm(
        deformed[reg.endpoints[:, 0]] - deformed[reg.endpoints[:, 1]], axis=1
    )
    return reg.rest_lengths.copy(), d


def build_graph(
    mesh: Mesh,
    sample: SimulationSample,
    use_vn: bool = False,
    use_ve: bool = False,
) -> GraphSample:
    """Base features plus the requested augmentations."""
    g = build_features(mesh, sample)
    if use_vn:
        g = augment_vn(g, mesh)
    if use_ve:
        g = augment_ve(g, mesh, contact_centroid(mesh, sample))
    return g


class GraphBuilder:
    """Builds per-sample graphs while sharing the static structure.

    Edge arrays depend only on the mesh, the augmentation switches and (for
    virtual edges) the representative choice, so they are computed once per
    distinct representative tuple and shared across samples. Returned graphs
    alias those shared arrays; treat them as read-only.
    """

    def __init__(self, mesh: Mesh, use_vn: bool = False, use_ve: bool = False):
        _check_centered(mesh)
        self.mesh = mesh
        self.use_vn = use_vn
        self.use_ve = use_ve
        self.mesh_hash = mesh_hash(mesh)
        width = mesh.rigid_count
        self.rigid_count = width

        zero_gt = np.zeros((mesh.node_count, 3))
        probe = SimulationSample(
            pose=None,
            contact_nodes=np.empty(0, dtype=np.int64),
            prescribed_displacements=np.zeros((0, 3)),
            ground_truth=zero_gt,
            mesh_hash=self.mesh_hash,
        )
        base = build_features(mesh, probe)
        if use_vn:
            base = augment_vn(base, mesh)
        self._template = base
        self._static_feats = base.node_features
        self._components = [mesh.rigid_component(k) for k in range(1, width + 1)]
        self._ve_cache: dict[tuple, GraphSample] = {}

    def _skeleton(self, sample: SimulationSample) -> GraphSample:
        if not self.use_ve:
            return self._template
        reps = select_representatives(self.mesh, contact_centroid(self.mesh, sample))
        key = tuple(int(r) for r in reps)
        cached = self._ve_cache.get(key)
        if cached is None:
            cached = augment_ve(self._template, self.mesh, contact_centroid(self.mesh, sample))
            self._ve_cache[key] = cached
        return cached

    def build(self, sample: SimulationSample) -> GraphSample:
        if sample.mesh_hash != self.mesh_hash:
            raise ValueError("sample/mesh hash mismatch")
        skel = self._skeleton(sample)
        feats = self._static_feats.copy()
        feats[sample.contact_nodes, 0:3] = sample.prescribed_displacements
        targets = np.empty((skel.node_count, 3))
        targets[: self.mesh.node_count] = sample.ground_truth
        if self.use_vn:
            for k, nodes in enumerate(self._components):
                targets[self.mesh.node_count + k] = sample.ground_truth[nodes].mean(axis=0)
        return GraphSample(
            node_features=feats,
            directed_edges=skel.directed_edges,
            edge_features=skel.edge_features,
            targets=targets,
            rigid_edges=skel.rigid_edges,
            virtual_node_ids=skel.virtual_node_ids,
            virtual_edge_ids=skel.virtual_edge_ids,
            real_node_count=skel.real_node_count,
            rigid_count=skel.rigid_count,
        )


# ----------------------------------------------------------------------
# optional binary cache: per-sample feature/target blocks plus a
# deduplicated table of edge skeletons. Regenerable from mesh + dataset.
# ----------------------------------------------------------------------
def _write_array(fh, arr, dtype):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_array(fh, dtype):
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    n = int(np.prod(shape)) if ndim else 1
    itemsize = np.dtype(dtype).itemsize
    buf = fh.read(itemsize * n)
    if len(buf) != itemsize * n:
        raise GraphCacheError("truncated array block")
    return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()


def save_graph_cache(path, graphs: list[GraphSample], mesh: Mesh) -> None:
    """Write graphs sharing skeletons (edges, features, registry) once each."""
    if not graphs:
        raise ValueError("refusing to cache an empty graph list")
    skeletons: list[GraphSample] = []
    ids = []
    for g in graphs:
        for k, s in enumerate(skeletons):
            if s.directed_edges is g.directed_edges or (
                s.directed_edges.shape == g.directed_edges.shape
                and np.array_equal(s.directed_edges, g.directed_edges)
            ):
                ids.append(k)
                break
        else:
            ids.append(len(skeletons))
            skeletons.append(g)
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(
            struct.pack(
                "<QIIII",
                mesh_hash(mesh),
                len(graphs),
                len(skeletons),
                graphs[0].real_node_count,
                graphs[0].rigid_count,
            )
        )
        for s in skeletons:
            _write_array(fh, s.directed_edges, "<i8")
            _write_array(fh, s.edge_features, "<f8")
            _write_array(fh, s.rigid_edges.endpoints, "<i8")
            _write_array(fh, s.rigid_edges.rest_lengths, "<f8")
            _write_array(fh, s.rigid_edges.component, "<i8")
            _write_array(fh, s.rigid_edges.virtual.astype(np.int8), "<i1")
            _write_array(fh, s.virtual_node_ids, "<i8")
            _write_array(fh, s.virtual_edge_ids, "<i8")
        for g, k in zip(graphs, ids):
            fh.write(struct.pack("<I", k))
            _write_array(fh, g.node_features, "<f8")
            _write_array(fh, g.targets, "<f8")


def load_graph_cache(path, expected_mesh_hash: int | None = None) -> list[GraphSample]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CACHE_MAGIC))
        if magic != _CACHE_MAGIC:
            raise GraphCacheError(f"unknown graph cache header {magic!r}")
        mhash, count, n_skel, real_count, rigid_count = struct.unpack(
            "<QIIII", fh.read(struct.calcsize("<QIIII"))
        )
        if expected_mesh_hash is not None and mhash != expected_mesh_hash:
            raise GraphCacheError(
                f"graph cache was built from mesh {mhash:#018x}, "
                f"expected {expected_mesh_hash:#018x}"
            )
        skeletons = []
        for _ in range(n_skel):
            directed = _read_array(fh, "<i8")
            efeats = _read_array(fh, "<f8")
            reg = RigidEdgeRegistry(
                endpoints=_read_array(fh, "<i8"),
                rest_lengths=_read_array(fh, "<f8"),
                component=_read_array(fh, "<i8"),
                virtual=_read_array(fh, "<i1").astype(bool),
            )
            vn_ids = _read_array(fh, "<i8")
            ve_ids = _read_array(fh, "<i8")
            skeletons.append((directed, efeats, reg, vn_ids, ve_ids))
        graphs = []
        for _ in range(count):
            (k,) = struct.unpack("<I", fh.read(4))
            feats = _read_array(fh, "<f8")
            targets = _read_array(fh, "<f8")
            directed, efeats, reg, vn_ids, ve_ids = skeletons[k]
            graphs.append(
                GraphSample(
                    node_features=feats,
                    directed_edges=directed,
                    edge_features=efeats,
                    targets=targets,
                    rigid_edges=reg,
                    virtual_node_ids=vn_ids,
                    virtual_edge_ids=ve_ids,
                    real_node_count=real_count,
                    rigid_count=rigid_count,
                )
            )
    return graphs
