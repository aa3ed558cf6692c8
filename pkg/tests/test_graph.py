import numpy as np
import pytest

from mixpinn.mesh import Mesh, center_mesh, make_mesh, mesh_hash
from mixpinn.oracle import SimulationSample
from mixpinn.graph import (
    GraphBuilder,
    augment_ve,
    augment_vn,
    build_features,
    build_graph,
    contact_centroid,
    load_graph_cache,
    rigid_edge_residuals,
    save_graph_cache,
    spherical,
)


def make_sample(mesh, contact=(), disp=None, gt=None):
    contact = np.asarray(contact, dtype=np.int64)
    if disp is None:
        disp = np.zeros((contact.size, 3))
    if gt is None:
        gt = np.zeros((mesh.node_count, 3))
    return SimulationSample(
        pose=None,
        contact_nodes=contact,
        prescribed_displacements=np.asarray(disp, dtype=float).reshape(-1, 3),
        ground_truth=np.asarray(gt, dtype=float),
        mesh_hash=mesh_hash(mesh),
    )


@pytest.fixture(scope="module")
def graph_and_sample(small_mesh, small_samples):
    sample = small_samples[10]
    return build_features(small_mesh, sample), sample


class TestSpherical:
    def test_pole(self):
        assert np.allclose(spherical(np.array([0.0, 0.0, 1.0])), [1.0, 0.0, 0.0])

    def test_equator(self):
        assert np.allclose(spherical(np.array([1.0, 0.0, 0.0])), [1.0, np.pi / 2, 0.0])

    def test_origin_convention(self):
        assert np.array_equal(spherical(np.array([0.0, 0.0, 0.0])), [0.0, 0.0, 0.0])

    def test_round_trip(self, rng):
        pts = rng.standard_normal((50, 3))
        r, theta, phi = spherical(pts).T
        back = np.stack(
            [
                r * np.sin(theta) * np.cos(phi),
                r * np.sin(theta) * np.sin(phi),
                r * np.cos(theta),
            ],
            axis=1,
        )
        assert np.allclose(back, pts, atol=1e-12)


class TestBuildFeatures:
    def test_layout_noncontact_soft_node(self, small_mesh, graph_and_sample):
        graph, sample = graph_and_sample
        soft = np.setdiff1d(np.flatnonzero(small_mesh.node_labels == 0), sample.contact_nodes)
        n = soft[0]
        p = small_mesh.rest_positions[n]
        row = graph.node_features[n]
        assert np.array_equal(row[0:3], np.zeros(3))
        assert np.array_equal(row[3:6], p)
        assert np.allclose(row[6:9], spherical(p))
        assert np.array_equal(row[9:], np.zeros(small_mesh.rigid_count))

    def test_contact_node_carries_prescription(self, graph_and_sample):
        graph, sample = graph_and_sample
        for i, n in enumerate(sample.contact_nodes):
            assert np.array_equal(graph.node_features[n, 0:3], sample.prescribed_displacements[i])

    def test_one_hot_mask_width_five(self):
        # six isolated nodes labeled 0..5 on a hand-built centered mesh
        positions = np.zeros((6, 3))
        positions[:, 0] = np.arange(6) - 2.5
        mesh = make_mesh(positions, np.empty((0, 4)), [0, 1, 2, 3, 4, 5], [], [])
        graph = build_features(mesh, make_sample(mesh))
        assert graph.node_features.shape[1] == 14
        assert np.array_equal(graph.node_features[0, 9:], [0, 0, 0, 0, 0])
        assert np.array_equal(graph.node_features[3, 9:], [0, 0, 1, 0, 0])
        assert np.array_equal(graph.node_features[5, 9:], [0, 0, 0, 0, 1])

    def test_hash_mismatch_rejected(self, small_mesh):
        sample = make_sample(small_mesh)
        sample.mesh_hash ^= 1
        with pytest.raises(ValueError, match="mesh"):
            build_features(small_mesh, sample)

    def test_uncentered_mesh_rejected(self, small_mesh):
        shifted = Mesh(
            rest_positions=small_mesh.rest_positions + 10.0,
            tetrahedra=small_mesh.tetrahedra,
            node_labels=small_mesh.node_labels,
            fixed_nodes=small_mesh.fixed_nodes,
            back_surface_nodes=small_mesh.back_surface_nodes,
            edges=small_mesh.edges,
            edge_labels=small_mesh.edge_labels,
        )
        with pytest.raises(ValueError, match="centered"):
            build_features(shifted, make_sample(shifted))

    def test_edge_lengths_match_rest_distance(self, small_mesh, graph_and_sample):
        graph, _ = graph_and_sample
        pos = small_mesh.rest_positions
        lengths = np.linalg.norm(
            pos[graph.directed_edges[:, 0]] - pos[graph.directed_edges[:, 1]], axis=1
        )
        assert np.abs(graph.edge_features[:, 0] - lengths).max() <= 1e-12

    def test_reverse_edges_carry_identical_features(self, graph_and_sample):
        graph, _ = graph_and_sample
        e = graph.directed_edges.shape[0] // 2
        assert np.array_equal(graph.directed_edges[:e], graph.directed_edges[e:][:, ::-1])
        assert np.array_equal(graph.edge_features[:e], graph.edge_features[e:])

    def test_targets_are_ground_truth(self, graph_and_sample):
        graph, sample = graph_and_sample
        assert np.array_equal(graph.targets, sample.ground_truth)


class TestAugmentVN:
    def test_adds_hub_per_component(self, small_mesh, graph_and_sample):
        graph, _ = graph_and_sample
        out = augment_vn(graph, small_mesh)
        r = small_mesh.rigid_count
        assert out.node_count == graph.node_count + r
        assert out.real_node_count == graph.real_node_count
        assert np.array_equal(out.virtual_node_ids, graph.node_count + np.arange(r))
        k = small_mesh.rigid_component(1).size
        added = out.directed_edges.shape[0] - graph.directed_edges.shape[0]
        assert added == 2 * k  # both directions of k undirected hub edges
        vn = out.virtual_node_ids[0]
        degree = int((out.directed_edges == vn).sum())
        assert degree == 2 * k

    def test_rest_position_is_component_mean(self, small_mesh, graph_and_sample):
        graph, _ = graph_and_sample
        out = augment_vn(graph, small_mesh)
        nodes = small_mesh.rigid_component(1)
        mean = small_mesh.rest_positions[nodes].mean(axis=0)
        vn = out.virtual_node_ids[0]
        assert np.abs(out.node_features[vn, 3:6] - mean).max() <= 1e-12
        assert np.allclose(out.node_features[vn, 6:9], spherical(mean))
        assert np.array_equal(out.node_features[vn, 0:3], np.zeros(3))
        assert np.array_equal(out.node_features[vn, 9:], [1.0])

    def test_uniform_translation_target(self, small_mesh):
        v = np.array([0.5, -0.25, 1.0])
        gt = np.tile(v, (small_mesh.node_count, 1))
        graph = build_features(small_mesh, make_sample(small_mesh, gt=gt))
        out = augment_vn(graph, small_mesh)
        assert np.allclose(out.targets[out.virtual_node_ids[0]], v, atol=1e-12)

    def test_new_edges_registered_rigid(self, small_mesh, graph_and_sample):
        graph, _ = graph_and_sample
        out = augment_vn(graph, small_mesh)
        added = out.rigid_edges.size - graph.rigid_edges.size
        assert added == small_mesh.rigid_component(1).size
        assert np.all(out.rigid_edges.virtual[graph.rigid_edges.size :])
        assert np.all(out.rigid_edges.component[graph.rigid_edges.size :] == 1)


class TestAugmentVE:
    def test_counts_and_absent_only(self, small_mesh, graph_and_sample):
        graph, sample = graph_and_sample
        centroid = contact_centroid(small_mesh, sample)
        out = augment_ve(graph, small_mesh, centroid)
        nodes = small_mesh.rigid_component(1)
        dist = np.linalg.norm(small_mesh.rest_positions[nodes] - centroid, axis=1)
        rep = nodes[np.argmin(dist)]
        existing = {tuple(e) for e in graph.directed_edges}
        expected = sum(
            1 for n in nodes if n != rep and (int(n), int(rep)) not in existing
        )
        added_directed = out.directed_edges.shape[0] - graph.directed_edges.shape[0]
        assert added_directed == 2 * expected
        assert out.node_count == graph.node_count  # no nodes added

    def test_fully_connected_component_adds_nothing(self):
        # two rigid nodes joined by an edge: the representative already
        # neighbors every other component node
        positions = np.array(
            [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
        )
        mesh = make_mesh(positions, np.array([[0, 1, 3, 2]]), [1, 1, 0, 0], [], [])
        graph = build_features(mesh, make_sample(mesh))
        out = augment_ve(graph, mesh, np.zeros(3))
        assert out.directed_edges.shape[0] == graph.directed_edges.shape[0]
        assert out.rigid_edges.size == graph.rigid_edges.size

    def test_tie_broken_by_lowest_index(self):
        # nodes 0 and 1 are equidistant from the centroid
        positions = np.array(
            [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
        )
        mesh = make_mesh(positions, np.array([[0, 1, 3, 2]]), [1, 1, 1, 1], [], [])
        from mixpinn.graph import select_representatives

        reps = select_representatives(mesh, np.zeros(3))
        assert reps[0] == 0

    def test_soft_subgraph_untouched(self, small_mesh, graph_and_sample):
        graph, sample = graph_and_sample
        centroid = contact_centroid(small_mesh, sample)
        for out in (
            augment_vn(graph, small_mesh),
            augment_ve(graph, small_mesh, centroid),
        ):
            n = graph.node_count
            e = graph.directed_edges.shape[0]
            assert np.array_equal(out.node_features[:n], graph.node_features[:n])
            assert np.array_equal(out.directed_edges[:e], graph.directed_edges[:e])
            assert np.array_equal(out.edge_features[:e], graph.edge_features[:e])
            assert np.array_equal(out.targets[:n], graph.targets[:n])

    def test_composable_in_either_order(self, small_mesh, graph_and_sample):
        graph, sample = graph_and_sample
        centroid = contact_centroid(small_mesh, sample)
        a = augment_ve(augment_vn(graph, small_mesh), small_mesh, centroid)
        b = augment_vn(augment_ve(graph, small_mesh, centroid), small_mesh)
        assert np.array_equal(
            np.sort(a.node_features, axis=0), np.sort(b.node_features, axis=0)
        )
        rows_a = np.hstack([a.directed_edges.astype(float), a.edge_features])
        rows_b = np.hstack([b.directed_edges.astype(float), b.edge_features])
        order_a = np.lexsort(rows_a.T[::-1])
        order_b = np.lexsort(rows_b.T[::-1])
        assert np.array_equal(rows_a[order_a], rows_b[order_b])


class TestRigidEdgeResiduals:
    def test_zero_prediction_rest_lengths(self, small_mesh, graph_and_sample):
        graph, _ = graph_and_sample
        c, d = rigid_edge_residuals(graph, np.zeros((graph.node_count, 3)))
        assert np.array_equal(c, d)

    def test_rigid_translation_preserves_lengths(self, small_mesh, graph_and_sample):
        graph, _ = graph_and_sample
        pred = np.tile([1.0, 2.0, 3.0], (graph.node_count, 1))
        c, d = rigid_edge_residuals(graph, pred)
        assert np.abs(c - d).max() <= 1e-12

    def test_two_node_toy_matches_hand_computation(self, rng):
        positions = np.array(
            [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
        )
        mesh = make_mesh(positions, np.array([[0, 1, 3, 2]]), [1, 1, 0, 0], [], [])
        graph = build_features(mesh, make_sample(mesh))
        pred = rng.standard_normal((4, 3)) * 0.01
        c, d = rigid_edge_residuals(graph, pred)
        assert c.shape == (1,)
        p0 = positions[0] + pred[0]
        p1 = positions[1] + pred[1]
        assert abs(d[0] - np.linalg.norm(p0 - p1)) <= 1e-12
        assert abs(c[0] - np.linalg.norm(positions[0] - positions[1])) <= 1e-12

    def test_include_virtual_toggle(self, small_mesh, graph_and_sample):
        graph, _ = graph_and_sample
        out = augment_vn(graph, small_mesh)
        pred = np.zeros((out.node_count, 3))
        c_all, _ = rigid_edge_residuals(out, pred, include_virtual=True)
        c_real, _ = rigid_edge_residuals(out, pred, include_virtual=False)
        assert c_all.size == out.rigid_edges.size
        assert c_real.size == graph.rigid_edges.size


class TestGraphBuilder:
    @pytest.mark.parametrize("vn,ve", [(False, False), (True, False), (False, True), (True, True)])
    def test_matches_direct_composition(self, small_mesh, small_samples, vn, ve):
        builder = GraphBuilder(small_mesh, use_vn=vn, use_ve=ve)
        for sample in small_samples[:6]:
            a = builder.build(sample)
            b = build_graph(small_mesh, sample, use_vn=vn, use_ve=ve)
            assert np.array_equal(a.node_features, b.node_features)
            assert np.array_equal(a.directed_edges, b.directed_edges)
            assert np.array_equal(a.edge_features, b.edge_features)
            assert np.array_equal(a.targets, b.targets)
            assert np.array_equal(a.rigid_edges.endpoints, b.rigid_edges.endpoints)
            assert np.array_equal(a.rigid_edges.virtual, b.rigid_edges.virtual)
            assert a.real_node_count == b.real_node_count

    def test_cache_round_trip(self, small_mesh, small_samples, tmp_path):
        builder = GraphBuilder(small_mesh, use_vn=True, use_ve=True)
        graphs = [builder.build(s) for s in small_samples[:8]]
        path = tmp_path / "graphs.mix"
        save_graph_cache(path, graphs, small_mesh)
        loaded = load_graph_cache(path, expected_mesh_hash=mesh_hash(small_mesh))
        assert len(loaded) == len(graphs)
        for a, b in zip(graphs, loaded):
            assert np.array_equal(a.node_features, b.node_features)
            assert np.array_equal(a.directed_edges, b.directed_edges)
            assert np.array_equal(a.edge_features, b.edge_features)
            assert np.array_equal(a.targets, b.targets)
            assert np.array_equal(a.rigid_edges.rest_lengths, b.rigid_edges.rest_lengths)

    def test_cache_mesh_mismatch(self, small_mesh, small_samples, tmp_path):
        builder = GraphBuilder(small_mesh)
        graphs = [builder.build(small_samples[0])]
        path = tmp_path / "graphs.mix"
        save_graph_cache(path, graphs, small_mesh)
        from mixpinn.graph import GraphCacheError

        with pytest.raises(GraphCacheError, match="mesh"):
            load_graph_cache(path, expected_mesh_hash=123)
