import itertools

import numpy as np
import pytest

from mixpinn.mesh import (
    Mesh,
    MeshError,
    MeshFormatError,
    PhantomConfig,
    center_mesh,
    derive_edges,
    generate_phantom,
    label_edges,
    load_mesh,
    make_mesh,
    mesh_hash,
    save_mesh,
    tet_volumes,
)

DESK = PhantomConfig()


@pytest.fixture(scope="module")
def desk_mesh():
    return generate_phantom(DESK)


def brute_force_node_labels(config, positions_boxframe):
    labels = np.zeros(len(positions_boxframe), dtype=int)
    for idx, p in enumerate(positions_boxframe):
        for k, (lo, hi) in enumerate(config.inclusions):
            if all(lo[a] <= p[a] < hi[a] for a in range(3)):
                labels[idx] = k + 1
    return labels


def brute_force_edges(tets):
    pairs = set()
    for tet in tets:
        for a, b in itertools.combinations(sorted(tet), 2):
            pairs.add((a, b))
    return pairs


class TestGeneratePhantom:
    def test_no_inclusions_all_soft(self):
        mesh = generate_phantom(
            PhantomConfig(box_mm=(2.0, 2.0, 2.0), cells=(2, 2, 2), inclusions=())
        )
        assert mesh.node_count == 27
        assert np.all(mesh.node_labels == 0)
        assert mesh.rigid_count == 0
        # the fixed set is exactly one face of the 3x3x3 grid
        assert mesh.fixed_nodes.size == 9
        fixed_z = mesh.rest_positions[mesh.fixed_nodes, 2]
        assert np.ptp(fixed_z) == 0.0

    def test_desk_counts_match_brute_force(self, desk_mesh):
        # independent containment check over the same node lattice
        offset = desk_mesh.rest_positions.min(axis=0)
        box_frame = desk_mesh.rest_positions - offset
        expected = brute_force_node_labels(DESK, box_frame)
        assert np.array_equal(desk_mesh.node_labels, expected)
        # frozen desk-scale counts
        assert desk_mesh.node_count == 1377
        assert desk_mesh.tetrahedra.shape[0] == 6144
        counts = {int(k): int(v) for k, v in zip(*np.unique(desk_mesh.node_labels, return_counts=True))}
        assert counts == {0: 1305, 1: 36, 2: 36}
        edge_counts = {int(k): int(v) for k, v in zip(*np.unique(desk_mesh.edge_labels, return_counts=True))}
        assert edge_counts == {0: 7882, 1: 139, 2: 139}

    def test_inclusion_on_boundary_rejected(self):
        with pytest.raises(MeshError, match="strictly inside"):
            generate_phantom(
                PhantomConfig(
                    box_mm=(40.0, 30.0, 30.0),
                    cells=(4, 3, 3),
                    inclusions=(((0.0, 8.0, 8.0), (12.0, 22.0, 22.0)),),
                )
            )

    def test_overlapping_inclusions_rejected(self):
        with pytest.raises(MeshError, match="overlap"):
            generate_phantom(
                PhantomConfig(
                    box_mm=(40.0, 30.0, 30.0),
                    cells=(4, 3, 3),
                    inclusions=(
                        ((5.0, 5.0, 5.0), (25.0, 25.0, 25.0)),
                        ((15.0, 8.0, 8.0), (35.0, 22.0, 22.0)),
                    ),
                )
            )

    def test_degenerate_resolution_rejected(self):
        with pytest.raises(MeshError, match="resolution"):
            generate_phantom(PhantomConfig(cells=(1, 4, 4), inclusions=()))

    def test_tet_volumes_positive_and_fill_box(self, desk_mesh):
        vols = tet_volumes(desk_mesh.rest_positions, desk_mesh.tetrahedra)
        assert np.all(vols > 0)
        box = np.prod(DESK.box_mm)
        assert abs(vols.sum() - box) <= 1e-9 * box

    def test_fixed_and_back_disjoint(self, desk_mesh):
        assert np.intersect1d(desk_mesh.fixed_nodes, desk_mesh.back_surface_nodes).size == 0

    def test_rigid_components_edge_connected(self, desk_mesh):
        # reachability through same-label edges only, by brute-force BFS
        for label in (1, 2):
            nodes = set(desk_mesh.rigid_component(label).tolist())
            adj = {n: set() for n in nodes}
            for (a, b), lab in zip(desk_mesh.edges, desk_mesh.edge_labels):
                if lab == label:
                    adj[a].add(b)
                    adj[b].add(a)
            start = next(iter(nodes))
            seen, todo = {start}, [start]
            while todo:
                for nxt in adj[todo.pop()]:
                    if nxt not in seen:
                        seen.add(nxt)
                        todo.append(nxt)
            assert seen == nodes

    def test_disconnected_rigid_label_rejected(self):
        positions = np.array(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [3, 3, 3], [4, 3, 3], [3, 4, 3], [3, 3, 4]],
            dtype=float,
        )
        tets = np.array([[0, 1, 2, 3], [4, 5, 6, 7]])
        labels = np.array([1, 0, 0, 0, 1, 0, 0, 0])  # label 1 split across both tets
        with pytest.raises(MeshError, match="not edge-connected"):
            make_mesh(positions, tets, labels, [], [])


class TestDeriveEdges:
    def test_single_tet(self):
        edges = derive_edges(np.array([[0, 1, 2, 3]]))
        expected = {(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)}
        assert set(map(tuple, edges)) == expected

    def test_two_tets_sharing_face(self):
        edges = derive_edges(np.array([[0, 1, 2, 3], [1, 2, 3, 4]]))
        assert edges.shape[0] == 9  # 6 + 6 - 3 shared

    def test_phantom_matches_pair_scan(self, desk_mesh):
        expected = brute_force_edges(desk_mesh.tetrahedra.tolist())
        assert desk_mesh.edges.shape[0] == len(expected)
        assert set(map(tuple, desk_mesh.edges)) == expected


class TestLabelEdges:
    @pytest.mark.parametrize(
        "labels,expected",
        [((1, 1), 1), ((1, 0), 0), ((0, 1), 0), ((1, 2), 0), ((0, 0), 0), ((3, 3), 3)],
    )
    def test_rule(self, labels, expected):
        out = label_edges(np.array(labels), np.array([[0, 1]]))
        assert out[0] == expected


class TestCenterMesh:
    def test_idempotent(self, desk_mesh):
        again = center_mesh(desk_mesh)
        assert np.array_equal(again.rest_positions, desk_mesh.rest_positions)

    def test_single_node(self):
        mesh = make_mesh(np.array([[3.0, 4.0, 5.0]]), np.empty((0, 4)), [0], [], [])
        centered = center_mesh(mesh)
        assert np.array_equal(centered.rest_positions, np.zeros((1, 3)))

    def test_phantom_mean_below_tolerance(self, desk_mesh):
        assert np.linalg.norm(desk_mesh.rest_positions.mean(axis=0)) < 1e-9


class TestSerialization:
    def test_round_trip_identity(self, desk_mesh, tmp_path):
        path = tmp_path / "phantom.mix"
        save_mesh(desk_mesh, path)
        loaded = load_mesh(path)
        assert loaded == desk_mesh
        assert np.array_equal(loaded.edges, desk_mesh.edges)
        assert np.array_equal(loaded.edge_labels, desk_mesh.edge_labels)
        assert mesh_hash(loaded) == mesh_hash(desk_mesh)

    def test_truncated_file(self, small_mesh, tmp_path):
        path = tmp_path / "trunc.mix"
        save_mesh(small_mesh, path)
        text = path.read_text().splitlines()
        path.write_text("\n".join(text[: len(text) // 2]))
        with pytest.raises(MeshFormatError, match="line"):
            load_mesh(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.mix"
        path.write_text("MIXMESH 999\nnodes 0\n")
        with pytest.raises(MeshFormatError, match="header"):
            load_mesh(path)

    def test_out_of_range_index(self, tmp_path):
        path = tmp_path / "oob.mix"
        path.write_text(
            "MIXMESH 1\n"
            "nodes 4\n"
            "0 0 0 0\n1 0 0 0\n0 1 0 0\n0 0 1 0\n"
            "tets 1\n"
            "0 1 2 9\n"
            "fixed 0\n\n"
            "back 0\n\n"
        )
        with pytest.raises(MeshError, match="out-of-range"):
            load_mesh(path)

    def test_hash_changes_with_content(self, small_mesh):
        moved = Mesh(
            rest_positions=small_mesh.rest_positions + 1e-9,
            tetrahedra=small_mesh.tetrahedra,
            node_labels=small_mesh.node_labels,
            fixed_nodes=small_mesh.fixed_nodes,
            back_surface_nodes=small_mesh.back_surface_nodes,
            edges=small_mesh.edges,
            edge_labels=small_mesh.edge_labels,
        )
        assert mesh_hash(moved) != mesh_hash(small_mesh)
