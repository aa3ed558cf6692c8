import numpy as np
import pytest

from mixpinn.autodiff import Tape, constant, grad_check
from mixpinn.graph import GraphSample, RigidEdgeRegistry
from mixpinn.model import (
    CheckpointError,
    ModelConfig,
    ModelParams,
    gat_layer_forward,
    init_params,
    load_checkpoint,
    model_forward,
    predict,
    save_checkpoint,
)

from _oracles import dense_model_forward


def random_graph(rng, n_nodes, n_undirected, rigid_count=2, rigid_edges=0):
    """Random bidirectional graph shaped like the production ones."""
    width = 9 + rigid_count
    feats = rng.standard_normal((n_nodes, width))
    if n_undirected:
        pairs = set()
        while len(pairs) < n_undirected:
            a, b = rng.integers(0, n_nodes, 2)
            if a != b:
                pairs.add((min(a, b), max(a, b)))
        und = np.array(sorted(pairs), dtype=np.int64)
        directed = np.vstack([und, und[:, ::-1]])
        efeats_half = rng.standard_normal((und.shape[0], 1 + rigid_count))
        efeats = np.vstack([efeats_half, efeats_half])
    else:
        directed = np.empty((0, 2), dtype=np.int64)
        efeats = np.empty((0, 1 + rigid_count))
    if rigid_edges:
        endpoints = directed[:rigid_edges].copy()
        lengths = rng.uniform(0.5, 2.0, rigid_edges)
        registry = RigidEdgeRegistry(
            endpoints, lengths, np.ones(rigid_edges, dtype=np.int64), np.zeros(rigid_edges, bool)
        )
    else:
        registry = RigidEdgeRegistry(
            np.empty((0, 2), dtype=np.int64), np.empty(0), np.empty(0, dtype=np.int64), np.empty(0, bool)
        )
    return GraphSample(
        node_features=feats,
        directed_edges=directed,
        edge_features=efeats,
        targets=rng.standard_normal((n_nodes, 3)),
        rigid_edges=registry,
        virtual_node_ids=np.empty(0, dtype=np.int64),
        virtual_edge_ids=np.empty(0, dtype=np.int64),
        real_node_count=n_nodes,
        rigid_count=rigid_count,
    )


class TestInitParams:
    def test_deterministic_in_seed(self):
        cfg = ModelConfig(seed=7)
        a, b = init_params(cfg), init_params(cfg)
        for k in a.values:
            assert np.array_equal(a.values[k], b.values[k])

    def test_seeds_differ(self):
        a = init_params(ModelConfig(seed=0))
        b = init_params(ModelConfig(seed=1))
        assert any(not np.array_equal(a.values[k], b.values[k]) for k in a.values)

    def test_magnitude_bound(self):
        cfg = ModelConfig(layer_count=2, heads=2, hidden_per_head=8, use_edge_features=True)
        params = init_params(cfg)
        fan_in = {
            "input.w": cfg.node_dim,
            "readout.w": cfg.width,
        }
        for name, arr in params.values.items():
            if name in fan_in:
                fi = fan_in[name]
            elif name.endswith(".theta"):
                fi = cfg.width
            elif name.endswith(".theta_e"):
                fi = cfg.edge_dim
            elif name.endswith(".att") or name.endswith(".att_e"):
                fi = cfg.hidden_per_head
            else:
                fi = cfg.width  # w_out
            assert np.abs(arr).max() <= np.sqrt(3.0 / fi)

    def test_edge_parameters_only_when_enabled(self):
        off = init_params(ModelConfig(use_edge_features=False))
        on = init_params(ModelConfig(use_edge_features=True))
        assert not any("theta_e" in k for k in off.values)
        assert any("theta_e" in k for k in on.values)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(layer_count=0)


class TestGatLayer:
    def test_isolated_node_self_attention(self, rng):
        # node 2 has no edges: alpha_ii = 1, output = w_out @ concat(theta x)
        cfg = ModelConfig(layer_count=1, heads=2, hidden_per_head=4, node_dim=11, edge_dim=3, seed=3)
        graph = random_graph(rng, 3, 1)
        graph.directed_edges[:] = [[0, 1], [1, 0]]
        params = init_params(cfg)
        tape = Tape()
        x = constant(rng.standard_normal((3, cfg.width)))
        layer = {
            k.split(".", 1)[1]: tape.tensor(v)
            for k, v in params.values.items()
            if k.startswith("layer0.")
        }
        out, att = gat_layer_forward(
            tape, x, graph.directed_edges, None, layer, cfg, collect_attention=True
        )
        manual = np.concatenate(
            [
                x.values[2] @ params.values["layer0.head0.theta"],
                x.values[2] @ params.values["layer0.head1.theta"],
            ]
        ) @ params.values["layer0.w_out"]
        assert np.allclose(out.values[2], manual, atol=1e-12)
        for weights, dst in att:
            assert np.allclose(weights[dst == 2], 1.0)

    def test_two_identical_nodes_split_attention(self):
        cfg = ModelConfig(layer_count=1, heads=1, hidden_per_head=4, node_dim=11, edge_dim=3, seed=5)
        params = init_params(cfg)
        x_val = np.tile(np.linspace(-1, 1, cfg.width), (2, 1))
        tape = Tape()
        layer = {
            k.split(".", 1)[1]: tape.tensor(v)
            for k, v in params.values.items()
            if k.startswith("layer0.")
        }
        edges = np.array([[0, 1], [1, 0]])
        _, att = gat_layer_forward(tape, constant(x_val), edges, None, layer, cfg, True)
        weights, dst = att[0]
        # identical features make every logit equal: 0.5 / 0.5 per node
        assert np.allclose(weights, 0.5, atol=1e-12)


class TestModelForward:
    @pytest.mark.parametrize("use_edge_features", [False, True])
    def test_matches_dense_replay(self, rng, use_edge_features):
        cfg = ModelConfig(
            layer_count=2,
            heads=2,
            hidden_per_head=5,
            use_edge_features=use_edge_features,
            node_dim=11,
            edge_dim=3,
            seed=11,
        )
        graph = random_graph(rng, 7, 9)
        params = init_params(cfg)
        got = predict(graph, params)
        want = dense_model_forward(graph, params)
        assert np.allclose(got, want, atol=1e-10)

    def test_three_node_path(self, rng):
        cfg = ModelConfig(layer_count=1, heads=1, hidden_per_head=3, node_dim=11, edge_dim=3, seed=2)
        graph = random_graph(rng, 3, 1)
        graph.directed_edges[:] = [[0, 1], [1, 0]]
        path = random_graph(rng, 3, 2)
        path.directed_edges[:] = [[0, 1], [1, 2], [1, 0], [2, 1]]
        path.edge_features[:] = np.vstack([path.edge_features[:2]] * 2)
        params = init_params(cfg)
        assert np.allclose(
            predict(path, params), dense_model_forward(path, params), atol=1e-10
        )

    def test_zero_readout_zero_prediction(self, rng):
        cfg = ModelConfig(node_dim=11, edge_dim=3)
        graph = random_graph(rng, 6, 8)
        params = init_params(cfg)
        params.values["readout.w"][:] = 0.0
        assert np.array_equal(predict(graph, params), np.zeros((6, 3)))

    def test_permutation_equivariance(self, rng):
        cfg = ModelConfig(layer_count=3, heads=2, hidden_per_head=6, node_dim=11, edge_dim=3, seed=4)
        graph = random_graph(rng, 12, 20)
        params = init_params(cfg)
        base = predict(graph, params)

        perm = rng.permutation(12)
        inv = np.argsort(perm)
        permuted = random_graph(rng, 12, 1)
        permuted.node_features = graph.node_features[inv]
        permuted.directed_edges = perm[graph.directed_edges]
        permuted.edge_features = graph.edge_features
        assert np.allclose(predict(permuted, params)[perm], base, atol=1e-12)

    def test_attention_rows_sum_to_one(self, rng):
        cfg = ModelConfig(layer_count=2, heads=2, hidden_per_head=4, node_dim=11, edge_dim=3)
        graph = random_graph(rng, 9, 14)
        params = init_params(cfg)
        tape = Tape()
        _, attention = model_forward(tape, graph, params, collect_attention=True)
        assert len(attention) == cfg.layer_count
        for layer in attention:
            assert len(layer) == cfg.heads
            for weights, dst in layer:
                sums = np.zeros(9)
                np.add.at(sums, dst, weights)
                assert np.abs(sums - 1.0).max() <= 1e-9

    def test_edge_feature_invariance_when_disabled(self, rng):
        cfg = ModelConfig(use_edge_features=False, node_dim=11, edge_dim=3)
        graph = random_graph(rng, 8, 12)
        params = init_params(cfg)
        base = predict(graph, params)
        graph.edge_features = rng.standard_normal(graph.edge_features.shape) * 100
        assert np.array_equal(predict(graph, params), base)

    def test_dimension_mismatch_rejected(self, rng):
        cfg = ModelConfig(node_dim=14, edge_dim=6)
        graph = random_graph(rng, 5, 4)  # node_dim 11
        with pytest.raises(ValueError, match="width"):
            predict(graph, init_params(cfg))

    def test_loss_gradient_passes_grad_check(self, rng):
        # full MEE + REL loss through a small model
        from mixpinn.train import TrainConfig, total_loss

        cfg = ModelConfig(
            layer_count=2, heads=2, hidden_per_head=3, use_edge_features=True,
            node_dim=11, edge_dim=3, seed=6,
        )
        tcfg = TrainConfig(use_rel=True, rel_weight=1.0, use_edge_features=True, heads=2)
        graph = random_graph(rng, 8, 10, rigid_edges=4)
        params = init_params(cfg)
        names = sorted(params.values)

        def fn(tape, tensors):
            tensor_map = dict(zip(names, tensors))
            pred, _ = model_forward(tape, graph, params, param_tensors=tensor_map)
            return total_loss(tape, graph, pred, tcfg)

        report = grad_check(fn, [params.values[n] for n in names], tolerance=1e-4, h=1e-5)
        assert report.passed, str(report)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        cfg = ModelConfig(layer_count=2, heads=2, hidden_per_head=4, use_edge_features=True, seed=9)
        params = init_params(cfg)
        path = tmp_path / "model.mix"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.config == cfg
        assert set(loaded.values) == set(params.values)
        for k in params.values:
            assert np.array_equal(loaded.values[k], params.values[k])

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "junk.mix"
        path.write_bytes(b"NOTACKPT 1\n" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="header"):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        params = init_params(ModelConfig())
        path = tmp_path / "model.mix"
        save_checkpoint(path, params)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 40])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)
