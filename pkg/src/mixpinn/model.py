"""Stacked multi-head graph attention network with a linear displacement readout.

Per head, the attention logit of directed edge (j -> i) is
LeakyReLU(a'Th x_i + a'Th x_j + ae'The e_ij); the self term drops the edge
contribution. Softmax runs per destination over incoming edges plus self.
Head outputs are concatenated and projected by a per-layer weight matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, constant
from .graph import GraphSample

__all__ = [
    "CheckpointError",
    "ModelConfig",
    "ModelParams",
    "gat_layer_forward",
    "init_params",
    "load_checkpoint",
    "model_forward",
    "predict",
    "save_checkpoint",
]

_CKPT_MAGIC = b"MIXCKPT 1\n"


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


@dataclass
class ModelConfig:
    layer_count: int = 4
    heads: int = 2
    hidden_per_head: int = 32
    use_edge_features: bool = False
    negative_slope: float = 0.01
    node_dim: int = 11  # 9 + rigid count
    edge_dim: int = 3  # 1 + rigid count
    seed: int = 0

    def __post_init__(self):
        if self.layer_count < 1 or self.heads < 1 or self.hidden_per_head < 1:
            raise ValueError("layer_count, heads and hidden_per_head must be >= 1")

    @property
    def width(self) -> int:
        return self.heads * self.hidden_per_head


@dataclass
class ModelParams:
    config: ModelConfig
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.values.items()})


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig) -> ModelParams:
    """Uniform init with bound sqrt(3/fan_in) per matrix, deterministic in seed."""
    rng = np.random.default_rng(config.seed)
    w = config.width
    h = config.hidden_per_head
    values: dict[str, np.ndarray] = {}
    values["input.w"] = _uniform(rng, config.node_dim, (config.node_dim, w))
    for layer in range(config.layer_count):
        for head in range(config.heads):
            p = f"layer{layer}.head{head}"
            values[f"{p}.theta"] = _uniform(rng, w, (w, h))
            values[f"{p}.att"] = _uniform(rng, h, (h, 1))
            if config.use_edge_features:
                values[f"{p}.theta_e"] = _uniform(rng, config.edge_dim, (config.edge_dim, h))
                values[f"{p}.att_e"] = _uniform(rng, h, (h, 1))
        values[f"layer{layer}.w_out"] = _uniform(rng, w, (w, w))
    values["readout.w"] = _uniform(rng, w, (w, 3))
    return ModelParams(config, values)


def gat_layer_forward(
    tape: Tape,
    x: Tensor,
    directed_edges: np.ndarray,
    edge_features: Tensor | None,
    layer_params: dict[str, Tensor],
    config: ModelConfig,
    collect_attention: bool = False,
):
    """One multi-head attention layer; returns (output, attention records).

    ``layer_params`` holds this layer's tensors keyed 'head{h}.theta',
    'head{h}.att', optionally 'head{h}.theta_e'/'head{h}.att_e', and 'w_out'.
    Attention records are (weights, destination ids) per head when collected.
    """
    num_nodes = x.values.shape[0]
    src = directed_edges[:, 0]
    dst = directed_edges[:, 1]
    loop = np.arange(num_nodes, dtype=np.int64)
    src_ext = np.concatenate([src, loop])
    dst_ext = np.concatenate([dst, loop])

    head_outs = []
    attention = []
    for head in range(config.heads):
        theta = layer_params[f"head{head}.theta"]
        att = layer_params[f"head{head}.att"]
        hx = tape.matmul(x, theta)  # (V, hidden)
        score = tape.matmul(hx, att)  # (V, 1)
        edge_logits = tape.add(tape.gather_rows(score, dst), tape.gather_rows(score, src))
        if config.use_edge_features:
            if edge_features is None:
                raise ValueError("model uses edge features but the graph provides none")
            he = tape.matmul(edge_features, layer_params[f"head{head}.theta_e"])
            edge_logits = tape.add(edge_logits, tape.matmul(he, layer_params[f"head{head}.att_e"]))
        self_logits = tape.smul(score, 2.0)  # j = i, no edge term
        logits = tape.concat_rows([edge_logits, self_logits])
        logits = tape.leaky_relu(logits, config.negative_slope)
        alpha = tape.segment_softmax(logits, dst_ext, num_nodes)
        head_outs.append(
            tape.scatter_weighted_rows(hx, alpha, src_ext, dst_ext, num_nodes)
        )
        if collect_attention:
            attention.append((alpha.values.reshape(-1), dst_ext))
    combined = head_outs[0] if len(head_outs) == 1 else tape.concat_cols(head_outs)
    out = tape.matmul(combined, layer_params["w_out"])
    return out, attention


def _layer_slice(tensors: dict[str, Tensor], layer: int) -> dict[str, Tensor]:
    prefix = f"layer{layer}."
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}


def model_forward(
    tape: Tape,
    graph: GraphSample,
    params: ModelParams,
    param_tensors: dict[str, Tensor] | None = None,
    collect_attention: bool = False,
):
    """Predicted displacements for every node (virtual ones included).

    Returns (prediction, attention) where attention is a list of per-layer
    lists of (weights, destination ids); empty unless collected. Pass
    ``param_tensors`` to reuse tracked tensors when the caller needs
    gradients with respect to the parameters.
    """
    cfg = params.config
    if graph.node_features.shape[1] != cfg.node_dim:
        raise ValueError(
            f"graph node features have width {graph.node_features.shape[1]}, "
            f"model expects {cfg.node_dim}"
        )
    if cfg.use_edge_features and graph.edge_features.shape[1] != cfg.edge_dim:
        raise ValueError(
            f"graph edge features have width {graph.edge_features.shape[1]}, "
            f"model expects {cfg.edge_dim}"
        )
    tensors = param_tensors or {k: tape.tensor(v) for k, v in params.values.items()}
    feats = constant(graph.node_features)
    edge_feats = constant(graph.edge_features) if cfg.use_edge_features else None

    x = tape.matmul(feats, tensors["input.w"])
    attention = []
    for layer in range(cfg.layer_count):
        out, att = gat_layer_forward(
            tape,
            x,
            graph.directed_edges,
            edge_feats,
            _layer_slice(tensors, layer),
            cfg,
            collect_attention,
        )
        x = tape.leaky_relu(out, cfg.negative_slope)
        if collect_attention:
            attention.append(att)
    pred = tape.matmul(x, tensors["readout.w"])
    return pred, attention


def predict(graph: GraphSample, params: ModelParams) -> np.ndarray:
    """Inference-only forward pass returning an (V, 3) array."""
    tape = Tape()
    pred, _ = model_forward(tape, graph, params)
    return pred.values


def save_checkpoint(path, params: ModelParams) -> None:
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIBdIIq",
                cfg.layer_count,
                cfg.heads,
                cfg.hidden_per_head,
                int(cfg.use_edge_features),
                cfg.negative_slope,
                cfg.node_dim,
                cfg.edge_dim,
                cfg.seed,
            )
        )
        fh.write(struct.pack("<I", len(params.values)))
        for name, arr in params.values.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"unknown checkpoint header {magic!r}")
        head = fh.read(struct.calcsize("<IIIBdIIq"))
        layer_count, heads, hidden, use_ef, slope, node_dim, edge_dim, seed = struct.unpack(
            "<IIIBdIIq", head
        )
        config = ModelConfig(
            layer_count=layer_count,
            heads=heads,
            hidden_per_head=hidden,
            use_edge_features=bool(use_ef),
            negative_slope=slope,
            node_dim=node_dim,
            edge_dim=edge_dim,
            seed=seed,
        )
        (count,) = struct.unpack("<I", fh.read(4))
        values: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            n_items = int(np.prod(shape)) if ndim else 1
            buf = fh.read(8 * n_items)
            if len(buf) != 8 * n_items:
                raise CheckpointError(f"truncated parameter block {name!r}")
            values[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after parameter blocks")
    return ModelParams(config, values)
