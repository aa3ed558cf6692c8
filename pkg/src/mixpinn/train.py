"""Training: losses, AdamW, plateau schedule, early stopping, splits,
evaluation metrics and the ablation grid runner.

The training objective is mean per-node Euclidean error over all graph
nodes (virtual nodes included) plus an optional rigid-edge penalty weighted
by ``rel_weight``. Reported metrics are always computed on real mesh nodes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, Tensor, constant
from .graph import GraphBuilder, GraphSample, rigid_edge_residuals
from .mesh import Mesh
from .model import ModelConfig, ModelParams, init_params, model_forward, predict
from .oracle import SimulationSample

__all__ = [
    "AdamWState",
    "MetricsReport",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "ABLATION_GRID",
    "adamw_step",
    "early_stopping",
    "evaluate",
    "loss_mee",
    "loss_rel",
    "metrics_csv",
    "plateau_scheduler",
    "run_ablation",
    "split_by_position",
    "train_loop",
    "zero_predictor_mee",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    initial_lr: float = 5e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    min_lr: float = 1e-8
    early_stop_patience: int = 15
    weight_decay: float = 0.01
    rel_weight: float = 1.0
    max_epochs: int = 100
    seed: int = 0
    heads: int = 2
    use_edge_features: bool = False
    use_rel: bool = False
    use_vn: bool = False
    use_ve: bool = False
    layer_count: int = 4
    hidden_per_head: int = 32
    rel_virtual_edges: bool = True
    split_ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)

    def __post_init__(self):
        if min(self.initial_lr, self.plateau_factor, self.min_lr) <= 0:
            raise ValueError("learning rates and decay factor must be positive")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.rel_weight < 0:
            raise ValueError("rel_weight must be >= 0")

    def model_config(self, mesh: Mesh) -> ModelConfig:
        r = mesh.rigid_count
        return ModelConfig(
            layer_count=self.layer_count,
            heads=self.heads,
            hidden_per_head=self.hidden_per_head,
            use_edge_features=self.use_edge_features,
            node_dim=9 + r,
            edge_dim=1 + r,
            seed=self.seed,
        )


@dataclass
class MetricsReport:
    mee: float
    mae: float
    mse: float
    rigid_mee: float
    soft_mee: float
    ree: float
    sample_count: int
    infer_ms: float


# ----------------------------------------------------------------------
# losses (tape-based, used during training)
# ----------------------------------------------------------------------
def loss_mee(tape: Tape, pred: Tensor, target: np.ndarray, rows: np.ndarray | None = None) -> Tensor:
    """Mean Euclidean error over ``rows`` (all rows when omitted), in mm."""
    target = np.asarray(target, dtype=np.float64)
    if rows is not None:
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            raise ValueError("loss_mee over an empty node set")
        pred = tape.gather_rows(pred, rows)
        target = target[rows]
    elif target.shape[0] == 0:
        raise ValueError("loss_mee over an empty node set")
    diff = tape.sub(pred, constant(target))
    return tape.mean(tape.l2_rowwise(diff))


def loss_rel(tape: Tape, graph: GraphSample, pred: Tensor, include_virtual: bool = True) -> Tensor:
    """Mean squared deviation of rigid edge lengths from rest, in mm^2."""
    reg = graph.rigid_edges.select(include_virtual)
    if reg.size == 0:
        log.warning("rigid-edge loss requested on a graph with no rigid edges")
        return constant(np.zeros(()))
    deformed = tape.add(pred, constant(graph.rest_positions))
    delta = tape.sub(
        tape.gather_rows(deformed, reg.endpoints[:, 0]),
        tape.gather_rows(deformed, reg.endpoints[:, 1]),
    )
    lengths = tape.l2_rowwise(delta)
    resid = tape.sub(constant(reg.rest_lengths.reshape(-1, 1)), lengths)
    return tape.mean(tape.square(resid))


def total_loss(tape: Tape, graph: GraphSample, pred: Tensor, cfg: TrainConfig) -> Tensor:
    out = loss_mee(tape, pred, graph.targets)
    if cfg.use_rel and cfg.rel_weight > 0:
        out = tape.add(out, tape.smul(loss_rel(tape, graph, pred, cfg.rel_virtual_edges), cfg.rel_weight))
    return out


# ----------------------------------------------------------------------
# optimizer and schedules
# ----------------------------------------------------------------------
@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    values: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in values.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * weight_decay * p
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def plateau_scheduler(
    history: list[float],
    initial_lr: float = 5e-4,
    factor: float = 0.1,
    patience: int = 5,
    min_lr: float = 1e-8,
) -> float:
    """Learning rate after the given validation-loss history.

    Decays by ``factor`` (floored at ``min_lr``) whenever the best loss has
    not improved for ``patience`` consecutive epochs; the counter resets on
    improvement or decay.
    """
    lr = initial_lr
    best = np.inf
    bad = 0
    for value in history:
        if value < best:
            best = value
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                lr = max(lr * factor, min_lr)
                bad = 0
    return lr


def early_stopping(history: list[float], patience: int = 15) -> bool:
    """True when the best validation loss is at least ``patience`` epochs old."""
    if not history:
        return False
    best_epoch = int(np.argmin(history))
    return len(history) - 1 - best_epoch >= patience


# ----------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------
def split_by_position(
    samples: list[SimulationSample],
    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1),
    seed: int = 0,
):
    """Partition by probe position so no position spans splits.

    Validation and test take floor(ratio * positions) positions each; the
    remainder trains. Positions are shuffled deterministically by seed.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    positions = sorted({s.pose.position_key for s in samples})
    if len(positions) < 3:
        raise ValueError(f"need at least 3 probe positions to split, got {len(positions)}")
    order = np.random.default_rng(seed).permutation(len(positions))
    shuffled = [positions[i] for i in order]
    n_val = int(len(positions) * ratios[1])
    n_test = int(len(positions) * ratios[2])
    n_train = len(positions) - n_val - n_test
    train_pos = set(shuffled[:n_train])
    val_pos = set(shuffled[n_train : n_train + n_val])
    test_pos = set(shuffled[n_train + n_val :])
    train = [s for s in samples if s.pose.position_key in train_pos]
    val = [s for s in samples if s.pose.position_key in val_pos]
    test = [s for s in samples if s.pose.position_key in test_pos]
    return train, val, test


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------
def _sample_metrics(graph: GraphSample, pred: np.ndarray, rigid_mask: np.ndarray, include_virtual: bool):
    real = graph.real_node_count
    err = pred[:real] - graph.targets[:real]
    norms = np.linalg.norm(err, axis=1)
    mee = norms.mean()
    mae = np.abs(err).sum(axis=1).mean()
    mse = (err**2).sum(axis=1).mean()
    rigid = norms[rigid_mask].mean() if rigid_mask.any() else 0.0
    soft = norms[~rigid_mask].mean() if (~rigid_mask).any() else 0.0
    c, d = rigid_edge_residuals(graph, pred, include_virtual)
    ree = np.abs(c - d).mean() if c.size else 0.0
    return mee, mae, mse, rigid, soft, ree


def evaluate(
    params: ModelParams,
    samples: list[SimulationSample],
    builder: GraphBuilder,
    include_virtual_ree: bool = True,
) -> MetricsReport:
    """Metrics over a split, averaged per sample; real mesh nodes only."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    rigid_mask = builder.mesh.node_labels > 0
    acc = np.zeros(6)
    elapsed = 0.0
    for sample in samples:
        graph = builder.build(sample)
        start = time.perf_counter()
        pred = predict(graph, params)
        elapsed += time.perf_counter() - start
        acc += np.array(_sample_metrics(graph, pred, rigid_mask, include_virtual_ree))
    acc /= len(samples)
    return MetricsReport(
        mee=acc[0],
        mae=acc[1],
        mse=acc[2],
        rigid_mee=acc[3],
        soft_mee=acc[4],
        ree=acc[5],
        sample_count=len(samples),
        infer_ms=1e3 * elapsed / len(samples),
    )


def zero_predictor_mee(samples: list[SimulationSample]) -> float:
    """MEE of the all-zeros predictor: mean ground-truth displacement norm."""
    return float(
        np.mean([np.linalg.norm(s.ground_truth, axis=1).mean() for s in samples])
    )


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------
@dataclass
class TrainResult:
    params: ModelParams  # best-validation parameters
    curves: list[tuple[int, float, float, float]]  # (epoch, train, val, lr)
    splits: tuple[list, list, list]
    best_epoch: int
    val_report: MetricsReport
    test_report: MetricsReport | None


def _validation_loss(params, samples, builder, cfg) -> float:
    total = 0.0
    for sample in samples:
        graph = builder.build(sample)
        tape = Tape()
        pred, _ = model_forward(tape, graph, params)
        total += float(total_loss(tape, graph, pred, cfg).values)
    return total / len(samples)


def train_loop(
    cfg: TrainConfig,
    samples: list[SimulationSample],
    mesh: Mesh,
    splits: tuple[list, list, list] | None = None,
    evaluate_test: bool = True,
) -> TrainResult:
    """Mini-batch AdamW training with plateau decay and early stopping.

    ``splits`` overrides the per-position split (used by memorization and
    determinism checks). The best-validation parameters are retained and,
    when requested, evaluated on the test split.
    """
    if splits is None:
        splits = split_by_position(samples, cfg.split_ratios, cfg.seed)
    train, val, test = splits
    if not train or not val:
        raise ValueError("training and validation splits must be nonempty")

    builder = GraphBuilder(mesh, use_vn=cfg.use_vn, use_ve=cfg.use_ve)
    params = init_params(cfg.model_config(mesh))
    state = AdamWState()
    rng = np.random.default_rng(cfg.seed)

    curves: list[tuple[int, float, float, float]] = []
    val_history: list[float] = []
    best = (np.inf, -1, params.copy())

    for epoch in range(cfg.max_epochs):
        lr = plateau_scheduler(
            val_history, cfg.initial_lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr
        )
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            tape = Tape()
            tensors = {k: tape.tensor(v) for k, v in params.values.items()}
            acc = None
            for sample in batch:
                graph = builder.build(sample)
                pred, _ = model_forward(tape, graph, params, param_tensors=tensors)
                term = total_loss(tape, graph, pred, cfg)
                acc = term if acc is None else tape.add(acc, term)
            batch_loss = tape.smul(acc, 1.0 / len(batch))
            value = float(batch_loss.values)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            epoch_loss += value * len(batch)
            table = tape.backward(batch_loss)
            grads = {
                k: table.get(t.tid, np.zeros_like(t.values)) for k, t in tensors.items()
            }
            adamw_step(params.values, grads, state, lr, cfg.weight_decay)
        epoch_loss /= len(train)

        val_loss = _validation_loss(params, val, builder, cfg)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        val_history.append(val_loss)
        curves.append((epoch, epoch_loss, val_loss, lr))
        if val_loss < best[0]:
            best = (val_loss, epoch, params.copy())
        log.debug(
            "epoch %d train %.6f val %.6f lr %.2e", epoch, epoch_loss, val_loss, lr
        )
        if early_stopping(val_history, cfg.early_stop_patience):
            log.info("early stop at epoch %d (best %.6f)", epoch, best[0])
            break

    best_params = best[2]
    val_report = evaluate(best_params, val, builder, cfg.rel_virtual_edges)
    test_report = (
        evaluate(best_params, test, builder, cfg.rel_virtual_edges)
        if (test and evaluate_test)
        else None
    )
    return TrainResult(
        params=best_params,
        curves=curves,
        splits=splits,
        best_epoch=best[1],
        val_report=val_report,
        test_report=test_report,
    )


# ----------------------------------------------------------------------
# ablation grid
# ----------------------------------------------------------------------
# (experiment id, heads, edge features, rigid-edge loss, VN, VE)
ABLATION_GRID: tuple[tuple[int, int, bool, bool, bool, bool], ...] = (
    (1, 1, False, False, False, False),
    (2, 2, False, False, False, False),
    (3, 2, True, False, False, False),
    (4, 2, True, True, False, False),
    (5, 2, True, False, True, False),
    (6, 2, True, False, False, True),
    (7, 2, True, True, True, False),
    (8, 2, True, True, False, True),
    (9, 2, False, True, False, False),
    (10, 2, False, False, True, False),
    (11, 2, False, False, False, True),
    (12, 2, False, True, True, False),
    (13, 2, False, True, False, True),
)


def ablation_config(base: TrainConfig, row: tuple) -> TrainConfig:
    _, heads, ef, rel, vn, ve = row
    return replace(
        base, heads=heads, use_edge_features=ef, use_rel=rel, use_vn=vn, use_ve=ve
    )


def run_ablation(
    base: TrainConfig, samples: list[SimulationSample], mesh: Mesh
) -> list[tuple[int, TrainConfig, MetricsReport | None]]:
    """Train and evaluate one model per grid row; failed rows yield None."""
    splits = split_by_position(samples, base.split_ratios, base.seed)
    rows = []
    for row in ABLATION_GRID:
        cfg = ablation_config(base, row)
        try:
            result = train_loop(cfg, samples, mesh, splits=splits)
            report = result.test_report or result.val_report
        except Exception:
            log.exception("ablation experiment %d failed", row[0])
            report = None
        rows.append((row[0], cfg, report))
    return rows


CSV_HEADER = "experiment,heads,edge_feat,rel,vn,ve,mee,mae,mse,rigid_mee,soft_mee,ree,infer_ms"


def metrics_csv(rows: list[tuple[int | str, TrainConfig, MetricsReport | None]]) -> str:
    """Comma-separated table, one row per experiment, 4 decimal places."""
    lines = [CSV_HEADER]
    for exp, cfg, rep in rows:
        toggles = (
            f"{cfg.heads},{int(cfg.use_edge_features)},{int(cfg.use_rel)},"
            f"{int(cfg.use_vn)},{int(cfg.use_ve)}"
        )
        if rep is None:
            lines.append(f"{exp},{toggles},nan,nan,nan,nan,nan,nan,nan")
        else:
            lines.append(
                f"{exp},{toggles},{rep.mee:.4f},{rep.mae:.4f},{rep.mse:.4f},"
                f"{rep.rigid_mee:.4f},{rep.soft_mee:.4f},{rep.ree:.4f},{rep.infer_ms:.4f}"
            )
    return "\n".join(lines) + "\n"
