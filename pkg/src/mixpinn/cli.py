"""Config-driven command line: phantom generation, simulation sweeps, graph
caching, training, evaluation, ablation, prediction and runtime profiling.

Configuration resolves defaults <- config file <- command-line flags; every
artifact gets a sidecar ``<artifact>.manifest`` recording the resolved
configuration, the seed and the SHA-256 of each input file. Exit codes:
0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time

import numpy as np

from . import graph as graph_mod
from . import mesh as mesh_mod
from . import model as model_mod
from . import oracle as oracle_mod
from . import train as train_mod

log = logging.getLogger("mixpinn")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# Desk-scale default experiment: ~30 CPU-minutes end to end.
DEFAULTS: dict[str, object] = {
    # phantom
    "box_x": 160.0,
    "box_y": 80.0,
    "box_z": 80.0,
    "cells_x": 16,
    "cells_y": 8,
    "cells_z": 8,
    "inclusion_count": 2,
    "inclusion_1": "30 30 40 70 60 70",
    "inclusion_2": "90 30 40 130 60 70",
    "fixed_face": "-z",
    # material
    "young_modulus": 25400.0,
    "poisson_ratio": 0.45,
    # probe sweep
    "grid_nx": 8,
    "grid_ny": 3,
    "grid_spacing": 10.0,
    "depth_steps": 10,
    "step_mm": 1.0,
    "probe_half_long": 20.0,
    "probe_half_short": 5.0,
    "geometry_update": True,
    # model
    "layers": 4,
    "heads": 2,
    "hidden": 32,
    "edge_features": False,
    "negative_slope": 0.01,
    # training
    "batch_size": 4,
    "lr": 5e-4,
    "weight_decay": 0.01,
    "plateau_factor": 0.1,
    "plateau_patience": 5,
    "min_lr": 1e-8,
    "early_stop": 15,
    "max_epochs": 100,
    "lambda": 1.0,
    "rel": False,
    "vn": True,
    "ve": False,
    "rel_virtual_edges": True,
    "split_train": 0.7,
    "split_val": 0.2,
    "split_test": 0.1,
    # misc
    "seed": 0,
    "jobs": 1,
}

_BOOL_KEYS = {"geometry_update", "edge_features", "rel", "vn", "ve", "rel_virtual_edges"}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    if key in _BOOL_KEYS or isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"config key {key!r}: expected boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def _load_config_file(path: str) -> dict:
    out = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in DEFAULTS and not key.startswith("inclusion_"):
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        if key.startswith("inclusion_") and key != "inclusion_count":
            out[key] = raw.strip()
        else:
            out[key] = _parse_value(key, raw)
    return out


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(_load_config_file(args.config))
    overrides = {
        "seed": args.seed,
        "jobs": args.jobs,
        "heads": args.heads,
        "edge_features": args.edge_features,
        "rel": args.rel,
        "lambda": args.rel_lambda,
        "vn": args.vn,
        "ve": args.ve,
    }
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    if getattr(args, "paper_scale", False):
        cfg["layers"], cfg["heads"], cfg["hidden"] = 8, 2, 256
    if getattr(args, "linear_only", False):
        cfg["geometry_update"] = False
    return cfg


def _config_lines(cfg: dict) -> list[str]:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return lines


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(artifact_path: str, tool: str, cfg: dict, inputs: dict[str, str]) -> None:
    lines = [f"tool = {tool}"]
    lines.extend(_config_lines(cfg))
    for name, path in sorted(inputs.items()):
        lines.append(f"input.{name} = {_sha256(path)}")
    with open(str(artifact_path) + ".manifest", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def phantom_config(cfg: dict) -> mesh_mod.PhantomConfig:
    count = int(cfg["inclusion_count"])
    inclusions = []
    for k in range(1, count + 1):
        key = f"inclusion_{k}"
        if key not in cfg:
            raise UsageError(f"inclusion_count = {count} but {key} is missing")
        parts = str(cfg[key]).split()
        if len(parts) != 6:
            raise UsageError(f"{key} must give 6 numbers 'x0 y0 z0 x1 y1 z1'")
        vals = [float(p) for p in parts]
        inclusions.append(((vals[0], vals[1], vals[2]), (vals[3], vals[4], vals[5])))
    return mesh_mod.PhantomConfig(
        box_mm=(cfg["box_x"], cfg["box_y"], cfg["box_z"]),
        cells=(cfg["cells_x"], cfg["cells_y"], cfg["cells_z"]),
        inclusions=tuple(inclusions),
        fixed_face=str(cfg["fixed_face"]),
        seed=int(cfg["seed"]),
    )


def sweep_config(cfg: dict) -> oracle_mod.SweepConfig:
    return oracle_mod.SweepConfig(
        grid_nx=int(cfg["grid_nx"]),
        grid_ny=int(cfg["grid_ny"]),
        spacing=float(cfg["grid_spacing"]),
        depth_steps=int(cfg["depth_steps"]),
        step_mm=float(cfg["step_mm"]),
        half_len_long=float(cfg["probe_half_long"]),
        half_len_short=float(cfg["probe_half_short"]),
        geometry_update=bool(cfg["geometry_update"]),
        jobs=int(cfg["jobs"]),
    )


def train_config(cfg: dict) -> train_mod.TrainConfig:
    return train_mod.TrainConfig(
        batch_size=int(cfg["batch_size"]),
        initial_lr=float(cfg["lr"]),
        plateau_factor=float(cfg["plateau_factor"]),
        plateau_patience=int(cfg["plateau_patience"]),
        min_lr=float(cfg["min_lr"]),
        early_stop_patience=int(cfg["early_stop"]),
        weight_decay=float(cfg["weight_decay"]),
        rel_weight=float(cfg["lambda"]),
        max_epochs=int(cfg["max_epochs"]),
        seed=int(cfg["seed"]),
        heads=int(cfg["heads"]),
        use_edge_features=bool(cfg["edge_features"]),
        use_rel=bool(cfg["rel"]),
        use_vn=bool(cfg["vn"]),
        use_ve=bool(cfg["ve"]),
        layer_count=int(cfg["layers"]),
        hidden_per_head=int(cfg["hidden"]),
        rel_virtual_edges=bool(cfg["rel_virtual_edges"]),
        split_ratios=(cfg["split_train"], cfg["split_val"], cfg["split_test"]),
    )


def _load_mesh(path: str) -> mesh_mod.Mesh:
    if not os.path.exists(path):
        raise DataError(f"mesh file not found: {path}")
    return mesh_mod.load_mesh(path)


def _load_paired_dataset(mesh, data_path: str):
    if not os.path.exists(data_path):
        raise DataError(f"dataset file not found: {data_path}")
    samples, meta = oracle_mod.load_dataset(data_path)
    have = mesh_mod.mesh_hash(mesh)
    if meta["mesh_hash"] != have:
        raise DataError(
            f"dataset was generated from mesh {meta['mesh_hash']:#018x} but the "
            f"given mesh hashes to {have:#018x}; regenerate the dataset or pass "
            "the matching mesh"
        )
    return samples, meta


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_phantom(args, cfg) -> int:
    mesh = mesh_mod.generate_phantom(phantom_config(cfg))
    mesh_mod.save_mesh(mesh, args.out)
    write_manifest(args.out, "phantom", cfg, {})
    stats = {int(k): int(v) for k, v in zip(*np.unique(mesh.node_labels, return_counts=True))}
    log.info("phantom: %d nodes %d tets, labels %s", mesh.node_count, mesh.tetrahedra.shape[0], stats)
    print(f"wrote {args.out}: {mesh.node_count} nodes, {mesh.tetrahedra.shape[0]} tets")
    return 0


def cmd_simulate(args, cfg) -> int:
    mesh = _load_mesh(args.mesh)
    material = oracle_mod.MaterialParams(cfg["young_modulus"], cfg["poisson_ratio"])
    sweep = sweep_config(cfg)
    samples = oracle_mod.run_sweep(mesh, material, sweep)
    if not samples:
        raise DataError("sweep produced no samples; check the probe configuration")
    oracle_mod.save_dataset(samples, args.out, sweep)
    write_manifest(args.out, "simulate", cfg, {"mesh": args.mesh})
    print(f"wrote {args.out}: {len(samples)} samples")
    return 0


def cmd_build_graphs(args, cfg) -> int:
    mesh = _load_mesh(args.mesh)
    samples, _ = _load_paired_dataset(mesh, args.data)
    builder = graph_mod.GraphBuilder(mesh, use_vn=bool(cfg["vn"]), use_ve=bool(cfg["ve"]))
    graphs = [builder.build(s) for s in samples]
    graph_mod.save_graph_cache(args.out, graphs, mesh)
    write_manifest(args.out, "build-graphs", cfg, {"mesh": args.mesh, "dataset": args.data})
    print(f"wrote {args.out}: {len(graphs)} graphs")
    return 0


def _write_curves(path, curves) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,train_loss,val_loss,lr\n")
        for epoch, tr, vl, lr in curves:
            fh.write(f"{epoch},{tr:.17g},{vl:.17g},{lr:.17g}\n")


def cmd_train(args, cfg) -> int:
    mesh = _load_mesh(args.mesh)
    samples, _ = _load_paired_dataset(mesh, args.data)
    tcfg = train_config(cfg)
    result = train_mod.train_loop(tcfg, samples, mesh)
    model_mod.save_checkpoint(args.out, result.params)
    curves_path = args.curves or (str(args.out) + ".curves.csv")
    _write_curves(curves_path, result.curves)
    write_manifest(args.out, "train", cfg, {"mesh": args.mesh, "dataset": args.data})
    rows = [("val", tcfg, result.val_report)]
    if result.test_report:
        rows.append(("test", tcfg, result.test_report))
    print(train_mod.metrics_csv(rows), end="")
    return 0


def cmd_eval(args, cfg) -> int:
    mesh = _load_mesh(args.mesh)
    samples, _ = _load_paired_dataset(mesh, args.data)
    params = model_mod.load_checkpoint(args.ckpt)
    tcfg = train_config(cfg)
    expected = tcfg.model_config(mesh)
    if (params.config.node_dim, params.config.edge_dim) != (expected.node_dim, expected.edge_dim):
        raise DataError(
            f"checkpoint feature dims ({params.config.node_dim},{params.config.edge_dim}) "
            f"do not match this mesh ({expected.node_dim},{expected.edge_dim})"
        )
    train, val, test = train_mod.split_by_position(samples, tcfg.split_ratios, tcfg.seed)
    subset = {"train": train, "val": val, "test": test, "all": samples}[args.split]
    builder = graph_mod.GraphBuilder(mesh, use_vn=bool(cfg["vn"]), use_ve=bool(cfg["ve"]))
    report = train_mod.evaluate(params, subset, builder, bool(cfg["rel_virtual_edges"]))
    csv = train_mod.metrics_csv([(args.split, tcfg, report)])
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write(csv)
    write_manifest(args.out, "eval", cfg, {"mesh": args.mesh, "dataset": args.data, "checkpoint": args.ckpt})
    print(csv, end="")
    return 0


def cmd_ablate(args, cfg) -> int:
    mesh = _load_mesh(args.mesh)
    samples, _ = _load_paired_dataset(mesh, args.data)
    rows = train_mod.run_ablation(train_config(cfg), samples, mesh)
    csv = train_mod.metrics_csv(rows)
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write(csv)
    write_manifest(args.out, "ablate", cfg, {"mesh": args.mesh, "dataset": args.data})
    print(csv, end="")
    return 0


def cmd_predict(args, cfg) -> int:
    mesh = _load_mesh(args.mesh)
    samples, _ = _load_paired_dataset(mesh, args.data)
    if not 0 <= args.index < len(samples):
        raise DataError(f"sample index {args.index} out of range 0..{len(samples) - 1}")
    params = model_mod.load_checkpoint(args.ckpt)
    builder = graph_mod.GraphBuilder(mesh, use_vn=bool(cfg["vn"]), use_ve=bool(cfg["ve"]))
    graph = builder.build(samples[args.index])
    pred = model_mod.predict(graph, params)[: graph.real_node_count]
    with open(args.out, "w", encoding="ascii") as fh:
        for row in pred:
            fh.write(f"{row[0]:.17g} {row[1]:.17g} {row[2]:.17g}\n")
    write_manifest(args.out, "predict", cfg, {"mesh": args.mesh, "dataset": args.data, "checkpoint": args.ckpt})
    print(f"wrote {args.out}: {pred.shape[0]} rows")
    return 0


def profile_run(mesh, samples, params, cfg, n_samples: int, warmup: int = 3):
    """Per-sample oracle and inference timings plus depth-wise statistics."""
    if len(samples) < n_samples:
        raise DataError(
            f"profiling needs at least {n_samples} samples, dataset has {len(samples)}"
        )
    subset = samples[:n_samples]
    material = oracle_mod.MaterialParams(cfg["young_modulus"], cfg["poisson_ratio"])
    builder = graph_mod.GraphBuilder(mesh, use_vn=bool(cfg["vn"]), use_ve=bool(cfg["ve"]))

    graphs = [builder.build(s) for s in subset]
    for g in graphs[:warmup]:
        model_mod.predict(g, params)
    infer_times = []
    for g in graphs:
        start = time.perf_counter()
        model_mod.predict(g, params)
        infer_times.append(time.perf_counter() - start)

    oracle_times = []
    for s in subset[: max(warmup, 1)]:
        _time_oracle_once(mesh, material, s)  # warm-up (BLAS, caches)
    for s in subset:
        oracle_times.append(_time_oracle_once(mesh, material, s))

    infer_times = np.array(infer_times)
    oracle_times = np.array(oracle_times)
    depths = np.array([s.pose.depth_index for s in subset])
    per_depth = [infer_times[depths == d].mean() for d in np.unique(depths)]
    per_depth = np.array(per_depth)
    cov = float(per_depth.std() / per_depth.mean()) if per_depth.size > 1 else 0.0
    return {
        "oracle_ms": 1e3 * float(oracle_times.mean()),
        "inference_ms": 1e3 * float(infer_times.mean()),
        "ratio": float(oracle_times.mean() / infer_times.mean()),
        "inference_cov": cov,
        "samples": n_samples,
    }


def _time_oracle_once(mesh, material, sample) -> float:
    prescribed = {
        int(n): sample.prescribed_displacements[i]
        for i, n in enumerate(sample.contact_nodes)
    }
    start = time.perf_counter()
    k = oracle_mod.assemble_stiffness(mesh, material)
    reduced = oracle_mod.reduce_rigid(k, mesh)
    u = oracle_mod.solve_step(reduced, prescribed, mesh.fixed_nodes)
    oracle_mod.project_rigid(u, mesh)
    return time.perf_counter() - start


def cmd_profile(args, cfg) -> int:
    mesh = _load_mesh(args.mesh)
    samples, _ = _load_paired_dataset(mesh, args.data)
    params = model_mod.load_checkpoint(args.ckpt)
    stats = profile_run(mesh, samples, params, cfg, args.samples)
    csv = (
        "oracle_ms,inference_ms,ratio,inference_cov,samples\n"
        f"{stats['oracle_ms']:.4f},{stats['inference_ms']:.4f},"
        f"{stats['ratio']:.4f},{stats['inference_cov']:.4f},{stats['samples']}\n"
    )
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write(csv)
    write_manifest(args.out, "profile", cfg, {"mesh": args.mesh, "dataset": args.data, "checkpoint": args.ckpt})
    print(csv, end="")
    return 0


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None, help="worker bound for the sweep")
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--edge-features", action=argparse.BooleanOptionalAction, default=None, dest="edge_features")
    p.add_argument("--rel", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--lambda", type=float, default=None, dest="rel_lambda", help="rigid-edge loss weight")
    p.add_argument("--vn", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--ve", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--paper-scale", action="store_true", help="use the 8-layer / 2-head / 256-hidden model")
    p.add_argument("--linear-only", action="store_true", help="disable geometry update between depth steps")
    p.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")


def build_parser() -> _Parser:
    parser = _Parser(prog="mixpinn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate the synthetic soft/rigid mesh")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="run the probe sweep and write the dataset")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-graphs", help="write the optional graph cache")
    p.add_argument("--mesh", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--mesh", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curves", default=None, help="loss curve CSV (default <out>.curves.csv)")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--mesh", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the 13-row configuration grid")
    p.add_argument("--mesh", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="predict displacements for one sample")
    p.add_argument("--mesh", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("profile", help="time the oracle against model inference")
    p.add_argument("--mesh", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=50)
    _add_common(p)
    p.set_defaults(func=cmd_profile)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("MIXPINN_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        if args.dump_config:
            print("\n".join(_config_lines(cfg)))
            return 0
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (
        DataError,
        FileNotFoundError,
        mesh_mod.MeshError,
        oracle_mod.DatasetFormatError,
        graph_mod.GraphCacheError,
        model_mod.CheckpointError,
        ValueError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (oracle_mod.SolverError, train_mod.TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
