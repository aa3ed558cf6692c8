"""Enumerate the 13-row ablation grid and time the oracle against inference.

Each grid row toggles head count, edge-feature attention, the rigid-edge
loss, virtual nodes and virtual edges. Here every row trains for a single
epoch just to show the machinery; real studies raise max_epochs. The
profile section compares one oracle solve against one model inference.
"""

import time

import numpy as np

from mixpinn import (
    MaterialParams,
    PhantomConfig,
    SweepConfig,
    TrainConfig,
    generate_phantom,
    run_sweep,
)
from mixpinn.graph import GraphBuilder
from mixpinn.model import init_params, predict
from mixpinn.oracle import assemble_stiffness, project_rigid, reduce_rigid, solve_step
from mixpinn.train import metrics_csv, run_ablation

mesh = generate_phantom(
    PhantomConfig(
        box_mm=(80.0, 60.0, 60.0),
        cells=(8, 6, 6),
        inclusions=(((20.0, 15.0, 30.0), (50.0, 45.0, 50.0)),),
    )
)
sweep = SweepConfig(grid_nx=5, grid_ny=2, depth_steps=2, half_len_long=15.0, half_len_short=5.0)
samples = run_sweep(mesh, MaterialParams(), sweep)

base = TrainConfig(max_epochs=1, layer_count=2, hidden_per_head=8, seed=0)
rows = run_ablation(base, samples, mesh)
print("ablation grid (1 epoch per row, metrics on the held-out split):\n")
print(metrics_csv(rows))

# ------------------------------------------------------------------
# runtime: one oracle solve vs one model inference for the same sample
# ------------------------------------------------------------------
sample = samples[0]
material = MaterialParams()
prescribed = {int(n): sample.prescribed_displacements[i] for i, n in enumerate(sample.contact_nodes)}

start = time.perf_counter()
reduced = reduce_rigid(assemble_stiffness(mesh, material), mesh)
field = project_rigid(solve_step(reduced, prescribed, mesh.fixed_nodes), mesh)
oracle_ms = 1e3 * (time.perf_counter() - start)

builder = GraphBuilder(mesh, use_vn=True)
graph = builder.build(sample)
cfg = TrainConfig(use_vn=True)
params = init_params(cfg.model_config(mesh))
predict(graph, params)  # warm-up
start = time.perf_counter()
predict(graph, params)
infer_ms = 1e3 * (time.perf_counter() - start)

print(f"oracle solve:    {oracle_ms:7.1f} ms")
print(f"model inference: {infer_ms:7.1f} ms")
print(f"speed-up:        {oracle_ms / infer_ms:7.1f} x")
