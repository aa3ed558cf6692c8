"""Physics-informed graph attention networks for quasi-static mixed
soft/rigid deformation prediction.

Pipeline: generate a labeled phantom mesh (:mod:`mixpinn.mesh`), produce
ground-truth displacement fields with the built-in elasticity oracle
(:mod:`mixpinn.oracle`), convert samples to augmented graphs
(:mod:`mixpinn.graph`), and train the multi-head attention model
(:mod:`mixpinn.model`, :mod:`mixpinn.train`). The ``mixpinn`` command ties
the stages together.
"""

from .mesh import Mesh, PhantomConfig, center_mesh, generate_phantom, load_mesh, mesh_hash, save_mesh
from .oracle import (
    MaterialParams,
    ProbePose,
    SimulationSample,
    SweepConfig,
    load_dataset,
    run_sweep,
    save_dataset,
)
from .graph import GraphBuilder, GraphSample, build_graph
from .model import ModelConfig, ModelParams, init_params, load_checkpoint, predict, save_checkpoint
from .train import MetricsReport, TrainConfig, evaluate, run_ablation, split_by_position, train_loop

__version__ = "0.1.0"

__all__ = [
    "GraphBuilder",
    "GraphSample",
    "MaterialParams",
    "Mesh",
    "MetricsReport",
    "ModelConfig",
    "ModelParams",
    "PhantomConfig",
    "ProbePose",
    "SimulationSample",
    "SweepConfig",
    "TrainConfig",
    "build_graph",
    "center_mesh",
    "evaluate",
    "generate_phantom",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "load_mesh",
    "mesh_hash",
    "predict",
    "run_ablation",
    "run_sweep",
    "save_checkpoint",
    "save_dataset",
    "save_mesh",
    "split_by_position",
    "train_loop",
]
