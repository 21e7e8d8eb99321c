"""Desk-scale federated learning with a learned aggregation policy.

A numpy-only simulator: clients train small classifiers on private
shards, a server aggregates their uploads, and a soft actor-critic agent
learns per-client aggregation weights that tolerate defective uploads. A
parameter auto-encoder scores upload quality and feeds both the agent's
state and its reward.
"""

__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig, parse_config  # noqa: F401
from .experiments import (  # noqa: F401
    CheckpointError,
    DataError,
    describe_checkpoint,
    run_ablation,
    run_fl,
    run_sweep,
    train_dearfsac,
)
