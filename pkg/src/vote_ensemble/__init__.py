"""Model-level voting ensembles for heavy-tailed stochastic optimization."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .core import (
    EnsembleConfig,
    EnsembleOutput,
    InvalidArgument,
    LearnerError,
    LossError,
    ModelKey,
    SampleBatch,
    VoteTally,
    epsilon_vote_phase2,
    retrieve_phase1,
    run_move,
    run_rove,
    select_epsilon,
    subsample_indices,
)

__all__ = [
    "EnsembleConfig",
    "EnsembleOutput",
    "InvalidArgument",
    "LearnerError",
    "LossError",
    "ModelKey",
    "SampleBatch",
    "VoteTally",
    "epsilon_vote_phase2",
    "retrieve_phase1",
    "run_move",
    "run_rove",
    "select_epsilon",
    "subsample_indices",
]
