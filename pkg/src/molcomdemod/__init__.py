"""Stochastic simulation and MAP demodulation for diffusive molecular links.

End-to-end toolkit for a voxelized reaction-diffusion channel with a
chemical-reaction transmitter and a ligand-receptor receiver: exact
event-driven simulation, estimation of the receiver-side mean-signal model,
a lightweight log-likelihood-ratio demodulator driven by that model, and an
exact Bayesian filter over a truncated state space for the optimal
benchmark.  The :mod:`~molcomdemod.harness` module packages the standard
experiments behind a reproducible configuration layer and the ``molcom``
command-line interface.
"""

from .errors import (
    BudgetExceeded,
    ConfigError,
    CoverageError,
    ModelInconsistencyError,
    NumericalFault,
)
from .model import (
    BernoulliInitial,
    Boundary,
    Channel,
    GridSpec,
    Model,
    ModelSpec,
    Reaction,
    ReceiverSpec,
    SystemState,
    TransmitterSpec,
    build_model,
    three_voxel_example,
    total_propensity,
    voxel_coords,
    voxel_index,
)
from .ssa import (
    BindingHistory,
    SequenceTrajectory,
    Trajectory,
    extract_binding_history,
    simulate,
    simulate_channels,
    simulate_sequence,
)
from .internal_model import (
    InternalModel,
    estimate_internal_model,
    superpose,
)
from .demod import (
    DemodOutput,
    FilterTrace,
    IsiConfig,
    IsiResult,
    demodulate,
    isi_decode,
    run_filter,
)
from .exact_filter import (
    ConditionalMean,
    ExactFilter,
    ExactTrace,
    FilterState,
    OptimalOutput,
    StateSpace,
    optimal_demodulate,
    pilot_caps,
)
from .harness import (
    ExperimentConfig,
    SerRow,
    SerTable,
    fit_loglog_slope,
    preset,
    run_experiment,
    wilson_interval,
)

__version__ = "0.1.0"

__all__ = [
    "BernoulliInitial",
    "BindingHistory",
    "Boundary",
    "BudgetExceeded",
    "Channel",
    "ConditionalMean",
    "ConfigError",
    "CoverageError",
    "DemodOutput",
    "ExactFilter",
    "ExactTrace",
    "ExperimentConfig",
    "FilterState",
    "FilterTrace",
    "GridSpec",
    "InternalModel",
    "IsiConfig",
    "IsiResult",
    "Model",
    "ModelInconsistencyError",
    "ModelSpec",
    "NumericalFault",
    "OptimalOutput",
    "Reaction",
    "ReceiverSpec",
    "SequenceTrajectory",
    "SerRow",
    "SerTable",
    "StateSpace",
    "SystemState",
    "Trajectory",
    "TransmitterSpec",
    "build_model",
    "demodulate",
    "estimate_internal_model",
    "extract_binding_history",
    "fit_loglog_slope",
    "isi_decode",
    "optimal_demodulate",
    "pilot_caps",
    "preset",
    "run_experiment",
    "run_filter",
    "simulate",
    "superpose",
    "wilson_interval",
    "simulate_channels",
    "simulate_sequence",
    "three_voxel_example",
    "total_propensity",
    "voxel_coords",
    "voxel_index",
    "__version__",
]
