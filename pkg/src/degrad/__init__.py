"""Decentralized optimization laboratory.

Simulates GD, DGD, diffusion (ATC/CTA) and federated averaging over
undirected weight matrices, and evaluates contraction-based error
bounds against the simulated trajectories.
"""

from . import bounds, dynamics, objectives, topology
from .bounds import (
    BoundReport,
    ContractionSpec,
    Envelope,
    Regime,
    aux_distance_check,
    contraction_factor,
    fixed_point_gap_bound,
    nc3t_dhat,
    nc3t_envelope,
    time_varying_envelope,
    total_error_envelope,
)
from .dynamics import (
    AlgorithmConfig,
    NoiseConfig,
    StepSchedule,
    Trace,
    fixed_point,
    nc3t_counterexample,
    run,
    step,
)
from .errors import *  # noqa: F401,F403
from .objectives import (
    ObjectiveEnsemble,
    grad_stack,
    heterogeneity,
    make_linear_regression,
    make_quadratic,
    mht_kernel,
    sample_stochastic_grad,
    solve_optimum,
)
from .topology import (
    LinkFailureModel,
    LinkMode,
    Topology,
    build_toy,
    combine_rounds,
    expected_Q,
    from_laplacian,
    link_noise_variance_bound,
    sample_link_failure,
    scale_consensus,
    spectrum,
    topology_factor,
    validate,
)
from .variants import Variant

__version__ = "0.1.0"
