"""Decentralized Gauss-Seidel coordination of block-coupled QPs with multi-grid coarsening."""

from .cases import (
    Case,
    SpatialCaseSpec,
    TemporalCaseSpec,
    build_spatial,
    build_temporal,
    disturbance_field,
    flow_from_potentials,
)
from .coarsening import (
    CoarseningSchedule,
    GridTransfer,
    build_transfer_spatial,
    build_transfer_temporal,
    case_transfer,
    coarsen_problem,
    prolong,
    restrict,
    run_multigrid,
    warm_start,
)
from .coordination import (
    ConvergenceCertificate,
    CoordinationState,
    IterationOperator,
    build_iteration_operator,
    certify,
    gs_sweep,
    oracle_state,
    partition_solve,
    run_gs,
    spectral_radius,
)
from .errors import *  # noqa: F401,F403
from .lifting import LiftedProblem, Partitioning, build_lifted, lift_explicit, verify_lift
from .ordering import (
    OrderingSchedule,
    by_disturbance_magnitude,
    forward_backward,
    lexicographic,
    red_black,
    reverse_lexicographic,
    spiral,
)
from .qp_core import (
    CoupledQP,
    KKTSolution,
    UnconstrainedQP,
    reduce_to_unconstrained,
    solve_centralized,
    solve_saddle,
    spd_check,
)

__version__ = "0.1.0"
