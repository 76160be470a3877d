"""mpne_lab: equilibrium solver, simulator and QML estimator for
dynamic hierarchical network games (one resource allocator, n agents)."""

from .errors import (
    AllCandidatesInfeasibleError,
    ContractionViolatedError,
    DegenerateVarianceError,
    DivergentHorizonError,
    ExplosiveSampleError,
    MissingLevelsError,
    MPNELabError,
    NetworkFormatError,
    NoConvergenceError,
    NonPDVarianceError,
    NotInMError,
    RankDeficientError,
    SingularHessianError,
    SingularSystemError,
    SpecError,
    TruncationFailureError,
)
from .model import (
    AllocatorParams,
    Dimensions,
    FixedEffects,
    ModelSpec,
    Network,
    PayoffParams,
    ProcessParams,
    ShockParams,
    ValidationReport,
    benchmark_spec,
    bundled_network_path,
    load_network,
    read_spec,
    validate_spec,
    write_spec,
)
from .solver import (
    PolicySolution,
    ReducedForm,
    SolverOptions,
    UniquenessReport,
    ValueBlocks,
    assemble_reduced_form,
    check_uniqueness,
    dump_solution,
    follower_value_blocks,
    leader_value_blocks,
    solve_mpne,
    solve_myopic,
)
from .simulate import (
    LatentTrace,
    PanelData,
    SimOptions,
    deterministic_steady_state,
    panel_from_csv,
    panel_to_csv,
    simulate_panel,
    spec_fingerprint,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
