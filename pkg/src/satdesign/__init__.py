"""Design-based estimation for randomized saturation experiments with
within-cluster and between-cluster (geographic) interference."""

from ._common import (
    DigestError,
    EmptyCellError,
    PositivityError,
    SchemaError,
    SupportTooLargeError,
    as_fraction,
)
from .data import ObservedData, observe
from .design import (
    AssignmentVector,
    BernoulliRule,
    FixedFraction,
    SaturationLevel,
    SaturationPolicy,
    enumerate_assignments,
    policy_support_size,
    sample_assignment,
    sample_assignment_batch,
)
from .estimators import (
    CellMeanEstimate,
    EffectEstimate,
    conditional_effects,
    covariate_adjusted_cell_mean,
    hajek_cell_mean,
    ht_cell_mean,
    policy_effects,
    wie_variants_holding_treated,
)
from .exposure import ExposureConfig, ExposureMatrix, cell_counts, compute_exposures
from .inclusion import (
    InclusionTable,
    WeightScheme,
    estimate_inclusion_mc,
    estimate_policy_weights,
    exact_inclusion,
    positivity_report,
    weights_from_table,
)
from .network import (
    DependencyGraph,
    Network,
    UnitRecord,
    build_network,
    degree_diagnostics,
    dependency_graph,
)
from .simharness import (
    DgpSpec,
    PotentialOutcomeTable,
    ReplicationReport,
    TruthReport,
    compute_truth,
    consistency_sweep,
    generate_po_table,
    run_replications,
    synthetic_units,
)
from .variance import (
    OmegaOperator,
    VarianceEstimate,
    build_lambda,
    build_omega,
    ca_variance,
    confidence_interval,
    conservative_contrast_variance,
    estimate_variance_cell,
    oracle_acov,
    oracle_avar,
)

__version__ = "0.1.0"
