"""Causal panel analysis under parallel trends.

A library-plus-CLI engine for panels with binary treatments: the two-way
fixed-effects baseline, heterogeneity-robust estimators, cluster-bootstrap
inference, pretrend/placebo/carryover diagnostics, placebo-benchmarked
robust confidence sets, and a synthetic-panel generator for validation.
"""

from .errors import (
    BootstrapFailureError,
    ConvergenceError,
    EstimatorError,
    PanelTrendsError,
    SchemaError,
)
from .panel import (
    EventStructure,
    PanelDataset,
    SettingClass,
    build_dataset,
    classify_setting,
    compute_event_structure,
    drop_always_treated,
    read_long_csv,
    recode_carryover,
    status_summary,
    write_long_csv,
)
from .fe import (
    ClusterVcov,
    EventStudyResult,
    FEFit,
    cluster_vcov,
    fit_fe,
    twfe_att,
    twfe_event_study,
)
from .imputation import (
    ImputationResult,
    aggregate_effects,
    estimate_imputation,
    fit_control_model,
    impute_and_difference,
)
from .did import (
    BaconDecomposition,
    DidMultipleResult,
    GroupTimeGrid,
    MatchedSet,
    PanelMatchResult,
    StackedResult,
    bacon_decompose,
    csdid,
    did_multiple,
    iw,
    panel_match,
    stacked_did,
)
from .inference import (
    BootstrapDraws,
    bootstrap_vcov,
    cluster_bootstrap,
    percentile_ci,
    wald_joint_test,
)
from .diagnostics import (
    DiagnosticsReport,
    carryover_test,
    event_study_table,
    placebo_test,
    pretrend_f_test,
)
from .sensitivity import (
    RobustCS,
    breakdown_value,
    max_placebo_violation,
    robust_cs,
    sensitivity_curve,
)
from .simulate import (
    DgpSpec,
    SyntheticPanel,
    adversarial_negative_weighting,
    simulate_panel,
    true_estimands,
)

__version__ = "0.1.0"
