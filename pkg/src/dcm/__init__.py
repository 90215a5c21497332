"""Dynamic causal model engine: panel estimation, counterfactual scoring,
Shapley attribution, and bootstrap inference, validated against a synthetic
ground-truth oracle."""

__version__ = "0.1.0"

from . import errors
from .bootstrap import BootstrapReport, bootstrap_value
from .config import (
    ModelConfig,
    RegressionBlock,
    ShockEntry,
    ShockSpec,
    Variable,
    load_config,
    load_shock,
    parse_config,
    parse_shock,
    serialize_config,
    shock_from_dict,
    validate_within_period_dag,
)
from .estimator import (
    CoefficientSet,
    FitResult,
    fit_dcm,
    fit_target,
    load_artifact,
    save_artifact,
)
from .panel import (
    DesignMatrix,
    PanelTensor,
    ValidationReport,
    build_design,
    ingest_panel,
    validate_panel,
    write_panel,
)
from .report import (
    ValuationTable,
    aggregate_by_group,
    combine_tables,
    denormalize,
    normalize_table,
    table_to_csv,
)
from .scorer import (
    MODE_DETERMINISTIC,
    MODE_RESIDUAL_REPLAY,
    BatchEntry,
    CounterfactualResult,
    Trajectory,
    batch_score,
    export_result_csv,
    score_counterfactual,
    simulate_path,
)
from .shapley import (
    AttributionResult,
    Player,
    PlayerSet,
    attribute,
    characteristic_value,
    evaluate_characteristic_map,
    players_from_dict,
    shapley_exact,
    shapley_sampled,
)
from .synthetic import (
    SynthSpec,
    build_config,
    generate_panel,
    oracle_score,
    random_truth,
    spec_from_dict,
    transition_norm,
)
