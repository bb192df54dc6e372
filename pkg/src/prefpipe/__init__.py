"""prefpipe: preference-dataset construction and verification for DPO training."""

from .model import (
    AnnotationRecord,
    Instruction,
    MixTag,
    OrderVariant,
    Policy,
    PreferencePair,
    RawRun,
    Response,
    ScoreEntry,
    ScoredSet,
    ScoringMethod,
    Strategy,
    Turn,
    read_stage_file,
    write_stage_file,
)
from .validation import ValidationReport, Violation, validate_dataset, validate_files
from .gateway import (
    BackendRefused,
    ChatMessage,
    ChatRequest,
    ChatResult,
    DistributionUnavailable,
    Gateway,
    GatewayConfig,
    MockBackend,
    MockRule,
    RetryPolicy,
    TransportError,
    UnmatchedRequest,
    load_mock_script,
    mock_backend,
)
from .annotation import (
    PreferenceQuestions,
    StrategySpec,
    TokenDistribution,
    annotate_set,
    generate_questions,
    parse_scores,
    render_prompt,
    score_avg,
    score_greedy,
    score_prob,
)
from .selection import (
    QualityTag,
    VarianceBucket,
    compute_variance,
    instag_quality,
    length_filter,
    population_variance,
    select_by_variance,
    split_by_turns,
)
from .pairs import (
    CandidatePair,
    MarginBucket,
    MixStrategy,
    ScoredResponse,
    ScoreTier,
    balance_arm_sizes,
    build_pairs,
    candidate_pairs,
    export_dpo,
    export_rows,
    filter_pairs,
    match_margin_distributions,
    orient_pair,
    sample_per_instruction,
)
from .stats import StatsReport, compute_stats, strategy_consistency
from .dpo import (
    DpoBatch,
    TabularPolicy,
    bt_probability,
    dpo_gradient,
    dpo_loss,
    implicit_reward,
    sanity_check_export,
)
from .pipeline import PipelineConfig, air_preset, run_pipeline, run_stage

__version__ = "0.1.0"
