"""Geometry-aware token eviction for streaming 3D-reconstruction KV caches."""

from .core import (
    DEFAULT_FRAME_TOKENS,
    DEFAULT_REGISTERS,
    DegenerateInputError,
    FrameMeta,
    GhostError,
    LayerCache,
    Pose,
    ScoreWeights,
    TokenRef,
    ValidationError,
    validate_frame,
)
from .scoring import (
    FrameRawScores,
    PatchRawScores,
    camera_change,
    combined_score,
    depth_gradient_variance,
    feature_saliency,
    final_renormalize,
    frame_raw_scores,
    frame_scores,
    patch_raw_scores,
    pool_confidence,
    special_boost,
    temporal_recency,
    token_scores,
)
from .budget import (
    BudgetPlan,
    InfeasibleBudgetError,
    LayerProfile,
    ZeroNormSampleError,
    allocate_budgets,
    mean_cosine_profile,
    sweep_temperature,
)
from .engine import ABLATIONS, MODES, EvictionEngine, EvictionStepResult, apply_ablation, select_topk
from .baselines import (
    POLICY_KINDS,
    PolicyConfig,
    PolicyError,
    key_similarity_evict,
    make_engine,
    recency_window_evict,
    sink_recent_evict,
    uniform_budget_plan,
)
from .simgen import (
    CoverageReport,
    TrajectoryConfig,
    correlation_study,
    generate_stream,
    run_experiment,
    seed_battery,
    spearman,
)

__version__ = "0.1.0"
