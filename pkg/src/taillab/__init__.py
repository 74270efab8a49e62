"""taillab: a feature-space laboratory for long-tailed classification.

Two-stage decoupled training on embedding datasets: stage one learns the
feature model with a gradually strengthening prior-adjusted loss; stage two
freezes it, augments tail classes with an adaptive feature generator, and
retunes the classifier under a distillation-regularized objective.  Includes
a synthetic long-tail benchmark, a feature-quality probe, group-wise
evaluation, and an ablation harness, all exposed through the ``taillab`` CLI.
"""

from .afg import (
    BetaState,
    CalibratedDistribution,
    ClassStats,
    GenerationPlan,
    build_generation_plan,
    calibrate,
    estimate_class_stats,
    generate_for_class,
    support_set,
    tukey_transform,
    update_beta,
)
from .data import (
    EmbeddingDataset,
    GroupAssignment,
    LongTailSpec,
    SyntheticBenchmark,
    assign_groups,
    class_priors,
    load_embeddings,
    make_longtail_counts,
    save_embeddings,
    synth_gaussian_mixture,
)
from .losses import (
    LossConfig,
    ScheduleSpec,
    alpha_at,
    cross_entropy,
    gra_loss,
    kd_loss,
    logit_adjusted_loss,
    stage2_loss,
)
from .model import (
    ModelParams,
    cosine_lr,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import Rng, cholesky_psd, gaussian_sample, softmax
from .pipeline import (
    MetricsReport,
    RunConfig,
    evaluate,
    make_benchmark,
    probe_features,
    run_ablation,
    run_experiment,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
