"""Desk-scale laboratory for unsupervised debiasing.

Train a bias-capturing model on correlated data, discover bias subgroups by
clustering its latent space, retrain with a disentangling/entangling
embedding regularizer, and quantify a model's bias reliance with a
closed-form information-theoretic estimate.
"""

from .biasness import (
    BiasnessReport,
    JointBY,
    TheoryParams,
    empirical_joint,
    estimate_phi,
    joint_tby,
    marginal_by,
    nmi_by,
    nmi_perfect,
)
from .bias_predictor import (
    BiasPredictor,
    ClusterModel,
    PcaModel,
    fit_pca,
    kmeans_fit,
    predict_bias,
    pseudo_label_dataset,
    select_k,
    silhouette,
)
from .data import (
    BiasSpec,
    Dataset,
    LabeledSample,
    assign_bias_label,
    colorize,
    generate_synthetic,
    load_idx,
    make_validation_split,
)
from .end_reg import EndWeights, disentangle_term, end_gradient, end_penalty, entangle_term
from .errors import (
    ConfigError,
    DebiaslabError,
    EvaluationError,
    FormatError,
    ParameterError,
    RunError,
)
from .model import (
    ForwardCache,
    ModelParams,
    OptimizerState,
    backward,
    cross_entropy,
    forward,
    init_model,
    init_optimizer,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)
from .pipeline import (
    PipelineResult,
    RunReport,
    TrainConfig,
    bias_pseudo_accuracy,
    biasness_curve,
    evaluate,
    fit_bias_predictor,
    run_pipeline,
    search_hyperparams,
    train_debiased,
    train_vanilla,
)

__version__ = "0.1.0"
