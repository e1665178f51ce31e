"""Three-phase debiasing pipeline and its evaluation utilities.

Phase 1 trains a vanilla (bias-capturing) classifier with per-epoch
snapshots; phase 2 fits the latent-space bias predictor and pseudo-labels
the training set; phase 3 retrains from a fresh initialization with the
embedding regularizer and searches its two weights on the unbiased
validation set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .bias_predictor import (
    BiasPredictor,
    fit_pca,
    predict_bias,
    pseudo_label_dataset,
    select_k,
)
from .biasness import empirical_joint, estimate_phi
from .data import Dataset, as_generator
from .end_reg import EndWeights, end_gradient
from .errors import ParameterError, RunError
from .model import (
    ModelParams,
    backward,
    cross_entropy,
    embed,
    forward,
    init_model,
    init_optimizer,
    optimizer_step,
)

SEARCH_LOG_FLOOR = 1e-2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 256
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    snapshot_epochs: tuple[int, ...] = ()
    hidden: tuple[int, ...] = (64, 64)
    embedding_dim: int = 32
    end_weights: EndWeights | None = None
    search_budget: int = 24
    rho: float | None = None  # metadata: training-data correlation

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        bad = [t for t in self.snapshot_epochs if not 1 <= t <= self.epochs]
        if bad:
            raise ParameterError(f"snapshot epochs {bad} outside [1, {self.epochs}]")


@dataclass
class RunReport:
    """Per-epoch trajectories plus end-of-run metrics."""

    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    val_bias_pseudo_acc: list[float] = field(default_factory=list)
    test_acc: float | None = None
    chosen_weights: EndWeights | None = None
    phi_by_epoch: list[tuple[int, float]] = field(default_factory=list)

    def epoch_rows(self):
        for i in range(len(self.train_loss)):
            yield {
                "epoch": i + 1,
                "train_loss": self.train_loss[i],
                "train_acc": self.train_acc[i],
                "val_acc": self.val_acc[i],
                "val_bias_pseudo_acc": self.val_bias_pseudo_acc[i],
            }


def evaluate(params: ModelParams, dataset: Dataset):
    """(overall accuracy, per-class accuracy) by argmax of logits."""
    if len(dataset) == 0:
        raise ParameterError("empty dataset")
    preds = forward(params, dataset.features).logits.argmax(axis=1)
    correct = preds == dataset.targets
    per_class = np.zeros(dataset.n_targets)
    for c in range(dataset.n_targets):
        members = dataset.targets == c
        per_class[c] = correct[members].mean() if members.any() else np.nan
    return float(correct.mean()), per_class


def predict_classes(params: ModelParams, features: np.ndarray) -> np.ndarray:
    return forward(params, features).logits.argmax(axis=1)


def bias_pseudo_accuracy(predictions, true_bias_labels, n_classes: int) -> float:
    """Best agreement between predictions and bias labels over all label
    bijections, via optimal assignment on the confusion matrix.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    true_bias_labels = np.asarray(true_bias_labels, dtype=np.int64)
    if predictions.shape != true_bias_labels.shape or predictions.size == 0:
        raise ParameterError("label sequences must be nonempty and equal length")
    if predictions.max() >= n_classes or true_bias_labels.max() >= n_classes:
        raise ParameterError(f"labels must be < n_classes={n_classes}")
    if predictions.min() < 0 or true_bias_labels.min() < 0:
        raise ParameterError("labels must be nonnegative")
    confusion = np.zeros((n_classes, n_classes))
    np.add.at(confusion, (predictions, true_bias_labels), 1.0)
    rows, cols = linear_sum_assignment(-confusion)
    return float(confusion[rows, cols].sum() / predictions.size)


def _train(
    config: TrainConfig,
    train: Dataset,
    val: Dataset,
    weights: EndWeights | None,
) -> tuple[ModelParams, dict[int, ModelParams], RunReport]:
    rng = as_generator(config.seed)
    params = init_model(
        train.dim, config.hidden, config.embedding_dim, train.n_targets, rng
    )
    state = init_optimizer(config.optimizer, config.learning_rate, config.weight_decay)
    if weights is not None and train.biases is None:
        raise ParameterError("regularized training needs bias labels on every sample")

    active = weights is not None and (weights.alpha > 0 or weights.beta > 0)
    snapshots: dict[int, ModelParams] = {}
    report = RunReport()
    n = len(train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch_targets = train.targets[idx]
            cache = forward(params, train.features[idx])
            egrad = None
            if active:
                egrad = end_gradient(
                    cache.z, batch_targets, train.biases[idx], weights
                )
            grads = backward(params, cache, batch_targets, egrad)
            optimizer_step(params, grads, state)

        loss, acc = _epoch_metrics(params, train)
        if math.isnan(loss):
            raise RunError(f"training diverged (NaN loss) at epoch {epoch}", epoch)
        report.train_loss.append(loss)
        report.train_acc.append(acc)
        val_acc, _ = evaluate(params, val)
        report.val_acc.append(val_acc)
        val_preds = predict_classes(params, val.features)
        report.val_bias_pseudo_acc.append(
            bias_pseudo_accuracy(val_preds, val.biases, val.n_targets)
            if val.biases is not None
            else float("nan")
        )
        if epoch in config.snapshot_epochs:
            snapshots[epoch] = params.copy()
    return params, snapshots, report


def _epoch_metrics(params: ModelParams, dataset: Dataset):
    cache = forward(params, dataset.features)
    loss = cross_entropy(cache.probs, dataset.targets)
    acc = float((cache.logits.argmax(axis=1) == dataset.targets).mean())
    return loss, acc


def train_vanilla(config: TrainConfig, train: Dataset, val: Dataset):
    """Phase 1: cross-entropy only, snapshots at the requested epochs."""
    return _train(config, train, val, weights=None)


def train_debiased(
    config: TrainConfig, pseudo_labeled_train: Dataset, val: Dataset, w: EndWeights
):
    """Phase 3: cross-entropy plus the embedding penalty, fresh initialization."""
    if pseudo_labeled_train.biases is None:
        raise ParameterError("every training sample needs a pseudo-label")
    params, _, report = _train(config, pseudo_labeled_train, val, weights=w)
    report.chosen_weights = w
    return params, report


def fit_bias_predictor(
    encoder_snapshot: ModelParams,
    train: Dataset,
    val: Dataset,
    seed: int = 0,
    k_range: tuple[int, int] = (2, 15),
) -> tuple[BiasPredictor, Dataset]:
    """Phase 2: PCA and clusters fitted on validation embeddings, training
    set pseudo-labeled by nearest centroid.
    """
    z_val = embed(encoder_snapshot, val.features)
    pca = fit_pca(z_val)
    _, clusters = select_k(pca.transform(z_val), k_range[0], k_range[1], seed)
    predictor = BiasPredictor(pca=pca, clusters=clusters)
    pseudo_train = pseudo_label_dataset(predictor, encoder_snapshot, train)
    return predictor, pseudo_train


def search_hyperparams(
    config: TrainConfig,
    pseudo_labeled_train: Dataset,
    val: Dataset,
    budget: int,
    interval: tuple[float, float] = (0.0, 50.0),
    rng: np.random.Generator | None = None,
):
    """Random search over the two penalty weights.

    The candidate list always starts with (0, 0); the remaining budget is
    drawn log-uniformly from [1e-2, interval max].  The winner maximizes
    final validation accuracy, ties broken by smaller alpha + beta.
    """
    if budget < 1:
        raise ParameterError("budget must be >= 1")
    rng = as_generator(rng)
    high = interval[1]
    candidates = [EndWeights(0.0, 0.0)]
    for _ in range(budget - 1):
        alpha = math.exp(rng.uniform(math.log(SEARCH_LOG_FLOOR), math.log(high)))
        beta = math.exp(rng.uniform(math.log(SEARCH_LOG_FLOOR), math.log(high)))
        candidates.append(EndWeights(alpha, beta))

    trials = []
    best = None  # (val_acc, -(alpha+beta), weights)
    for w in candidates:
        _, report = train_debiased(config, pseudo_labeled_train, val, w)
        val_acc = report.val_acc[-1] if report.val_acc else 0.0
        trials.append({"alpha": w.alpha, "beta": w.beta, "val_acc": val_acc})
        key = (val_acc, -(w.alpha + w.beta))
        if best is None or key > best[0]:
            best = (key, w)
    return best[1], trials


def biasness_curve(
    snapshots: dict[int, ModelParams], eval_set: Dataset, rho: float
) -> list[tuple[int, float]]:
    """Estimated phi per snapshot epoch, from the empirical (bias,
    prediction) joint on an evaluation set with ground-truth bias labels.
    """
    if eval_set.biases is None:
        raise ParameterError("eval set must carry ground-truth bias labels")
    curve = []
    for epoch in sorted(snapshots):
        preds = predict_classes(snapshots[epoch], eval_set.features)
        joint = empirical_joint(eval_set.biases, preds, eval_set.n_targets)
        report = estimate_phi(joint, rho, eps=0.0)
        curve.append((epoch, report.phi_global))
    return curve


@dataclass
class PipelineResult:
    vanilla_params: ModelParams
    vanilla_report: RunReport
    snapshots: dict[int, ModelParams]
    predictor: BiasPredictor | None = None
    pseudo_train: Dataset | None = None
    pseudo_permutation_acc: float | None = None
    chosen_weights: EndWeights | None = None
    trials: list[dict] = field(default_factory=list)
    debiased_params: ModelParams | None = None
    debiased_report: RunReport | None = None
    phi_curve: list[tuple[int, float]] = field(default_factory=list)


def default_snapshot_epochs(epochs: int) -> tuple[int, ...]:
    """Early/late snapshot pair: epoch 10 (or last, if shorter) and the end."""
    if epochs < 1:
        return ()
    early = min(10, epochs)
    return (early,) if early == epochs else (early, epochs)


def run_pipeline(
    config: TrainConfig,
    train: Dataset,
    val: Dataset,
    test: Dataset | None = None,
    phase: str = "all",
    snapshot_for_labels: int | None = None,
    search_rng: np.random.Generator | None = None,
) -> PipelineResult:
    """Run phases 1..N of the full pipeline.

    ``snapshot_for_labels`` selects which phase-1 snapshot feeds phase 2
    (default: the earliest).  The hyperparameter search uses
    ``config.end_weights`` directly when set, skipping the search.
    """
    if phase not in ("1", "2", "3", "all"):
        raise ParameterError(f"phase must be one of 1/2/3/all, got {phase!r}")
    cfg = config
    if not cfg.snapshot_epochs and cfg.epochs > 0:
        cfg = replace(cfg, snapshot_epochs=default_snapshot_epochs(cfg.epochs))

    vanilla_params, snapshots, vanilla_report = train_vanilla(cfg, train, val)
    if test is not None:
        vanilla_report.test_acc, _ = evaluate(vanilla_params, test)
    result = PipelineResult(
        vanilla_params=vanilla_params,
        vanilla_report=vanilla_report,
        snapshots=snapshots,
    )
    if train.biases is not None and snapshots:
        result.phi_curve = biasness_curve(snapshots, train, train.rho)
    if phase == "1":
        return result

    label_epoch = snapshot_for_labels or min(snapshots)
    predictor, pseudo_train = fit_bias_predictor(
        snapshots[label_epoch], train, val, seed=cfg.seed
    )
    result.predictor = predictor
    result.pseudo_train = pseudo_train
    if train.biases is not None:
        n = max(train.n_biases, predictor.k)
        result.pseudo_permutation_acc = bias_pseudo_accuracy(
            pseudo_train.biases, train.biases, n
        )
    if phase == "2":
        return result

    if cfg.end_weights is not None:
        weights = cfg.end_weights
    else:
        weights, result.trials = search_hyperparams(
            cfg, pseudo_train, val, cfg.search_budget, rng=search_rng
        )
    debiased_params, debiased_report = train_debiased(cfg, pseudo_train, val, weights)
    if test is not None:
        debiased_report.test_acc, _ = evaluate(debiased_params, test)
    result.chosen_weights = weights
    result.debiased_params = debiased_params
    result.debiased_report = debiased_report
    return result
