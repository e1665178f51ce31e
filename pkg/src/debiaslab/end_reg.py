"""Disentangling/entangling embedding regularizer over a minibatch.

For sample i in a batch with unit-norm embeddings z, bias labels b and
target labels t:

  B(i) = same-bias samples, i excluded
  J(i) = same-target samples with a different bias, i excluded

  disentangle:  R_perp_i = mean over a in B(i) of z_i . z_a
  entangle:     R_par_i  = - mean over j in J(i) of z_i . z_j

Empty index sets contribute 0.  The total penalty is the batch mean of
alpha * R_perp_i + beta * R_par_i; its exact z-gradient accounts for each
sample's appearance in other samples' index sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class EndWeights:
    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("alpha and beta must be nonnegative")


def _masks(target_labels: np.ndarray | None, bias_labels: np.ndarray):
    bias_labels = np.asarray(bias_labels)
    m = bias_labels.shape[0]
    eye = np.eye(m, dtype=bool)
    same_bias = (bias_labels[:, None] == bias_labels[None, :]) & ~eye
    if target_labels is None:
        return same_bias, None
    target_labels = np.asarray(target_labels)
    same_target_other_bias = (target_labels[:, None] == target_labels[None, :]) & (
        bias_labels[:, None] != bias_labels[None, :]
    )
    return same_bias, same_target_other_bias


def _row_mean_weights(mask: np.ndarray) -> np.ndarray:
    """mask scaled so each nonempty row averages its entries; empty rows 0."""
    counts = mask.sum(axis=1)
    safe = np.where(counts == 0, 1, counts)
    return mask / safe[:, None]


def disentangle_term(z: np.ndarray, bias_labels: np.ndarray) -> np.ndarray:
    """Per-sample mean dot product against same-bias batch members."""
    z = np.asarray(z, dtype=np.float64)
    same_bias, _ = _masks(None, bias_labels)
    return (_row_mean_weights(same_bias) * (z @ z.T)).sum(axis=1)


def entangle_term(
    z: np.ndarray, target_labels: np.ndarray, bias_labels: np.ndarray
) -> np.ndarray:
    """Per-sample negative mean dot product against same-target, different-bias members."""
    z = np.asarray(z, dtype=np.float64)
    _, cross = _masks(target_labels, bias_labels)
    return -(_row_mean_weights(cross) * (z @ z.T)).sum(axis=1)


def _weight_matrix(
    target_labels: np.ndarray, bias_labels: np.ndarray, w: EndWeights
) -> np.ndarray:
    same_bias, cross = _masks(target_labels, bias_labels)
    return w.alpha * _row_mean_weights(same_bias) - w.beta * _row_mean_weights(cross)


def end_penalty(
    z: np.ndarray,
    target_labels: np.ndarray,
    bias_labels: np.ndarray,
    w: EndWeights,
) -> float:
    """Batch mean of the weighted per-sample terms."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ParameterError("z must be a nonempty (batch, N) array")
    weights = _weight_matrix(target_labels, bias_labels, w)
    return float((weights * (z @ z.T)).sum() / z.shape[0])


def end_gradient(
    z: np.ndarray,
    target_labels: np.ndarray,
    bias_labels: np.ndarray,
    w: EndWeights,
) -> np.ndarray:
    """Exact gradient of end_penalty with respect to z.

    With W the per-sample weight matrix, the penalty is sum_ij W_ij z_i.z_j / M,
    so dR/dz = (W + W^T) z / M.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ParameterError("z must be a nonempty (batch, N) array")
    weights = _weight_matrix(target_labels, bias_labels, w)
    return (weights + weights.T) @ z / z.shape[0]
