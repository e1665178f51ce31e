"""Closed-form model of how label-correlated bias shows up in predictions.

The model describes the joint distribution of target T, bias B and model
prediction Y over N_T uniformly distributed classes, parameterized by the
generation correlation rho, a bias-reliance coefficient phi in [0, 1]
("biasness") and a residual error coefficient eps.  From the joint one gets
the (B, Y) marginal, its normalized mutual information, and an inversion
that estimates phi from an empirical (B, Y) table.

Entropies use base-2 logarithms internally; normalized quantities are
base-independent.  x * log(x) is evaluated as 0 at x = 0, and at rho = 1
the convention (1 - rho)^(1 - rho) -> 1 applies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

# Empirical (B, Y) marginals farther than this from uniform (in total
# variation) violate the uniform-marginal assumption and flag a warning.
UNIFORM_MARGINAL_TOLERANCE = 0.05


@dataclass(frozen=True)
class TheoryParams:
    rho: float
    phi: float
    eps: float = 0.0
    n_t: int = 10

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ParameterError(f"rho must be in (0, 1], got {self.rho}")
        if not 0.0 <= self.phi <= 1.0:
            raise ParameterError(f"phi must be in [0, 1], got {self.phi}")
        if not 0.0 <= self.eps <= 1.0:
            raise ParameterError(f"eps must be in [0, 1], got {self.eps}")
        if self.n_t < 3:
            raise ParameterError(f"n_t must be >= 3, got {self.n_t}")


@dataclass(frozen=True)
class JointBY:
    """N_T x N_T probability table over (bias, prediction)."""

    table: np.ndarray
    n_t: int

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        object.__setattr__(self, "table", table)
        if table.shape != (self.n_t, self.n_t):
            raise ParameterError(
                f"table shape {table.shape} != ({self.n_t}, {self.n_t})"
            )
        if np.any(table < -1e-15):
            raise ParameterError("table entries must be nonnegative")
        if abs(table.sum() - 1.0) > 1e-12:
            raise ParameterError(f"table must sum to 1, got {table.sum()!r}")
        table.setflags(write=False)


@dataclass
class BiasnessReport:
    rho: float
    n_t: int
    phi_global: float
    phi_cells: np.ndarray
    nmi_by: float
    nmi_perfect: float
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "n_t": self.n_t,
            "phi_global": self.phi_global,
            "nmi_by": self.nmi_by,
            "nmi_perfect": self.nmi_perfect,
            "phi_cells": self.phi_cells.tolist(),
            "warnings": list(self.warnings),
        }


def _xlogx(x: float) -> float:
    return 0.0 if x <= 0.0 else x * math.log(x)


def nmi_perfect(rho: float, n_t: int) -> float:
    """Normalized mutual information between bias and prediction for a
    perfect learner: log_{N_T}( N_T rho [(1-rho)/(rho (N_T-1))]^(1-rho) ).
    """
    if not 0.0 < rho <= 1.0:
        raise ParameterError(f"rho must be in (0, 1], got {rho}")
    if n_t < 2:
        raise ParameterError(f"n_t must be >= 2, got {n_t}")
    value = 1.0 + (
        _xlogx(rho) + _xlogx(1.0 - rho) - (1.0 - rho) * math.log(n_t - 1)
    ) / math.log(n_t)
    return min(1.0, max(0.0, value))


def joint_tby(params: TheoryParams) -> np.ndarray:
    """Joint probability table over (target, bias, prediction).

    Five alignment patterns carry mass (everything shares the 1/N_T prefactor):

      t = b = y            rho (1 - eps)              correct despite/with bias
      t = y != b           (1-phi)(1-rho)/(N_T-1)     bias ignored, target hit
      b = y != t           phi (1-rho)/(N_T-1)        prediction follows bias
      t = b != y           eps rho^2 / (N_T-2+rho)    residual error, aligned sample
      all distinct         eps rho (1-rho) / ((N_T-1)(N_T-2+rho))
    """
    n, rho, phi, eps = params.n_t, params.rho, params.phi, params.eps
    t, b, y = np.indices((n, n, n))
    tb, ty, by = t == b, t == y, b == y
    table = np.zeros((n, n, n))
    table[tb & ty & by] = rho * (1.0 - eps)
    table[ty & ~tb] = (1.0 - phi) * (1.0 - rho) / (n - 1)
    table[by & ~tb] = phi * (1.0 - rho) / (n - 1)
    table[tb & ~ty] = eps * rho**2 / (n - 2 + rho)
    table[~tb & ~ty & ~by] = eps * rho * (1.0 - rho) / ((n - 1) * (n - 2 + rho))
    return table / n


def marginal_by(params: TheoryParams) -> JointBY:
    """(B, Y) marginal of joint_tby, in closed form.

    Diagonal cells:      [rho (1 - eps) + phi (1 - rho)] / N_T
    Off-diagonal cells:  [(1 - phi)(1 - rho) + rho eps] / ((N_T - 1) N_T)

    The off-diagonal eps term is what exact marginalization over T yields;
    it keeps the table normalized for every eps and vanishes at eps = 0.
    """
    n, rho, phi, eps = params.n_t, params.rho, params.phi, params.eps
    diag = (rho * (1.0 - eps) + phi * (1.0 - rho)) / n
    off = ((1.0 - phi) * (1.0 - rho) + rho * eps) / ((n - 1) * n)
    table = np.full((n, n), off)
    np.fill_diagonal(table, diag)
    return JointBY(table=table, n_t=n)


def nmi_by(params: TheoryParams) -> float:
    """Normalized mutual information of the (B, Y) marginal.

    With d = rho (1 - eps) + phi (1 - rho) the total diagonal mass and
    1 - d the off-diagonal mass, both marginals are uniform and

      NMI = 1 + [d log d + (1 - d) log((1 - d)/(N_T - 1))] / log N_T.
    """
    n = params.n_t
    d = params.rho * (1.0 - params.eps) + params.phi * (1.0 - params.rho)
    off_total = 1.0 - d
    value = 1.0 + (
        _xlogx(d) + _xlogx(off_total) - off_total * math.log(n - 1)
    ) / math.log(n)
    return min(1.0, max(0.0, value))


def empirical_joint(bias_labels, predictions, n_t: int) -> JointBY:
    """Normalized count table over (bias, prediction) pairs."""
    bias_labels = np.asarray(bias_labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if bias_labels.size == 0:
        raise ParameterError("empty label sequences")
    if bias_labels.shape != predictions.shape:
        raise ParameterError("label sequences must have equal length")
    if bias_labels.min() < 0 or bias_labels.max() >= n_t:
        raise ParameterError("bias labels out of range")
    if predictions.min() < 0 or predictions.max() >= n_t:
        raise ParameterError("predictions out of range")
    counts = np.zeros((n_t, n_t))
    np.add.at(counts, (bias_labels, predictions), 1.0)
    return JointBY(table=counts / bias_labels.size, n_t=n_t)


def estimate_phi(joint: JointBY, rho: float, eps: float = 0.0) -> BiasnessReport:
    """Invert the closed-form marginal cell by cell to recover phi.

    Measured probabilities are first clipped to the range the model can
    produce at eps = 0 — diagonal cells to [rho/N_T, 1/N_T], off-diagonal
    cells to [0, (1-rho)/(N_T (N_T-1))] — which confines every phi cell to
    [0, 1].  The global phi is the mean over all cells.
    """
    if not 0.0 < rho < 1.0:
        raise ParameterError(f"rho must be in (0, 1) for inversion, got {rho}")
    n = joint.n_t
    table = joint.table
    diag_mask = np.eye(n, dtype=bool)

    diag = np.clip(np.diag(table), rho / n, 1.0 / n)
    phi_diag = (diag * n - rho * (1.0 - eps)) / (1.0 - rho)

    off = np.clip(table, 0.0, (1.0 - rho) / (n * (n - 1)))
    phi_off = 1.0 - off * n * (n - 1) / (1.0 - rho) + rho * eps / (1.0 - rho)

    phi_cells = np.where(diag_mask, 0.0, phi_off)
    phi_cells[diag_mask] = phi_diag
    phi_cells = np.clip(phi_cells, 0.0, 1.0)
    phi_global = float(phi_cells.mean())

    warnings: list[str] = []
    uniform = 1.0 / n
    for name, marginal in (("bias", table.sum(axis=1)), ("prediction", table.sum(axis=0))):
        tv = 0.5 * float(np.abs(marginal - uniform).sum())
        if tv > UNIFORM_MARGINAL_TOLERANCE:
            warnings.append(
                f"{name} marginal deviates from uniform by total variation "
                f"{tv:.3f} > {UNIFORM_MARGINAL_TOLERANCE}; "
                "the uniform-marginal assumption is violated"
            )

    return BiasnessReport(
        rho=rho,
        n_t=n,
        phi_global=phi_global,
        phi_cells=phi_cells,
        nmi_by=nmi_by(TheoryParams(rho=rho, phi=phi_global, eps=eps, n_t=n)),
        nmi_perfect=nmi_perfect(rho, n),
        warnings=warnings,
    )
