"""MLP encoder/classifier with explicit forward/backward passes.

The network is classifier(normalize(encoder(x))): a stack of dense layers
produces a raw embedding e, which is L2-normalized row-wise to z before the
final linear classifier.  backward() optionally accepts an extra gradient on
z (used to inject a regularizer) and routes it through the normalization
Jacobian (I - z z^T) / ||e||.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


@dataclass
class DenseLayer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str  # "relu" | "linear"

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation)


@dataclass
class ModelParams:
    encoder: list[DenseLayer]
    classifier: DenseLayer

    @property
    def input_dim(self) -> int:
        return self.encoder[0].weight.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.encoder[-1].weight.shape[1]

    @property
    def n_targets(self) -> int:
        return self.classifier.weight.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(
            [layer.copy() for layer in self.encoder], self.classifier.copy()
        )

    def all_layers(self) -> list[DenseLayer]:
        return [*self.encoder, self.classifier]


@dataclass
class Gradients:
    """Parameter gradients, shape-parallel to ModelParams."""

    encoder: list[tuple[np.ndarray, np.ndarray]]
    classifier: tuple[np.ndarray, np.ndarray]

    def pairs(self):
        return [*self.encoder, self.classifier]


@dataclass
class ForwardCache:
    """Per-batch activations kept for the backward pass."""

    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    raw_embeddings: np.ndarray  # e = f(x)
    norms: np.ndarray
    z: np.ndarray  # normalized embeddings, unit rows
    zero_rows: np.ndarray  # rows where ||e|| == 0 (z defined as 0 there)
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = field(default=None, repr=False)
    v: list[np.ndarray] | None = field(default=None, repr=False)


def init_model(
    input_dim: int,
    hidden: tuple[int, ...],
    embedding_dim: int,
    n_targets: int,
    rng: np.random.Generator,
) -> ModelParams:
    """He-initialized ReLU hidden layers, Xavier for the linear heads."""
    sizes = [input_dim, *hidden]
    encoder = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        encoder.append(DenseLayer(w, np.zeros(fan_out), "relu"))
    w = rng.standard_normal((sizes[-1], embedding_dim)) * np.sqrt(1.0 / sizes[-1])
    encoder.append(DenseLayer(w, np.zeros(embedding_dim), "linear"))
    wc = rng.standard_normal((embedding_dim, n_targets)) * np.sqrt(1.0 / embedding_dim)
    classifier = DenseLayer(wc, np.zeros(n_targets), "linear")
    return ModelParams(encoder, classifier)


def _apply_activation(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "linear":
        return pre
    raise ParameterError(f"unknown activation {activation!r}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def forward(params: ModelParams, batch: np.ndarray) -> ForwardCache:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ParameterError("batch must be 2-D (n, features)")
    if batch.shape[1] != params.input_dim:
        raise ParameterError(
            f"batch has {batch.shape[1]} columns, encoder expects {params.input_dim}"
        )
    layer_inputs, pre_activations = [], []
    h = batch
    for layer in params.encoder:
        layer_inputs.append(h)
        pre = h @ layer.weight + layer.bias
        pre_activations.append(pre)
        h = _apply_activation(pre, layer.activation)
    e = h
    norms = np.linalg.norm(e, axis=1)
    zero_rows = norms == 0.0
    safe = np.where(zero_rows, 1.0, norms)
    z = e / safe[:, None]
    z[zero_rows] = 0.0
    logits = z @ params.classifier.weight + params.classifier.bias
    return ForwardCache(
        layer_inputs=layer_inputs,
        pre_activations=pre_activations,
        raw_embeddings=e,
        norms=norms,
        z=z,
        zero_rows=zero_rows,
        logits=logits,
        probs=_softmax(logits),
    )


def cross_entropy(probabilities: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-probability of the target class.

    Probabilities are floored at 1e-12 inside the log for numerical safety.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if probabilities.ndim != 2 or probabilities.shape[0] == 0:
        raise ParameterError("probabilities must be a nonempty (n, K) array")
    if targets.shape != (probabilities.shape[0],):
        raise ParameterError("targets length must match probability rows")
    row_sums = probabilities.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        raise ParameterError("probability rows must sum to 1 within 1e-9")
    p = probabilities[np.arange(len(targets)), targets]
    return float(-np.log(np.maximum(p, PROB_FLOOR)).mean())


def backward(
    params: ModelParams,
    cache: ForwardCache,
    targets: np.ndarray,
    end_gradient: np.ndarray | None = None,
) -> Gradients:
    """Gradients of mean cross-entropy plus an optional injected z-gradient.

    ``end_gradient`` is dR/dz for a term R(z) added to the objective; it is
    pushed through the normalization Jacobian before the encoder backprop.
    """
    targets = np.asarray(targets, dtype=np.int64)
    m = cache.z.shape[0]
    dlogits = cache.probs.copy()
    dlogits[np.arange(m), targets] -= 1.0
    dlogits /= m
    dwc = cache.z.T @ dlogits
    dbc = dlogits.sum(axis=0)
    dz = dlogits @ params.classifier.weight.T
    if end_gradient is not None:
        end_gradient = np.asarray(end_gradient, dtype=np.float64)
        if end_gradient.shape != cache.z.shape:
            raise ParameterError(
                f"end_gradient shape {end_gradient.shape} != z shape {cache.z.shape}"
            )
        dz = dz + end_gradient
    # d/de of z = e/||e||:  (dz - (z . dz) z) / ||e||;  zero rows pass zero.
    safe = np.where(cache.zero_rows, 1.0, cache.norms)
    radial = (cache.z * dz).sum(axis=1, keepdims=True)
    de = (dz - radial * cache.z) / safe[:, None]
    de[cache.zero_rows] = 0.0

    encoder_grads: list[tuple[np.ndarray, np.ndarray]] = []
    g = de
    for layer, layer_input, pre in zip(
        reversed(params.encoder),
        reversed(cache.layer_inputs),
        reversed(cache.pre_activations),
    ):
        if layer.activation == "relu":
            g = g * (pre > 0)
        encoder_grads.append((layer_input.T @ g, g.sum(axis=0)))
        g = g @ layer.weight.T
    encoder_grads.reverse()
    return Gradients(encoder=encoder_grads, classifier=(dwc, dbc))


def init_optimizer(
    kind: str, learning_rate: float, weight_decay: float = 0.0
) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ParameterError(f"unknown optimizer kind {kind!r}")
    return OptimizerState(kind=kind, learning_rate=learning_rate, weight_decay=weight_decay)


def optimizer_step(
    params: ModelParams, grads: Gradients, state: OptimizerState
) -> tuple[ModelParams, OptimizerState]:
    """One update step, in place.

    SGD:  p <- p - lr * (g + wd * p).
    Adam: bias-corrected moments with decoupled weight decay.
    """
    layers = params.all_layers()
    grad_pairs = grads.pairs()
    flat_params: list[np.ndarray] = []
    flat_grads: list[np.ndarray] = []
    for layer, (dw, db) in zip(layers, grad_pairs):
        if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
            raise ParameterError("gradient shapes do not match parameters")
        flat_params.extend([layer.weight, layer.bias])
        flat_grads.extend([dw, db])

    lr, wd = state.learning_rate, state.weight_decay
    if state.kind == "sgd":
        for p, g in zip(flat_params, flat_grads):
            p -= lr * (g + wd * p)
        state.step += 1
        return params, state

    if state.m is None:
        state.m = [np.zeros_like(p) for p in flat_params]
        state.v = [np.zeros_like(p) for p in flat_params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(flat_params, flat_grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if wd:
            p -= lr * wd * p
    return params, state


def embed(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Normalized embeddings z for a feature matrix."""
    return forward(params, features).z


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    state: OptimizerState | None = None,
    epoch: int = 0,
) -> None:
    """Versioned npz container: weights, optimizer buffers, epoch counter."""
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "activations": [layer.activation for layer in params.encoder],
        "n_encoder_layers": len(params.encoder),
    }
    for i, layer in enumerate(params.encoder):
        arrays[f"enc_{i}_w"] = layer.weight
        arrays[f"enc_{i}_b"] = layer.bias
    arrays["cls_w"] = params.classifier.weight
    arrays["cls_b"] = params.classifier.bias
    if state is not None:
        meta["optimizer"] = {
            "kind": state.kind,
            "learning_rate": state.learning_rate,
            "weight_decay": state.weight_decay,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
            "step": state.step,
        }
        if state.m is not None:
            for i, (m, v) in enumerate(zip(state.m, state.v)):
                arrays[f"adam_m_{i}"] = m
                arrays[f"adam_v_{i}"] = v
    np.savez(path, meta=json.dumps(meta, sort_keys=True), **arrays)


def load_checkpoint(path: str | Path):
    """Inverse of save_checkpoint; returns (params, state or None, epoch)."""
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ParameterError(f"unsupported checkpoint version {meta['version']}")
        encoder = [
            DenseLayer(
                blob[f"enc_{i}_w"], blob[f"enc_{i}_b"], meta["activations"][i]
            )
            for i in range(meta["n_encoder_layers"])
        ]
        classifier = DenseLayer(blob["cls_w"], blob["cls_b"], "linear")
        params = ModelParams(encoder, classifier)
        state = None
        if "optimizer" in meta:
            opt = meta["optimizer"]
            state = OptimizerState(
                kind=opt["kind"],
                learning_rate=opt["learning_rate"],
                weight_decay=opt["weight_decay"],
                beta1=opt["beta1"],
                beta2=opt["beta2"],
                eps=opt["eps"],
                step=opt["step"],
            )
            n_flat = 2 * (len(encoder) + 1)
            if f"adam_m_0" in blob:
                state.m = [blob[f"adam_m_{i}"].copy() for i in range(n_flat)]
                state.v = [blob[f"adam_v_{i}"].copy() for i in range(n_flat)]
        return params, state, meta["epoch"]
