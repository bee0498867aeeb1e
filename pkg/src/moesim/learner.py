"""Desk-scale learned expert predictor.

A per-layer multi-label linear classifier over prompt-history features,
trained with sigmoid + binary cross-entropy SGD. Features for a query at
(token t, layer l) are the layer one-hot, the exponentially decayed count of
each expert's activations at layer l over tokens before t, and a bias term.
The decayed history is the model-agnostic stand-in for backbone-specific
token embeddings, and is exactly what the replay engine can provide online.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, ModelShape, PromptTrace


@dataclass(frozen=True)
class LearnerConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    decay: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError(f"decay must be in [0, 1), got {self.decay}")


@dataclass
class LinearModel:
    """Weights, one row per expert, over [layer one-hot | history | bias]."""

    shape: ModelShape
    config: LearnerConfig
    weights: np.ndarray
    trained: bool = False
    loss_history: list[float] = field(default_factory=list)

    @property
    def feature_len(self) -> int:
        return self.shape.num_layers + self.shape.num_experts + 1


def feature_vector(target_layer: int, layer_history: np.ndarray,
                   shape: ModelShape) -> np.ndarray:
    """Assemble [layer one-hot | decayed history for the target layer | 1.0]."""
    f = np.zeros(shape.num_layers + shape.num_experts + 1, dtype=np.float64)
    f[target_layer] = 1.0
    f[shape.num_layers:shape.num_layers + shape.num_experts] = layer_history
    f[-1] = 1.0
    return f


def update_history(history: np.ndarray, layer_id: int, expert_ids,
                   decay: float) -> None:
    """Decay one layer's history by one token step and add the new firings.

    After the update, history[layer][e] = sum over tokens t' <= t that fired
    e at this layer of decay^(t - t'); queried at token t+1 that is the
    decay^age weighting with age 0 for the immediately preceding token.
    """
    history[layer_id] *= decay
    for e in expert_ids:
        history[layer_id, e] += 1.0


def training_pairs(traces: list[PromptTrace], shape: ModelShape,
                   decay: float) -> tuple[np.ndarray, np.ndarray]:
    """Feature/target pairs for every (token, layer) step of every prompt.

    The history recurrence matches the replay engine's, so a model trained
    here sees the same feature distribution it will be queried with online.
    """
    feats = []
    targets = []
    for trace in traces:
        history = np.zeros((shape.num_layers, shape.num_experts), dtype=np.float64)
        for rec in trace.records:
            feats.append(feature_vector(rec.layer_id, history[rec.layer_id], shape))
            y = np.zeros(shape.num_experts, dtype=np.float64)
            y[list(rec.expert_ids)] = 1.0
            targets.append(y)
            update_history(history, rec.layer_id, rec.expert_ids, decay)
    if not feats:
        raise ConfigError("no training examples: traces are empty")
    return np.stack(feats), np.stack(targets)


def bce_loss(weights: np.ndarray, features: np.ndarray,
             target: np.ndarray) -> float:
    """Mean binary cross-entropy over experts for one example (stable form)."""
    z = weights @ features
    return float(np.mean(np.logaddexp(0.0, z) - target * z))


def bce_gradient(weights: np.ndarray, features: np.ndarray,
                 target: np.ndarray) -> np.ndarray:
    """Analytic gradient of ``bce_loss`` with respect to the weights."""
    z = weights @ features
    sig = 1.0 / (1.0 + np.exp(-z))
    return np.outer(sig - target, features) / weights.shape[0]


_EARLY_STOP_DELTA = 1e-5
_EARLY_STOP_PATIENCE = 3


def train(traces: list[PromptTrace], shape: ModelShape,
          config: LearnerConfig = LearnerConfig()) -> LinearModel:
    """Per-example SGD over seeded-shuffled steps with patience-3 early stop.

    Training stops early once the epoch-mean loss has improved by less than
    1e-5 for three consecutive epochs. Zero epochs returns the seeded random
    initialization, still marked trained for deterministic-but-uninformative
    predictions.
    """
    if not traces:
        raise ConfigError("cannot train on an empty trace list")
    x, y = training_pairs(traces, shape, config.decay)
    rng = np.random.default_rng(config.seed)
    weights = rng.normal(0.0, 0.01, size=(shape.num_experts, x.shape[1]))

    losses: list[float] = []
    best = np.inf
    stalls = 0
    for _ in range(config.epochs):
        order = rng.permutation(x.shape[0])
        total = 0.0
        for i in order:
            f = x[i]
            t = y[i]
            z = weights @ f
            total += float(np.mean(np.logaddexp(0.0, z) - t * z))
            sig = 1.0 / (1.0 + np.exp(-z))
            weights -= config.learning_rate * np.outer(
                (sig - t) / shape.num_experts, f
            )
        epoch_loss = total / x.shape[0]
        losses.append(epoch_loss)
        if best - epoch_loss < _EARLY_STOP_DELTA:
            stalls += 1
            if stalls >= _EARLY_STOP_PATIENCE:
                break
        else:
            stalls = 0
        best = min(best, epoch_loss)
    return LinearModel(shape, config, weights, trained=True, loss_history=losses)


def predict_scores(model: LinearModel, features: np.ndarray) -> np.ndarray:
    if not model.trained:
        raise ConfigError("model is untrained")
    return model.weights @ features


def top_k_experts(scores: np.ndarray, k: int) -> frozenset[int]:
    """The k highest-scoring experts, ties broken by lower expert id."""
    k = min(k, len(scores))
    # lexsort's last key is primary: by -score, then by id for ties.
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return frozenset(int(e) for e in order[:k])


def predict_topk(model: LinearModel, features: np.ndarray, k: int,
                 threshold: bool = False) -> frozenset[int]:
    """Top-k experts by logit; sigmoid is monotone so logits rank directly.

    Threshold mode instead returns every expert whose activation probability
    exceeds 0.5, i.e. whose logit is positive.
    """
    scores = predict_scores(model, features)
    if threshold:
        return frozenset(int(e) for e in np.nonzero(scores > 0.0)[0])
    return top_k_experts(scores, k)


def save_model(model: LinearModel, path) -> None:
    payload = {
        "kind": "linear-multilabel",
        "num_layers": model.shape.num_layers,
        "num_experts": model.shape.num_experts,
        "top_k": model.shape.top_k,
        "learning_rate": model.config.learning_rate,
        "epochs": model.config.epochs,
        "decay": model.config.decay,
        "seed": model.config.seed,
        "trained": model.trained,
        "loss_history": model.loss_history,
        "weights": [[float(v) for v in row] for row in model.weights],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_model(path) -> LinearModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    try:
        shape = ModelShape(payload["num_layers"], payload["num_experts"],
                           payload["top_k"])
        config = LearnerConfig(payload["learning_rate"], payload["epochs"],
                               payload["decay"], payload["seed"])
        weights = np.asarray(payload["weights"], dtype=np.float64)
        trained = bool(payload["trained"])
        losses = [float(v) for v in payload.get("loss_history", [])]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad model file {path}: {exc}") from None
    expected = (shape.num_experts, shape.num_layers + shape.num_experts + 1)
    if weights.shape != expected:
        raise ConfigError(
            f"model weights shape {weights.shape} != {expected}"
        )
    if not np.isfinite(weights).all():
        raise ConfigError("model weights must be finite")
    return LinearModel(shape, config, weights, trained, losses)
