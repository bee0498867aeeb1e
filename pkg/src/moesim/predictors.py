"""Expert-set predictors behind one uniform interface.

A predictor receives a PredictionContext describing the prompt so far and
returns the set of experts it expects to fire at the target layer. All
predictor state is read-only during replay; anything mutable (the partial
activation matrix, decayed history, incremental matching state) is owned by
the replay worker.

Kinds:
    oracle           ground truth, the upper-bound harness
    lru_only         empty set, the no-prefetch baseline
    next_layer_all   every expert of the target layer (eager full-layer load)
    global_frequency top experts by training-workload counts
    eam_cosine       nearest stored sketch by cosine, top experts of its block
    external         lookup into an externally produced prediction file
    learned_linear   trained linear model over history features
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ActivationMatrix, ConfigError, ModelShape, PromptTrace
from .learner import LinearModel, feature_vector, top_k_experts
from .sketches import SketchCollection

PREDICTOR_KINDS = (
    "oracle",
    "lru_only",
    "next_layer_all",
    "global_frequency",
    "eam_cosine",
    "external",
    "learned_linear",
)


@dataclass
class PredictionContext:
    """Everything a predictor may look at for one (token, layer) query.

    ``partial_ream`` and ``history`` reflect exactly the revealed records of
    the current prompt before this query, warm-up included. Predictors must
    treat both as read-only.
    """

    prompt_id: int
    token_index: int
    target_layer: int
    partial_ream: ActivationMatrix
    history: np.ndarray
    budget: int


class OraclePredictor:
    """Replays the ground truth; prediction hit rate is 1.0 by construction."""

    kind = "oracle"

    def __init__(self, traces: list[PromptTrace], shape: ModelShape):
        self.shape = shape
        # prompt_id -> [token][layer] -> sorted expert id list.
        self._truth: dict[int, list[list[list[int]]]] = {}
        for trace in traces:
            rows = [
                [[] for _ in range(shape.num_layers)]
                for _ in range(trace.num_tokens)
            ]
            for rec in trace.records:
                rows[rec.token_index][rec.layer_id] = list(rec.expert_ids)
            self._truth[trace.prompt_id] = rows

    def predict(self, ctx: PredictionContext) -> frozenset[int]:
        rows = self._truth.get(ctx.prompt_id)
        if rows is None:
            raise ConfigError(f"oracle has no trace for prompt {ctx.prompt_id}")
        experts = rows[ctx.token_index][ctx.target_layer]
        if ctx.budget < len(experts):
            experts = experts[:ctx.budget]
        return frozenset(experts)


class LruOnlyPredictor:
    """Predicts nothing; the cache serves only previously used experts."""

    kind = "lru_only"

    def __init__(self, shape: ModelShape):
        self.shape = shape

    def predict(self, ctx: PredictionContext) -> frozenset[int]:
        return frozenset()


class NextLayerAllPredictor:
    """Eagerly claims every expert of the target layer, ignoring the budget."""

    kind = "next_layer_all"
    unbounded_prefetch = True

    def __init__(self, shape: ModelShape):
        self.shape = shape
        self._all = frozenset(range(shape.num_experts))

    def predict(self, ctx: PredictionContext) -> frozenset[int]:
        return self._all


class GlobalFrequencyPredictor:
    """Top experts per layer by activation count over a training workload.

    Counting is commutative, so the ranking is invariant to prompt order.
    Ties break toward the lower expert id.
    """

    kind = "global_frequency"

    def __init__(self, train_traces: list[PromptTrace], shape: ModelShape):
        if not train_traces:
            raise ConfigError("global_frequency needs a training workload")
        self.shape = shape
        counts = np.zeros((shape.num_layers, shape.num_experts), dtype=np.int64)
        for trace in train_traces:
            for rec in trace.records:
                for e in rec.expert_ids:
                    counts[rec.layer_id, e] += 1
        self.counts = counts
        # order[l] lists expert ids from most to least frequent.
        self._order = np.empty_like(counts)
        for layer in range(shape.num_layers):
            self._order[layer] = sorted(
                range(shape.num_experts), key=lambda e: (-counts[layer, e], e)
            )

    def predict(self, ctx: PredictionContext) -> frozenset[int]:
        m = min(ctx.budget, self.shape.num_experts)
        return frozenset(int(e) for e in self._order[ctx.target_layer, :m])


def _top_weights(block: np.ndarray, m: int) -> frozenset[int]:
    """Top-m strictly positive weights, ties by lower expert id."""
    nz = np.nonzero(block > 0)[0]
    if len(nz) == 0:
        return frozenset()
    order = np.lexsort((nz, -block[nz]))
    return frozenset(int(nz[i]) for i in order[:m])


class EamCosinePredictor:
    """Nearest stored sketch by cosine over the flattened partial matrix.

    The prediction for the target layer is the top-budget experts of the
    matched sketch's block at that layer; an all-zero block predicts nothing.
    """

    kind = "eam_cosine"
    uses_partial_ream = True

    def __init__(self, collection: SketchCollection):
        if len(collection) == 0:
            raise ConfigError("eam_cosine needs a non-empty sketch collection")
        self.collection = collection
        self.shape = collection.shape

    def predict(self, ctx: PredictionContext) -> frozenset[int]:
        query = ctx.partial_ream.to_sketch()
        idx, _ = self.collection.match_nearest(query)
        block = self.collection.layer_block(idx, ctx.target_layer)
        return _top_weights(block, ctx.budget)

    def new_session(self) -> "CosineMatchSession":
        return CosineMatchSession(self)


class CosineMatchSession:
    """Per-replay incremental matcher equivalent to EamCosinePredictor.predict.

    Recomputing the full cosine scan per step costs O(S * L * E); between
    consecutive steps only the rows of the partial matrix that were
    accumulated change, so the scan is maintained incrementally per changed
    row at O(S * E). Row changes are detected by row sums, which strictly
    increase on every accumulate.
    """

    def __init__(self, predictor: EamCosinePredictor):
        self.predictor = predictor
        shape = predictor.shape
        coll = predictor.collection
        e = shape.num_experts
        # Unit-norm sketch matrix split by layer: blocks[l] is S x E.
        self._blocks = [
            np.ascontiguousarray(coll._unit[:, l * e:(l + 1) * e])
            for l in range(shape.num_layers)
        ]
        self._dots = np.zeros(len(coll), dtype=np.float64)
        self._query = np.zeros((shape.num_layers, e), dtype=np.float64)
        self._row_sums = np.zeros(shape.num_layers, dtype=np.int64)
        self._qsq = 0.0

    def _refresh(self, ream: ActivationMatrix) -> None:
        sums = ream.counts.sum(axis=1)
        for layer in np.nonzero(sums != self._row_sums)[0]:
            new_block = ream.counts[layer] / sums[layer]
            old_block = self._query[layer]
            self._dots += self._blocks[layer] @ (new_block - old_block)
            self._qsq += float(new_block @ new_block) - float(old_block @ old_block)
            self._query[layer] = new_block
            self._row_sums[layer] = sums[layer]

    def predict(self, ctx: PredictionContext) -> frozenset[int]:
        self._refresh(ctx.partial_ream)
        if self._qsq <= 0.0:
            idx = 0
        else:
            idx = int(np.argmax(self._dots))
        block = self.predictor.collection.layer_block(idx, ctx.target_layer)
        return _top_weights(block, ctx.budget)


class ExternalPredictor:
    """Adapter for externally produced per-step prediction files.

    Missing keys degrade to an empty prediction (counted as uncovered by the
    engine), so partial prediction files replay instead of failing.
    """

    kind = "external"

    def __init__(self, table: dict[tuple[int, int, int], frozenset[int]],
                 shape: ModelShape):
        self.shape = shape
        self.table = table

    def covers(self, prompt_id: int, token_index: int, layer_id: int) -> bool:
        return (prompt_id, token_index, layer_id) in self.table

    def predict(self, ctx: PredictionContext) -> frozenset[int]:
        return self.table.get(
            (ctx.prompt_id, ctx.token_index, ctx.target_layer), frozenset()
        )


class LearnedLinearPredictor:
    """Trained linear model scored over the context's history features."""

    kind = "learned_linear"
    uses_history = True

    def __init__(self, model: LinearModel, threshold: bool = False):
        if not model.trained:
            raise ConfigError("learned_linear needs a trained model")
        self.model = model
        self.shape = model.shape
        self.threshold = threshold

    @property
    def history_decay(self) -> float:
        return self.model.config.decay

    def predict(self, ctx: PredictionContext) -> frozenset[int]:
        f = feature_vector(ctx.target_layer, ctx.history[ctx.target_layer],
                           self.shape)
        scores = self.model.weights @ f
        if self.threshold:
            return frozenset(int(e) for e in np.nonzero(scores > 0.0)[0])
        return top_k_experts(scores, ctx.budget)


def make_predictor(kind: str, shape: ModelShape, *,
                   traces: list[PromptTrace] | None = None,
                   train_traces: list[PromptTrace] | None = None,
                   eamc: SketchCollection | None = None,
                   model: LinearModel | None = None,
                   predictions: dict | None = None,
                   threshold: bool = False):
    """Build a predictor of the given kind, checking its required state."""
    if kind == "oracle":
        if traces is None:
            raise ConfigError("oracle predictor needs the replayed traces")
        return OraclePredictor(traces, shape)
    if kind == "lru_only":
        return LruOnlyPredictor(shape)
    if kind == "next_layer_all":
        return NextLayerAllPredictor(shape)
    if kind == "global_frequency":
        if train_traces is None:
            raise ConfigError("global_frequency predictor needs training traces")
        return GlobalFrequencyPredictor(train_traces, shape)
    if kind == "eam_cosine":
        if eamc is None:
            raise ConfigError("eam_cosine predictor needs a sketch collection")
        return EamCosinePredictor(eamc)
    if kind == "external":
        if predictions is None:
            raise ConfigError("external predictor needs a prediction table")
        return ExternalPredictor(predictions, shape)
    if kind == "learned_linear":
        if model is None:
            raise ConfigError("learned_linear predictor needs a trained model")
        return LearnedLinearPredictor(model, threshold=threshold)
    raise ConfigError(f"unknown predictor kind {kind!r}")
