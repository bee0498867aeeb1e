"""Core domain types: routing traces and expert activation count matrices.

An activation matrix is an L x E table of non-negative counts recording how
often each expert fired at each layer. Accumulated over a single token it is
an indicator-style matrix; accumulated over a whole prompt it summarizes the
prompt's expert usage. Flattened (row-major, layer-major order) and row-wise
normalized, it becomes the sketch vector used for cosine matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class RangeError(ValueError):
    """A layer or expert id lies outside the model shape."""


class DimensionError(ValueError):
    """Vectors that must share a length do not."""


class ConfigError(ValueError):
    """An invalid configuration value or uninitialized component."""


@dataclass(frozen=True)
class ModelShape:
    """Static routing geometry of the served model.

    Attributes:
        num_layers: number of MoE layers L.
        num_experts: experts per layer E.
        top_k: experts activated per token per layer.
    """

    num_layers: int
    num_experts: int
    top_k: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k must be in [1, {self.num_experts}], got {self.top_k}"
            )

    @property
    def total_experts(self) -> int:
        """Number of distinct (layer, expert) keys, also the sketch length."""
        return self.num_layers * self.num_experts


#: 27 layers x 64 routed experts with 6 activated per token, the default
#: configuration for all CLI commands.
DEFAULT_SHAPE = ModelShape(num_layers=27, num_experts=64, top_k=6)


@dataclass(frozen=True, slots=True)
class TokenRecord:
    """One logged routing event: a single (prompt, token, layer) step.

    ``expert_ids`` is stored as a sorted tuple but has set semantics; it must
    hold exactly ``top_k`` distinct in-range ids (checked by ``validate``).
    ``embedding`` is informational and may be empty.
    """

    prompt_id: int
    token_index: int
    layer_id: int
    expert_ids: tuple[int, ...]
    token_id: int = 0
    embedding: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "expert_ids", tuple(sorted(self.expert_ids)))
        object.__setattr__(self, "embedding", tuple(self.embedding))

    def validate(self, shape: ModelShape) -> None:
        if self.prompt_id < 0 or self.token_index < 0:
            raise RangeError(
                f"prompt_id and token_index must be non-negative, got "
                f"({self.prompt_id}, {self.token_index})"
            )
        if not 0 <= self.layer_id < shape.num_layers:
            raise RangeError(
                f"layer {self.layer_id} out of range [0, {shape.num_layers})"
            )
        if len(set(self.expert_ids)) != len(self.expert_ids):
            raise RangeError(f"duplicate expert ids in {self.expert_ids}")
        if len(self.expert_ids) != shape.top_k:
            raise RangeError(
                f"expected {shape.top_k} expert ids, got {len(self.expert_ids)}"
            )
        for e in self.expert_ids:
            if not 0 <= e < shape.num_experts:
                raise RangeError(
                    f"expert {e} out of range [0, {shape.num_experts})"
                )


@dataclass
class PromptTrace:
    """All routing events of one prompt, ordered by (token_index, layer_id).

    A valid trace covers every layer exactly once for every token and uses
    contiguous token indices starting at 0.
    """

    prompt_id: int
    records: list[TokenRecord] = field(default_factory=list)

    @property
    def num_tokens(self) -> int:
        if not self.records:
            return 0
        return self.records[-1].token_index + 1

    def sort(self) -> None:
        self.records.sort(key=lambda r: (r.token_index, r.layer_id))

    def validate(self, shape: ModelShape) -> None:
        """Check per-record validity plus layer coverage and token contiguity."""
        seen: dict[int, set[int]] = {}
        for rec in self.records:
            if rec.prompt_id != self.prompt_id:
                raise RangeError(
                    f"record prompt_id {rec.prompt_id} != trace prompt_id "
                    f"{self.prompt_id}"
                )
            rec.validate(shape)
            layers = seen.setdefault(rec.token_index, set())
            if rec.layer_id in layers:
                raise RangeError(
                    f"duplicate record for token {rec.token_index} layer "
                    f"{rec.layer_id} in prompt {self.prompt_id}"
                )
            layers.add(rec.layer_id)
        tokens = sorted(seen)
        if tokens != list(range(len(tokens))):
            raise RangeError(
                f"prompt {self.prompt_id}: token indices not contiguous from 0"
            )
        for t, layers in seen.items():
            if len(layers) != shape.num_layers:
                raise RangeError(
                    f"prompt {self.prompt_id}: incomplete layer coverage at "
                    f"token {t} ({len(layers)} of {shape.num_layers} layers)"
                )


class ActivationMatrix:
    """L x E matrix of non-negative activation counts.

    Counts stay integral; normalization happens lazily in ``to_sketch`` so
    that scale-invariance holds exactly. Accumulation is single-writer; the
    matrix may be shared read-only once building is done.
    """

    __slots__ = ("shape", "counts")

    def __init__(self, shape: ModelShape, counts: np.ndarray | None = None):
        self.shape = shape
        if counts is None:
            counts = np.zeros((shape.num_layers, shape.num_experts), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (shape.num_layers, shape.num_experts):
                raise DimensionError(
                    f"counts shape {counts.shape} != "
                    f"({shape.num_layers}, {shape.num_experts})"
                )
            if (counts < 0).any():
                raise RangeError("activation counts must be non-negative")
        self.counts = counts

    def accumulate(self, layer_id: int, expert_ids) -> "ActivationMatrix":
        """Add one activation for each expert in ``expert_ids`` at ``layer_id``."""
        if not 0 <= layer_id < self.shape.num_layers:
            raise RangeError(
                f"layer {layer_id} out of range [0, {self.shape.num_layers})"
            )
        for e in expert_ids:
            if not 0 <= e < self.shape.num_experts:
                raise RangeError(
                    f"expert {e} out of range [0, {self.shape.num_experts})"
                )
            self.counts[layer_id, e] += 1
        return self

    @classmethod
    def from_trace(cls, trace: PromptTrace, shape: ModelShape,
                   max_tokens: int | None = None) -> "ActivationMatrix":
        """Accumulate a whole prompt (or its first ``max_tokens`` tokens)."""
        m = cls(shape)
        for rec in trace.records:
            if max_tokens is not None and rec.token_index >= max_tokens:
                continue
            m.accumulate(rec.layer_id, rec.expert_ids)
        return m

    def copy(self) -> "ActivationMatrix":
        return ActivationMatrix(self.shape, self.counts.copy())

    def to_sketch(self) -> np.ndarray:
        return normalize(self)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ActivationMatrix)
            and self.shape == other.shape
            and np.array_equal(self.counts, other.counts)
        )


def normalize(matrix: ActivationMatrix) -> np.ndarray:
    """Row-normalize and flatten an activation matrix into a sketch vector.

    Each layer row is divided by its own sum (all-zero rows stay zero), then
    rows are concatenated row-major: index ``layer * E + expert``. The fixed
    ordering makes externally produced sketches bit-compatible.
    """
    counts = matrix.counts.astype(np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    np.divide(counts, sums, out=counts, where=sums > 0)
    return counts.reshape(-1)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two equal-length vectors.

    Returns 0.0 when either vector has zero norm, so a blank sketch prefers
    nothing and downstream tie-breaking (lowest index) applies.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(float(np.dot(a, b)) / (na * nb), -1.0, 1.0))
