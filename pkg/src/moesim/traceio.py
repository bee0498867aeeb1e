"""Trace file I/O and synthetic trace generation.

Trace CSV schema (UTF-8, LF line endings):

    prompt_id,token_index,layer_id,expert_ids,token_id,embedding

``expert_ids`` is a ``|``-joined list of integers, ``embedding`` a
``|``-joined list of decimal floats or empty. Canonical form sorts rows by
(prompt_id, token_index, layer_id); ``write_trace_csv`` always emits it, so
write-then-parse is the identity on canonical bytes.

Predictions are JSON lines, one object per line with integer fields
``prompt_id``, ``token_index``, ``layer_id`` and an integer array ``experts``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, ModelShape, PromptTrace, RangeError, TokenRecord

TRACE_HEADER = "prompt_id,token_index,layer_id,expert_ids,token_id,embedding"

#: Key of one prediction/routing step.
StepKey = tuple[int, int, int]


class ParseError(ValueError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _parse_int(text: str, line: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(line, f"column {column}: {text!r} is not an integer") from None


def parse_trace_csv(data: bytes | str, shape: ModelShape) -> list[PromptTrace]:
    """Parse a trace CSV into validated prompt traces.

    Records are grouped by prompt_id and sorted by (token_index, layer_id).
    Any schema violation raises ParseError with the offending line number;
    trace-level invariants (layer coverage, token contiguity) raise RangeError.
    """
    if isinstance(data, bytes):
        text = data.decode("utf-8")
    else:
        text = data
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(1, "empty file, expected header")
    if lines[0] != TRACE_HEADER:
        raise ParseError(1, f"bad header {lines[0]!r}, expected {TRACE_HEADER!r}")

    traces: dict[int, PromptTrace] = {}
    seen: set[StepKey] = set()
    for i, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 6:
            raise ParseError(i, f"expected 6 columns, got {len(fields)}")
        prompt_id = _parse_int(fields[0], i, "prompt_id")
        token_index = _parse_int(fields[1], i, "token_index")
        layer_id = _parse_int(fields[2], i, "layer_id")
        if not fields[3]:
            raise ParseError(i, "empty expert_ids")
        expert_ids = tuple(
            _parse_int(part, i, "expert_ids") for part in fields[3].split("|")
        )
        token_id = _parse_int(fields[4], i, "token_id")
        if fields[5]:
            try:
                embedding = tuple(float(part) for part in fields[5].split("|"))
            except ValueError:
                raise ParseError(i, f"bad embedding {fields[5]!r}") from None
        else:
            embedding = ()

        key = (prompt_id, token_index, layer_id)
        if key in seen:
            raise ParseError(i, f"duplicate record for {key}")
        seen.add(key)

        rec = TokenRecord(prompt_id, token_index, layer_id, expert_ids,
                          token_id, embedding)
        try:
            rec.validate(shape)
        except RangeError as exc:
            raise ParseError(i, str(exc)) from None
        traces.setdefault(prompt_id, PromptTrace(prompt_id)).records.append(rec)

    result = [traces[pid] for pid in sorted(traces)]
    for trace in result:
        trace.sort()
        trace.validate(shape)
    return result


def _format_floats(values) -> str:
    return "|".join(repr(float(v)) for v in values)


def write_trace_csv(traces: list[PromptTrace]) -> bytes:
    """Serialize traces to canonical CSV bytes (sorted rows, LF endings)."""
    rows = []
    for trace in sorted(traces, key=lambda t: t.prompt_id):
        rows.extend(trace.records)
    rows.sort(key=lambda r: (r.prompt_id, r.token_index, r.layer_id))
    out = io.StringIO()
    out.write(TRACE_HEADER)
    out.write("\n")
    for r in rows:
        out.write(
            f"{r.prompt_id},{r.token_index},{r.layer_id},"
            f"{'|'.join(str(e) for e in r.expert_ids)},{r.token_id},"
            f"{_format_floats(r.embedding)}\n"
        )
    return out.getvalue().encode("utf-8")


def parse_predictions(data: bytes | str, shape: ModelShape) -> dict[StepKey, frozenset[int]]:
    """Parse a predictions JSONL stream into a table keyed by step.

    Each line must be a JSON object with integer ``prompt_id``,
    ``token_index``, ``layer_id`` and an integer array ``experts``. Duplicate
    keys and out-of-range experts are errors.
    """
    if isinstance(data, bytes):
        text = data.decode("utf-8")
    else:
        text = data
    table: dict[StepKey, frozenset[int]] = {}
    for i, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(i, f"malformed JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise ParseError(i, "expected a JSON object")
        try:
            key = (int(obj["prompt_id"]), int(obj["token_index"]),
                   int(obj["layer_id"]))
            experts = [int(e) for e in obj["experts"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(i, f"bad prediction object: {exc}") from None
        for e in experts:
            if not 0 <= e < shape.num_experts:
                raise ParseError(
                    i, f"expert {e} out of range [0, {shape.num_experts})"
                )
        if not 0 <= key[2] < shape.num_layers:
            raise ParseError(
                i, f"layer {key[2]} out of range [0, {shape.num_layers})"
            )
        if key in table:
            raise ParseError(i, f"duplicate prediction key {key}")
        table[key] = frozenset(experts)
    return table


def write_predictions_jsonl(table: dict[StepKey, frozenset[int]]) -> bytes:
    """Serialize a prediction table to canonical JSONL (sorted by key)."""
    out = io.StringIO()
    for key in sorted(table):
        prompt_id, token_index, layer_id = key
        experts = sorted(table[key])
        out.write(json.dumps({
            "prompt_id": prompt_id,
            "token_index": token_index,
            "layer_id": layer_id,
            "experts": experts,
        }, separators=(",", ":")))
        out.write("\n")
    return out.getvalue().encode("utf-8")


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic trace generator settings.

    Per prompt and per layer a hot set of ``hot_set_size`` experts is drawn
    uniformly without replacement; each token then draws its top_k experts
    from that hot set with probability ``skew``, otherwise uniformly from all
    experts. ``first_prompt_id`` offsets prompt ids so disjoint train/test
    splits can come from the same seeded generator.
    """

    num_prompts: int
    tokens_per_prompt: int
    shape: ModelShape
    hot_set_size: int
    skew: float
    seed: int
    first_prompt_id: int = 0

    def __post_init__(self):
        if self.num_prompts < 1:
            raise ConfigError(f"num_prompts must be >= 1, got {self.num_prompts}")
        if self.tokens_per_prompt < 1:
            raise ConfigError(
                f"tokens_per_prompt must be >= 1, got {self.tokens_per_prompt}"
            )
        if not self.shape.top_k <= self.hot_set_size <= self.shape.num_experts:
            raise ConfigError(
                f"hot_set_size must be in [{self.shape.top_k}, "
                f"{self.shape.num_experts}], got {self.hot_set_size}"
            )
        if not 0.0 <= self.skew <= 1.0:
            raise ConfigError(f"skew must be in [0, 1], got {self.skew}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.first_prompt_id < 0:
            raise ConfigError(
                f"first_prompt_id must be non-negative, got {self.first_prompt_id}"
            )


_TOKEN_VOCAB = 32000


def _generate_prompt(config: GeneratorConfig, prompt_id: int) -> PromptTrace:
    """Generate one prompt from its own PCG64 stream.

    The stream is keyed by (seed, prompt_id) via a SeedSequence spawn key, so
    a prompt's content is independent of how many other prompts are generated
    and in which order. Draws happen in a fixed documented order: per-layer
    hot-set keys, token ids, per-step skew variates, per-step hot-pick keys,
    per-step uniform-pick keys. Subsets-without-replacement come from the
    top-k positions of iid uniform keys, which is a uniform random subset.
    """
    shape = config.shape
    L, E, k = shape.num_layers, shape.num_experts, shape.top_k
    T, h = config.tokens_per_prompt, config.hot_set_size
    rng = np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(prompt_id,))
    )
    hot_keys = rng.random((L, E))
    token_ids = rng.integers(0, _TOKEN_VOCAB, size=T)
    from_hot = rng.random((T, L)) < config.skew
    hot_pick = rng.random((T, L, h))
    uni_pick = rng.random((T, L, E))

    hot = np.argpartition(-hot_keys, h - 1, axis=1)[:, :h]
    hot_sub = np.argpartition(-hot_pick, k - 1, axis=2)[:, :, :k]
    uni_sub = np.argpartition(-uni_pick, k - 1, axis=2)[:, :, :k]

    trace = PromptTrace(prompt_id)
    for t in range(T):
        token_id = int(token_ids[t])
        for layer in range(L):
            if from_hot[t, layer]:
                experts = hot[layer][hot_sub[t, layer]]
            else:
                experts = uni_sub[t, layer]
            trace.records.append(TokenRecord(
                prompt_id=prompt_id,
                token_index=t,
                layer_id=layer,
                expert_ids=tuple(int(e) for e in experts),
                token_id=token_id,
            ))
    return trace


def generate_synthetic(config: GeneratorConfig) -> list[PromptTrace]:
    """Generate ``num_prompts`` seeded synthetic prompt traces."""
    return [
        _generate_prompt(config, pid)
        for pid in range(config.first_prompt_id,
                         config.first_prompt_id + config.num_prompts)
    ]
