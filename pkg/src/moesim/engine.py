"""Token-by-token, layer-by-layer trace replay under a predictor and cache.

Each measured step queries the predictor for the layer about to execute,
prefetches the predicted experts (one pinned step), then reveals the ground
truth: a prediction hit is recorded when a true expert appears in the
predicted set, a cache hit when it is already resident at reveal time. The
first ``warmup_tokens`` tokens only warm the cache and the partial activation
matrix so both start in realistic states; they contribute no counters.

Prompts replay independently with private caches, so parallel replay is a
pure fan-out whose aggregated counters match sequential execution exactly.
"""

from __future__ import annotations

import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cache import CacheConfig, ExpertCache
from .core import ActivationMatrix, ConfigError, ModelShape, PromptTrace
from .learner import update_history
from .predictors import PredictionContext


@dataclass(frozen=True)
class ReplayConfig:
    shape: ModelShape
    cache: CacheConfig
    warmup_tokens: int = 8
    history_decay: float = 0.9

    def __post_init__(self):
        if self.warmup_tokens < 0:
            raise ConfigError(
                f"warmup_tokens must be >= 0, got {self.warmup_tokens}"
            )
        if not 0.0 <= self.history_decay < 1.0:
            raise ConfigError(
                f"history_decay must be in [0, 1), got {self.history_decay}"
            )


@dataclass
class PromptCounters:
    measured_accesses: int = 0
    cache_hits: int = 0
    prediction_opportunities: int = 0
    prediction_hits: int = 0


def _rate(hits: int, denom: int) -> float | None:
    return hits / denom if denom else None


def format_rate(rate: float | None) -> str:
    return "n/a" if rate is None else repr(rate)


@dataclass
class SimReport:
    """Aggregate and per-prompt counters for one replay run."""

    shape: ModelShape
    measured_accesses: int = 0
    cache_hits: int = 0
    prediction_opportunities: int = 0
    prediction_hits: int = 0
    uncovered_queries: int = 0
    layer_accesses: np.ndarray = None
    layer_cache_hits: np.ndarray = None
    layer_prediction_hits: np.ndarray = None
    per_prompt: dict[int, PromptCounters] = field(default_factory=dict)

    def __post_init__(self):
        L = self.shape.num_layers
        if self.layer_accesses is None:
            self.layer_accesses = np.zeros(L, dtype=np.int64)
        if self.layer_cache_hits is None:
            self.layer_cache_hits = np.zeros(L, dtype=np.int64)
        if self.layer_prediction_hits is None:
            self.layer_prediction_hits = np.zeros(L, dtype=np.int64)

    @property
    def cache_hit_rate(self) -> float | None:
        return _rate(self.cache_hits, self.measured_accesses)

    @property
    def prediction_hit_rate(self) -> float | None:
        return _rate(self.prediction_hits, self.prediction_opportunities)

    def merge(self, other: "SimReport") -> None:
        self.measured_accesses += other.measured_accesses
        self.cache_hits += other.cache_hits
        self.prediction_opportunities += other.prediction_opportunities
        self.prediction_hits += other.prediction_hits
        self.uncovered_queries += other.uncovered_queries
        self.layer_accesses += other.layer_accesses
        self.layer_cache_hits += other.layer_cache_hits
        self.layer_prediction_hits += other.layer_prediction_hits
        self.per_prompt.update(other.per_prompt)

    @classmethod
    def aggregate(cls, shape: ModelShape, reports) -> "SimReport":
        total = cls(shape)
        for report in reports:
            total.merge(report)
        return total


def replay_prompt(trace: PromptTrace, predictor, config: ReplayConfig) -> SimReport:
    """Replay one prompt and return its counters.

    Raises ConfigError when the prompt is not longer than the warm-up window
    (it would contribute no measured steps). The partial activation matrix
    and decayed history are maintained only for predictors that read them
    (``uses_partial_ream`` / ``uses_history`` class flags); everything else
    about the protocol is identical across predictor kinds.
    """
    shape = config.shape
    if trace.num_tokens <= config.warmup_tokens:
        raise ConfigError(
            f"prompt {trace.prompt_id} has {trace.num_tokens} tokens, "
            f"not more than warmup_tokens={config.warmup_tokens}"
        )
    decay = getattr(predictor, "history_decay", config.history_decay)
    cache = ExpertCache(config.cache.resolve_capacity(shape), shape)
    ream = ActivationMatrix(shape)
    history = np.zeros((shape.num_layers, shape.num_experts), dtype=np.float64)
    track_ream = getattr(predictor, "uses_partial_ream", False)
    track_history = getattr(predictor, "uses_history", False)
    predict = (
        predictor.new_session().predict
        if hasattr(predictor, "new_session")
        else predictor.predict
    )
    covers = getattr(predictor, "covers", None)
    unbounded = getattr(predictor, "unbounded_prefetch", False)
    budget = config.cache.prefetch_budget
    warmup = config.warmup_tokens
    touch = cache.touch
    prompt_id = trace.prompt_id

    report = SimReport(shape)
    counters = PromptCounters()
    report.per_prompt[prompt_id] = counters
    layer_accesses = report.layer_accesses
    layer_cache_hits = report.layer_cache_hits
    layer_prediction_hits = report.layer_prediction_hits
    total_accesses = 0
    total_cache_hits = 0
    total_pred_hits = 0
    uncovered = 0

    for rec in trace.records:
        layer = rec.layer_id
        experts = rec.expert_ids
        if rec.token_index < warmup:
            for e in experts:
                touch((layer, e))
            if track_ream:
                ream.accumulate(layer, experts)
            if track_history:
                update_history(history, layer, experts, decay)
            continue

        ctx = PredictionContext(prompt_id, rec.token_index, layer,
                                ream, history, budget)
        predicted = predict(ctx)
        cache.begin_step()
        keys = [(layer, e) for e in sorted(predicted)]
        cache.prefetch(keys, limit=len(keys) if unbounded else budget)
        if covers is not None and not covers(prompt_id, rec.token_index, layer):
            uncovered += 1

        step_pred_hits = 0
        step_cache_hits = 0
        for e in experts:
            if e in predicted:
                step_pred_hits += 1
            if touch((layer, e)):
                step_cache_hits += 1
        k = len(experts)
        total_accesses += k
        total_cache_hits += step_cache_hits
        total_pred_hits += step_pred_hits
        layer_accesses[layer] += k
        layer_cache_hits[layer] += step_cache_hits
        layer_prediction_hits[layer] += step_pred_hits

        if track_ream:
            ream.accumulate(layer, experts)
        if track_history:
            update_history(history, layer, experts, decay)

    report.measured_accesses = total_accesses
    report.cache_hits = total_cache_hits
    report.prediction_opportunities = total_accesses
    report.prediction_hits = total_pred_hits
    report.uncovered_queries = uncovered
    counters.measured_accesses = total_accesses
    counters.cache_hits = total_cache_hits
    counters.prediction_opportunities = total_accesses
    counters.prediction_hits = total_pred_hits
    return report


_POOL_STATE: dict = {}


def _pool_init(predictor, config):
    _POOL_STATE["predictor"] = predictor
    _POOL_STATE["config"] = config


def _pool_replay(trace):
    return replay_prompt(trace, _POOL_STATE["predictor"], _POOL_STATE["config"])


def replay_traces(traces: list[PromptTrace], predictor, config: ReplayConfig,
                  jobs: int = 1) -> SimReport:
    """Replay many prompts, optionally across processes.

    Counter aggregation is an order-independent integer reduction, so the
    result is identical for any job count.
    """
    if jobs <= 1 or len(traces) <= 1:
        reports = [replay_prompt(t, predictor, config) for t in traces]
    else:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_pool_init,
            initargs=(predictor, config),
        ) as pool:
            chunk = max(1, len(traces) // (jobs * 4))
            reports = list(pool.map(_pool_replay, traces, chunksize=chunk))
    return SimReport.aggregate(config.shape, reports)


def collect_prediction_sets(traces: list[PromptTrace], predictor,
                            config: ReplayConfig):
    """Predicted/truth set pairs for every measured step, for offline metrics.

    Predictions never depend on the cache, so no cache is simulated; the
    partial matrix and history evolve exactly as in ``replay_prompt``.
    """
    shape = config.shape
    decay = getattr(predictor, "history_decay", config.history_decay)
    pred_sets: list[frozenset[int]] = []
    truth_sets: list[frozenset[int]] = []
    layer_ids: list[int] = []
    for trace in traces:
        ream = ActivationMatrix(shape)
        history = np.zeros((shape.num_layers, shape.num_experts), dtype=np.float64)
        predict = (
            predictor.new_session().predict
            if hasattr(predictor, "new_session")
            else predictor.predict
        )
        for rec in trace.records:
            layer = rec.layer_id
            if rec.token_index >= config.warmup_tokens:
                ctx = PredictionContext(trace.prompt_id, rec.token_index,
                                        layer, ream, history,
                                        config.cache.prefetch_budget)
                pred_sets.append(frozenset(predict(ctx)))
                truth_sets.append(frozenset(rec.expert_ids))
                layer_ids.append(layer)
            ream.accumulate(layer, rec.expert_ids)
            update_history(history, layer, rec.expert_ids, decay)
    return pred_sets, truth_sets, layer_ids


@dataclass
class SweepPoint:
    capacity_fraction: float
    predictor_kind: str
    report: SimReport


def sweep(traces: list[PromptTrace], predictor_factory, predictor_kind: str,
          capacities: list[float], shape: ModelShape, prefetch_budget: int,
          warmup_tokens: int, history_decay: float = 0.9,
          jobs: int = 1) -> list[SweepPoint]:
    """One aggregate report per capacity fraction.

    ``predictor_factory`` is invoked afresh per capacity point so every point
    replays from identical predictor state.
    """
    if not traces:
        raise ConfigError("sweep needs at least one trace")
    if not capacities:
        raise ConfigError("sweep needs at least one capacity")
    points = []
    for fraction in capacities:
        config = ReplayConfig(
            shape=shape,
            cache=CacheConfig(capacity_fraction=fraction,
                              prefetch_budget=prefetch_budget),
            warmup_tokens=warmup_tokens,
            history_decay=history_decay,
        )
        report = replay_traces(traces, predictor_factory(), config, jobs=jobs)
        points.append(SweepPoint(fraction, predictor_kind, report))
    return points


def sweep_csv(points: list[SweepPoint]) -> bytes:
    out = io.StringIO()
    out.write("capacity_fraction,predictor,cache_hit_rate,prediction_hit_rate,"
              "measured_accesses\n")
    for p in points:
        out.write(
            f"{repr(p.capacity_fraction)},{p.predictor_kind},"
            f"{format_rate(p.report.cache_hit_rate)},"
            f"{format_rate(p.report.prediction_hit_rate)},"
            f"{p.report.measured_accesses}\n"
        )
    return out.getvalue().encode("utf-8")


def sweep_layers_csv(points: list[SweepPoint]) -> bytes:
    out = io.StringIO()
    out.write("capacity_fraction,predictor,layer_id,measured_accesses,"
              "cache_hits,cache_hit_rate,prediction_hits,prediction_hit_rate\n")
    for p in points:
        r = p.report
        for layer in range(r.shape.num_layers):
            acc = int(r.layer_accesses[layer])
            ch = int(r.layer_cache_hits[layer])
            ph = int(r.layer_prediction_hits[layer])
            out.write(
                f"{repr(p.capacity_fraction)},{p.predictor_kind},{layer},"
                f"{acc},{ch},{format_rate(_rate(ch, acc))},"
                f"{ph},{format_rate(_rate(ph, acc))}\n"
            )
    return out.getvalue().encode("utf-8")


def report_summary_csv(report: SimReport, predictor_kind: str,
                       capacity_entries: int) -> bytes:
    out = io.StringIO()
    out.write("predictor,capacity_entries,measured_accesses,cache_hits,"
              "cache_hit_rate,prediction_opportunities,prediction_hits,"
              "prediction_hit_rate,uncovered_queries\n")
    out.write(
        f"{predictor_kind},{capacity_entries},{report.measured_accesses},"
        f"{report.cache_hits},{format_rate(report.cache_hit_rate)},"
        f"{report.prediction_opportunities},{report.prediction_hits},"
        f"{format_rate(report.prediction_hit_rate)},{report.uncovered_queries}\n"
    )
    return out.getvalue().encode("utf-8")


def report_layers_csv(report: SimReport) -> bytes:
    out = io.StringIO()
    out.write("layer_id,measured_accesses,cache_hits,cache_hit_rate,"
              "prediction_hits,prediction_hit_rate\n")
    for layer in range(report.shape.num_layers):
        acc = int(report.layer_accesses[layer])
        ch = int(report.layer_cache_hits[layer])
        ph = int(report.layer_prediction_hits[layer])
        out.write(
            f"{layer},{acc},{ch},{format_rate(_rate(ch, acc))},"
            f"{ph},{format_rate(_rate(ph, acc))}\n"
        )
    return out.getvalue().encode("utf-8")


def report_prompts_csv(report: SimReport) -> bytes:
    out = io.StringIO()
    out.write("prompt_id,measured_accesses,cache_hits,cache_hit_rate,"
              "prediction_hits,prediction_hit_rate\n")
    for pid in sorted(report.per_prompt):
        c = report.per_prompt[pid]
        out.write(
            f"{pid},{c.measured_accesses},{c.cache_hits},"
            f"{format_rate(_rate(c.cache_hits, c.measured_accesses))},"
            f"{c.prediction_hits},"
            f"{format_rate(_rate(c.prediction_hits, c.prediction_opportunities))}\n"
        )
    return out.getvalue().encode("utf-8")
