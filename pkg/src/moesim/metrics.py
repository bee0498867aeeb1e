"""Prediction-quality metrics and activation-distribution reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, ModelShape, PromptTrace


def position_accuracy(pred_sets, truth_sets) -> float:
    """Fraction of positions where the predicted set exactly equals the truth."""
    if len(pred_sets) != len(truth_sets):
        raise DimensionError(
            f"{len(pred_sets)} predictions vs {len(truth_sets)} truths"
        )
    if not truth_sets:
        return 0.0
    equal = sum(1 for p, t in zip(pred_sets, truth_sets) if set(p) == set(t))
    return equal / len(truth_sets)


def macro_f1(pred_sets, truth_sets, num_experts: int,
             include_all: bool = False) -> float:
    """Macro-averaged F1 over experts, each treated as a binary classifier.

    Experts that never occur in either predictions or truths are excluded
    from the average unless ``include_all`` is set, in which case they
    contribute an F1 of 0. With some support, F1 = 2*TP / (2*TP + FP + FN),
    which encodes the precision/recall zero conventions.
    """
    if len(pred_sets) != len(truth_sets):
        raise DimensionError(
            f"{len(pred_sets)} predictions vs {len(truth_sets)} truths"
        )
    tp = np.zeros(num_experts, dtype=np.int64)
    fp = np.zeros(num_experts, dtype=np.int64)
    fn = np.zeros(num_experts, dtype=np.int64)
    for pred, truth in zip(pred_sets, truth_sets):
        pred = set(pred)
        truth = set(truth)
        for e in pred & truth:
            tp[e] += 1
        for e in pred - truth:
            fp[e] += 1
        for e in truth - pred:
            fn[e] += 1
    support = tp + fp + fn
    with np.errstate(invalid="ignore"):
        f1 = np.where(support > 0, 2.0 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    if include_all:
        return float(f1.mean()) if num_experts else 0.0
    included = support > 0
    if not included.any():
        return 0.0
    return float(f1[included].mean())


def label_accuracy(pred_sets, truth_sets, num_experts: int) -> float:
    """Per-label accuracy: mean over positions and experts of membership match.

    Under heavy class imbalance (few active experts out of many) this runs
    far above the exact-set position accuracy; it is reported alongside it,
    never in its place.
    """
    if len(pred_sets) != len(truth_sets):
        raise DimensionError(
            f"{len(pred_sets)} predictions vs {len(truth_sets)} truths"
        )
    if not truth_sets:
        return 0.0
    correct = 0
    for pred, truth in zip(pred_sets, truth_sets):
        pred = set(pred)
        truth = set(truth)
        # Experts in exactly one of the two sets are the mismatches.
        correct += num_experts - len(pred ^ truth)
    return correct / (len(truth_sets) * num_experts)


@dataclass
class ActivationReport:
    """Exact activation counts per (layer, expert) plus per-prompt sparsity."""

    layer_expert_counts: np.ndarray
    prompt_ids: list[int]
    prompt_layer_distinct: np.ndarray

    @property
    def total_activations(self) -> int:
        return int(self.layer_expert_counts.sum())


def activation_report(traces: list[PromptTrace], shape: ModelShape) -> ActivationReport:
    """Aggregate activation counts and per-prompt distinct-expert counts.

    ``layer_expert_counts[l][e]`` counts every firing of expert e at layer l
    across all prompts; ``prompt_layer_distinct[p][l]`` counts how many
    distinct experts prompt p ever used at layer l (the per-prompt sparsity
    signal: skewed prompts use far fewer than E).
    """
    counts = np.zeros((shape.num_layers, shape.num_experts), dtype=np.int64)
    prompt_ids = []
    distinct_rows = []
    for trace in traces:
        seen = np.zeros((shape.num_layers, shape.num_experts), dtype=bool)
        for rec in trace.records:
            for e in rec.expert_ids:
                counts[rec.layer_id, e] += 1
                seen[rec.layer_id, e] = True
        prompt_ids.append(trace.prompt_id)
        distinct_rows.append(seen.sum(axis=1))
    distinct = (
        np.stack(distinct_rows)
        if distinct_rows
        else np.zeros((0, shape.num_layers), dtype=np.int64)
    )
    return ActivationReport(counts, prompt_ids, distinct)


def activation_report_csv(report: ActivationReport) -> bytes:
    lines = ["layer_id,expert_id,count"]
    counts = report.layer_expert_counts
    for layer in range(counts.shape[0]):
        for expert in range(counts.shape[1]):
            lines.append(f"{layer},{expert},{counts[layer, expert]}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def distinct_report_csv(report: ActivationReport) -> bytes:
    lines = ["prompt_id,layer_id,distinct_experts"]
    for row, pid in enumerate(report.prompt_ids):
        for layer in range(report.prompt_layer_distinct.shape[1]):
            lines.append(f"{pid},{layer},{report.prompt_layer_distinct[row, layer]}")
    return ("\n".join(lines) + "\n").encode("utf-8")
