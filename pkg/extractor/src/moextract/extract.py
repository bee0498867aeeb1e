"""Instrument a Hugging Face MoE model and log router decisions as trace CSV.

Forward hooks capture each MoE layer's router selections during greedy
decoding with batch size 1. Modern router modules return their top-k expert
indices directly and those are logged as-is; plain linear gates fall back to
the top-k of their logits. One CSV row is emitted per (token, MoE layer) in
the simulator's trace schema:

    prompt_id,token_index,layer_id,expert_ids,token_id,embedding

Layer ids are the MoE layers re-indexed contiguously from 0 in model order.
By default only decode-phase tokens are logged: token t is the forward
position that produced generated token t+1, so ``--max-new-tokens N`` yields
exactly N rows per MoE layer per prompt. ``include_prefill`` additionally
logs the earlier prompt positions. Generation always runs the full token
budget (early stopping suppressed) so row counts are deterministic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

_NUM_EXPERT_ATTRS = ("num_local_experts", "num_experts", "n_routed_experts",
                     "num_routed_experts")
_TOP_K_ATTRS = ("num_experts_per_tok", "num_experts_per_token", "moe_top_k",
                "n_expert_per_token")


class RouterDiscoveryError(RuntimeError):
    """No usable router modules found; message lists candidate modules."""


def resolve_moe_config(config) -> tuple[int, int]:
    """(num_experts, top_k) from a model config, trying known attribute names."""
    num_experts = next(
        (getattr(config, a) for a in _NUM_EXPERT_ATTRS
         if getattr(config, a, None)), None)
    top_k = next(
        (getattr(config, a) for a in _TOP_K_ATTRS
         if getattr(config, a, None)), None)
    if num_experts is None or top_k is None:
        raise RouterDiscoveryError(
            f"model config {type(config).__name__} does not expose an expert "
            f"count (tried {_NUM_EXPERT_ATTRS}) and router top-k "
            f"(tried {_TOP_K_ATTRS}); not a supported MoE model"
        )
    return int(num_experts), int(top_k)


def _layer_number(module_name: str) -> int:
    numbers = re.findall(r"\.(\d+)\.", f".{module_name}.")
    if not numbers:
        return -1
    return int(numbers[0])


def find_router_modules(model, num_experts: int) -> list[tuple[str, nn.Module]]:
    """Router modules in model order, one per MoE layer.

    A module qualifies if its class name marks it as a router, or it is named
    ``gate``/``router`` and is a linear map onto the expert dimension.
    Raises RouterDiscoveryError with nearby candidates when nothing matches.
    """
    routers = []
    near_misses = []
    for name, module in model.named_modules():
        short = name.rsplit(".", 1)[-1]
        is_router_class = "router" in type(module).__name__.lower()
        is_gate_name = short in ("gate", "router")
        if not (is_router_class or is_gate_name):
            if isinstance(module, nn.Linear) and module.out_features == num_experts:
                near_misses.append(name)
            continue
        if isinstance(module, nn.Linear) and module.out_features != num_experts:
            continue  # e.g. shared-expert scalar gates
        routers.append((name, module))
    if not routers:
        raise RouterDiscoveryError(
            "no router modules found; candidate modules with an "
            f"expert-sized output: {near_misses or 'none'}"
        )
    routers.sort(key=lambda item: (_layer_number(item[0]), item[0]))
    return routers


def _selected_indices(output, top_k: int) -> torch.Tensor | None:
    """Extract (tokens, top_k) expert indices from a router's output."""
    candidates = output if isinstance(output, (tuple, list)) else (output,)
    # Prefer the router's own selection output over anything score-like.
    for item in reversed(candidates):
        if (torch.is_tensor(item) and not item.is_floating_point()
                and item.ndim >= 1 and item.shape[-1] == top_k):
            return item.reshape(-1, top_k)
    # Plain linear gate: derive the selection from the logits.
    for item in candidates:
        if torch.is_tensor(item) and item.is_floating_point() and item.ndim >= 1:
            logits = item.reshape(-1, item.shape[-1])
            return torch.topk(logits, top_k, dim=-1).indices
    return None


@dataclass
class PromptExtraction:
    prompt_id: int
    token_ids: list[int]
    first_decode_position: int
    selections: np.ndarray  # (positions, moe_layers, top_k)
    embeddings: np.ndarray | None  # (positions, hidden) when captured


def extract_prompt(model, tokenizer, prompt: str, prompt_id: int,
                   max_new_tokens: int,
                   include_embeddings: bool = False) -> PromptExtraction:
    """Run one prompt through greedy decoding with router hooks attached."""
    num_experts, top_k = resolve_moe_config(model.config)
    routers = find_router_modules(model, num_experts)
    captures: dict[str, list[np.ndarray]] = {name: [] for name, _ in routers}
    embed_rows: list[np.ndarray] = []

    def router_hook(name):
        def hook(module, args, output):
            indices = _selected_indices(output, top_k)
            if indices is None:
                raise RouterDiscoveryError(
                    f"router module {name} produced no usable selection output"
                )
            captures[name].append(indices.detach().cpu().numpy())
        return hook

    handles = [m.register_forward_hook(router_hook(n)) for n, m in routers]
    if include_embeddings:
        def embed_hook(module, args, output):
            embed_rows.append(
                output.detach().float().cpu().numpy().reshape(-1, output.shape[-1])
            )
        handles.append(
            model.get_input_embeddings().register_forward_hook(embed_hook))

    try:
        encoded = tokenizer(prompt, return_tensors="pt")
        input_ids = encoded["input_ids"]
        if input_ids.shape[0] != 1:
            raise ValueError("extraction runs one prompt at a time")
        with torch.no_grad():
            generated = model.generate(
                input_ids,
                max_new_tokens=max_new_tokens,
                min_new_tokens=max_new_tokens,
                do_sample=False,
                pad_token_id=(tokenizer.pad_token_id
                              if tokenizer.pad_token_id is not None
                              else tokenizer.eos_token_id),
            )
    finally:
        for handle in handles:
            handle.remove()

    per_layer = [np.concatenate(captures[name], axis=0) for name, _ in routers]
    positions = {arr.shape[0] for arr in per_layer}
    if len(positions) != 1:
        raise RouterDiscoveryError(
            f"router capture mismatch: row counts per layer {sorted(positions)}"
        )
    selections = np.stack(per_layer, axis=1)  # (positions, layers, top_k)

    prompt_len = input_ids.shape[1]
    # Input token processed at each forward position: the prompt, then every
    # generated token except the final one (never fed back in).
    processed = generated[0, :prompt_len + max_new_tokens - 1].tolist()
    if selections.shape[0] != len(processed):
        raise RouterDiscoveryError(
            f"captured {selections.shape[0]} positions for "
            f"{len(processed)} processed tokens"
        )
    embeddings = (
        np.concatenate(embed_rows, axis=0) if include_embeddings else None
    )
    return PromptExtraction(
        prompt_id=prompt_id,
        token_ids=[int(t) for t in processed],
        first_decode_position=prompt_len - 1,
        selections=selections,
        embeddings=embeddings,
    )


def extraction_rows(result: PromptExtraction, include_prefill: bool):
    """Yield (prompt_id, token_index, layer_id, expert_ids, token_id, embedding)."""
    start = 0 if include_prefill else result.first_decode_position
    for token_index, position in enumerate(range(start, result.selections.shape[0])):
        token_id = result.token_ids[position]
        embedding = (
            result.embeddings[position]
            if result.embeddings is not None else ()
        )
        for layer_id in range(result.selections.shape[1]):
            experts = sorted(int(e) for e in result.selections[position, layer_id])
            yield (result.prompt_id, token_index, layer_id, experts, token_id,
                   embedding)


TRACE_HEADER = "prompt_id,token_index,layer_id,expert_ids,token_id,embedding"


def rows_to_csv(rows) -> bytes:
    """Serialize rows in the simulator's canonical trace form."""
    rows = sorted(rows, key=lambda r: (r[0], r[1], r[2]))
    lines = [TRACE_HEADER]
    for prompt_id, token_index, layer_id, experts, token_id, embedding in rows:
        expert_text = "|".join(str(e) for e in experts)
        embed_text = "|".join(repr(float(v)) for v in embedding)
        lines.append(
            f"{prompt_id},{token_index},{layer_id},{expert_text},"
            f"{token_id},{embed_text}"
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


def extract_traces(model, tokenizer, prompts: list[str], max_new_tokens: int,
                   include_prefill: bool = False,
                   include_embeddings: bool = False) -> bytes:
    """Extract traces for a list of prompts and serialize them as CSV bytes."""
    model.eval()
    rows = []
    for prompt_id, prompt in enumerate(prompts):
        result = extract_prompt(model, tokenizer, prompt, prompt_id,
                                max_new_tokens,
                                include_embeddings=include_embeddings)
        rows.extend(extraction_rows(result, include_prefill))
    return rows_to_csv(rows)
