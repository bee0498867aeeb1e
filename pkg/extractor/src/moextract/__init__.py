"""Router-decision trace extraction for Hugging Face MoE models."""

from .extract import (
    RouterDiscoveryError,
    extract_prompt,
    extract_traces,
    find_router_modules,
    resolve_moe_config,
)

__version__ = "0.1.0"

__all__ = [
    "RouterDiscoveryError",
    "extract_prompt",
    "extract_traces",
    "find_router_modules",
    "resolve_moe_config",
]
