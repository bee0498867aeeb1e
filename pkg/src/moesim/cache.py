"""Capacity-bounded LRU cache over (layer, expert) keys.

Demand accesses (``touch``) and speculative inserts (``prefetch``) share one
recency order: a prefetched key competes like any other resident. Keys
prefetched within the current step are pinned until the next ``begin_step``,
so a prediction that was fetched this step can never be evicted before its
own reveal. Without that rule, tiny caches would self-evict their prefetches
and measure prediction quality as uniformly useless.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from .core import ConfigError, ModelShape, RangeError

CacheKey = tuple[int, int]


@dataclass(frozen=True)
class CacheConfig:
    """Cache sizing: exactly one of fraction or entry count must be set.

    A fraction resolves to ``floor(fraction * L * E)`` entries with a floor
    of one entry. ``prefetch_budget`` caps how many predicted keys one step
    may prefetch.
    """

    capacity_fraction: float | None = None
    capacity_entries: int | None = None
    prefetch_budget: int = 6

    def __post_init__(self):
        if (self.capacity_fraction is None) == (self.capacity_entries is None):
            raise ConfigError(
                "exactly one of capacity_fraction or capacity_entries must be set"
            )
        if self.capacity_fraction is not None and not 0.0 < self.capacity_fraction <= 1.0:
            raise ConfigError(
                f"capacity_fraction must be in (0, 1], got {self.capacity_fraction}"
            )
        if self.capacity_entries is not None and self.capacity_entries < 1:
            raise ConfigError(
                f"capacity_entries must be >= 1, got {self.capacity_entries}"
            )
        if self.prefetch_budget < 1:
            raise ConfigError(
                f"prefetch_budget must be >= 1, got {self.prefetch_budget}"
            )

    def resolve_capacity(self, shape: ModelShape) -> int:
        if self.capacity_entries is not None:
            return self.capacity_entries
        return max(1, int(self.capacity_fraction * shape.total_experts))


class ExpertCache:
    """LRU set of resident (layer_id, expert_id) keys."""

    def __init__(self, capacity: int, shape: ModelShape):
        if capacity < 1:
            raise ConfigError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.shape = shape
        self._num_layers = shape.num_layers
        self._num_experts = shape.num_experts
        self._resident: OrderedDict[CacheKey, None] = OrderedDict()
        self._pins: set[CacheKey] = set()

    def __len__(self) -> int:
        return len(self._resident)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._resident

    @property
    def resident(self) -> list[CacheKey]:
        """Resident keys, least recently used first."""
        return list(self._resident)

    def _check(self, key: CacheKey) -> None:
        layer, expert = key
        if not 0 <= layer < self._num_layers:
            raise RangeError(
                f"layer {layer} out of range [0, {self._num_layers})"
            )
        if not 0 <= expert < self._num_experts:
            raise RangeError(
                f"expert {expert} out of range [0, {self._num_experts})"
            )

    def _evict_one(self) -> bool:
        """Drop the least recently used non-pinned key; False if all pinned."""
        pins = self._pins
        for key in self._resident:
            if key not in pins:
                del self._resident[key]
                return True
        return False

    def begin_step(self) -> None:
        """Start a new (token, layer) step, releasing the previous step's pins."""
        self._pins.clear()

    def touch(self, key: CacheKey) -> bool:
        """Demand access. Returns True on hit.

        On a miss the key is inserted as most-recent, evicting the LRU
        non-pinned entry when full. If every resident key is pinned (only
        possible when capacity <= pins of the current step), the insert is
        skipped: the miss still counts, the pins stay.
        """
        if not (0 <= key[0] < self._num_layers
                and 0 <= key[1] < self._num_experts):
            self._check(key)
        resident = self._resident
        if key in resident:
            resident.move_to_end(key)
            return True
        if len(resident) >= self.capacity and not self._evict_one():
            return False
        resident[key] = None
        return False

    def prefetch(self, keys, limit: int | None = None) -> int:
        """Speculatively insert keys in order, pinning them for this step.

        At most ``limit`` keys are processed (callers normally pass the
        configured prefetch budget; pass ``len(keys)`` to model an unbounded
        eager load). Already-resident keys are refreshed to most-recent.
        Absent keys are inserted with LRU eviction, except that same-step
        pins are never evicted; when no victim exists the key is rejected.
        Returns the number of newly inserted keys.
        """
        inserted = 0
        if limit is None:
            limit = len(keys)
        resident = self._resident
        pins = self._pins
        for key in keys[:limit]:
            if not (0 <= key[0] < self._num_layers
                    and 0 <= key[1] < self._num_experts):
                self._check(key)
            if key in resident:
                resident.move_to_end(key)
                pins.add(key)
                continue
            if len(resident) >= self.capacity and not self._evict_one():
                continue
            resident[key] = None
            pins.add(key)
            inserted += 1
        return inserted
