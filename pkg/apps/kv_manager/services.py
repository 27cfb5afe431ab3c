"""
Head-wise KV-cache block pool with per-LLM token-block quotas.

A block holds the keys (or values) of one attention head in one layer for
``block_tokens`` tokens, so models with different layer and head counts draw
from the same pool without a static split. Quotas bound how many blocks each
LLM may hold and are rebalanced periodically from measured utilization.
"""
import logging
import math
from collections import deque
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
from django.conf import settings

from apps.cost_model.domain import LLMSpec

from .domain import Allocation, DoubleFreeError, InsufficientBlocks, UnknownRequestError

logger = logging.getLogger(__name__)

# Freed request ids remembered for double-free detection.
RELEASED_WINDOW = 4096


def _defaults() -> Dict:
    return getattr(settings, 'MUXSIM_DEFAULTS', {})


def blocks_per_token(spec: LLMSpec, block_tokens: int) -> float:
    """
    Amortized head-blocks per token: ``2 * num_layers * num_heads / block_tokens``.

    Allocation itself is in whole blocks; see BlockPool.blocks_for.
    """
    if block_tokens < 1:
        raise ValueError(f"block_tokens must be >= 1, got {block_tokens}")
    return 2 * spec.num_layers * spec.num_heads / block_tokens


def block_bytes(specs: Iterable[LLMSpec], block_tokens: int) -> int:
    """Size of one block, wide enough for the largest head in the unit."""
    return max(spec.head_dim * spec.bytes_per_element for spec in specs) * block_tokens


def apportion(total: int, weights: Mapping[str, float]) -> Dict[str, int]:
    """
    Split ``total`` integer units proportionally to ``weights``.

    Largest-remainder rounding, ties to earlier keys; the parts sum to ``total``.
    Zero total weight splits equally.
    """
    names = list(weights)
    if not names:
        return {}
    w = np.array([max(0.0, float(weights[n])) for n in names])
    if w.sum() <= 0:
        w = np.ones(len(names))
    exact = total * w / w.sum()
    parts = np.floor(exact).astype(np.int64)
    short = int(total - parts.sum())
    if short > 0:
        order = np.argsort(-(exact - parts), kind='stable')
        parts[order[:short]] += 1
    return {name: int(part) for name, part in zip(names, parts)}


def init_token_block_quota(specs: Mapping[str, LLMSpec], rates: Mapping[str, float],
                           lengths: Mapping[str, Tuple[float, float]], kv_blocks: int,
                           block_tokens: Optional[int] = None,
                           floor_fraction: Optional[float] = None) -> Dict[str, int]:
    """
    Initial quotas proportional to each LLM's expected token-block demand.

    Demand is ``rate * blocks_per_token * (mean_prompt + mean_output)``. Every
    LLM first receives a floor of ``floor_fraction`` of the pool; the rest is
    apportioned by demand, and the quotas sum to ``kv_blocks``.
    """
    defaults = _defaults()
    block_tokens = block_tokens or defaults.get('block_tokens', 16)
    floor_fraction = floor_fraction if floor_fraction is not None else defaults.get('quota_floor', 0.02)
    names = list(specs)
    if not names:
        return {}
    floor = int(floor_fraction * kv_blocks)
    if floor * len(names) > kv_blocks:
        return apportion(kv_blocks, {name: 1.0 for name in names})

    demand = {
        name: rates.get(name, 0.0) * blocks_per_token(specs[name], block_tokens) * sum(lengths[name])
        for name in names
    }
    extra = apportion(kv_blocks - floor * len(names), demand)
    quotas = {name: floor + extra[name] for name in names}
    logger.debug(f"Initial quotas over {kv_blocks} blocks: {quotas}")
    return quotas


def adapt_quota(utilizations: Mapping[str, float], quotas: Mapping[str, int], floor: int = 0,
                low_mark: Optional[float] = None, high_mark: Optional[float] = None,
                step: Optional[float] = None) -> Dict[str, int]:
    """
    Move blocks from under-used LLMs to saturated ones.

    Each LLM below ``low_mark`` donates ``step`` of its quota (never dropping
    under ``floor``); LLMs above ``high_mark`` split the donations in
    proportion to ``(utilization - high_mark) * quota``. The quota sum is
    unchanged.
    """
    defaults = _defaults()
    low_mark = low_mark if low_mark is not None else defaults.get('low_mark', 0.5)
    high_mark = high_mark if high_mark is not None else defaults.get('high_mark', 0.9)
    step = step if step is not None else defaults.get('quota_step', 0.1)

    new = dict(quotas)
    receivers = {name: (u - high_mark) * max(quotas[name], 1)
                 for name, u in utilizations.items() if u > high_mark}
    if not receivers:
        return new

    donated = 0
    for name, u in utilizations.items():
        if u >= low_mark or name in receivers:
            continue
        give = min(int(step * quotas[name]), quotas[name] - floor)
        if give > 0:
            new[name] -= give
            donated += give
    if donated == 0:
        return new

    for name, gain in apportion(donated, receivers).items():
        new[name] += gain
    logger.debug(f"Quota transfer of {donated} blocks to {sorted(receivers)}")
    return new


class BlockPool:
    """
    The KV cache of one LLM unit.

    Free space is kept as a list of ``range`` extents and every request owns
    a block table of extents. ``advance`` must be called with the current
    simulated time before each mutation so time-averaged usage stays exact.
    Only the last ``released_window`` freed ids are remembered, so a double
    free of an older request surfaces as UnknownRequestError.
    """

    def __init__(self, total_blocks: int, specs: Mapping[str, LLMSpec],
                 block_tokens: Optional[int] = None,
                 quotas: Optional[Mapping[str, int]] = None,
                 released_window: int = RELEASED_WINDOW):
        if total_blocks < 0:
            raise ValueError(f"total_blocks must be >= 0, got {total_blocks}")
        self.total_blocks = int(total_blocks)
        self.block_tokens = block_tokens or _defaults().get('block_tokens', 16)
        self.specs = dict(specs)
        self._free: List[range] = [range(0, self.total_blocks)] if self.total_blocks else []
        self.free_blocks = self.total_blocks
        self.used = {name: 0 for name in self.specs}
        self.quotas = {name: self.total_blocks for name in self.specs}
        if quotas is not None:
            self.set_quotas(quotas)
        self._tables: Dict[int, List[range]] = {}
        self._tokens: Dict[int, int] = {}
        self._owner: Dict[int, str] = {}
        self._released = set()
        self._release_order = deque()
        self.released_window = max(1, released_window)

        self._clock = 0.0
        self._area = {name: 0.0 for name in self.specs}
        self._period_start = 0.0
        self._period_area = {name: 0.0 for name in self.specs}
        self.history: List[Dict] = []

    # Sizing

    def blocks_for(self, llm: str, n_tokens: int) -> int:
        """Whole blocks that ``n_tokens`` tokens of ``llm`` occupy."""
        spec = self.specs[llm]
        return 2 * spec.num_layers * spec.num_heads * math.ceil(n_tokens / self.block_tokens)

    def growth(self, llm: str, current_tokens: int, n_tokens: int) -> int:
        """Extra blocks to grow a request from ``current_tokens`` by ``n_tokens``."""
        return self.blocks_for(llm, current_tokens + n_tokens) - self.blocks_for(llm, current_tokens)

    def set_quotas(self, quotas: Mapping[str, int]) -> None:
        if set(quotas) != set(self.specs):
            raise ValueError(f"quotas must cover exactly {sorted(self.specs)}")
        if any(q < 0 for q in quotas.values()) or sum(quotas.values()) > self.total_blocks:
            raise ValueError(f"quotas {dict(quotas)} do not fit {self.total_blocks} blocks")
        self.quotas = {name: int(q) for name, q in quotas.items()}

    # Allocation

    def alloc(self, llm: str, request_id: int, n_tokens: int,
              enforce_quota: bool = True) -> Allocation:
        """
        Grow ``request_id`` by ``n_tokens`` tokens.

        Raises:
            InsufficientBlocks: nothing is allocated.
            DoubleFreeError: the request was already released.
        """
        if llm not in self.specs:
            raise UnknownRequestError(f"unknown LLM {llm!r}")
        if request_id in self._released:
            raise DoubleFreeError(f"request {request_id} was already freed")
        if request_id in self._owner and self._owner[request_id] != llm:
            raise ValueError(f"request {request_id} belongs to {self._owner[request_id]}, not {llm}")
        current = self._tokens.get(request_id, 0)
        needed = self.growth(llm, current, n_tokens)
        if needed > self.free_blocks:
            raise InsufficientBlocks('pool', llm, needed, self.free_blocks)
        if enforce_quota and self.used[llm] + needed > self.quotas[llm]:
            raise InsufficientBlocks('quota', llm, needed, max(0, self.quotas[llm] - self.used[llm]))

        table = self._tables.setdefault(request_id, [])
        self._owner[request_id] = llm
        self._tokens[request_id] = current + n_tokens
        remaining = needed
        while remaining:
            extent = self._free[0]
            take = min(remaining, len(extent))
            table.append(range(extent.start, extent.start + take))
            if take == len(extent):
                self._free.pop(0)
            else:
                self._free[0] = range(extent.start + take, extent.stop)
            remaining -= take
        self.free_blocks -= needed
        self.used[llm] += needed
        return Allocation(request_id, llm, needed, n_tokens)

    def free(self, request_id: int) -> int:
        """
        Return every block of ``request_id`` to the pool.

        Raises:
            DoubleFreeError: the request was freed before.
            UnknownRequestError: the request never allocated.
        """
        if request_id in self._released:
            raise DoubleFreeError(f"request {request_id} was already freed")
        if request_id not in self._tables:
            raise UnknownRequestError(f"request {request_id} holds no blocks")
        table = self._tables.pop(request_id)
        llm = self._owner.pop(request_id)
        self._tokens.pop(request_id)
        self._released.add(request_id)
        self._release_order.append(request_id)
        if len(self._release_order) > self.released_window:
            self._released.discard(self._release_order.popleft())
        freed = sum(len(extent) for extent in table)
        self._free = _merge(self._free + table)
        self.free_blocks += freed
        self.used[llm] -= freed
        return freed

    def holds(self, request_id: int) -> bool:
        return request_id in self._tables

    def tokens_of(self, request_id: int) -> int:
        return self._tokens.get(request_id, 0)

    def blocks_of(self, request_id: int) -> int:
        return sum(len(extent) for extent in self._tables.get(request_id, []))

    # Time accounting

    def advance(self, now: float) -> None:
        """Accumulate block-time up to ``now`` (seconds)."""
        elapsed = now - self._clock
        if elapsed < 0:
            raise ValueError(f"time went backwards: {now} < {self._clock}")
        if elapsed:
            for name, used in self.used.items():
                self._area[name] += used * elapsed
                self._period_area[name] += used * elapsed
            self._clock = now

    def average_used(self, llm: str, horizon: Optional[float] = None) -> float:
        """Time-averaged blocks held by ``llm`` since time 0."""
        span = horizon if horizon is not None else self._clock
        return self._area[llm] / span if span > 0 else 0.0

    def period_utilization(self) -> Dict[str, float]:
        """Time-averaged used/quota per LLM since the current period started."""
        span = self._clock - self._period_start
        result = {}
        for name in self.specs:
            quota = self.quotas[name]
            if span <= 0:
                mean_used = self.used[name]
            else:
                mean_used = self._period_area[name] / span
            if quota <= 0:
                result[name] = 1.0 if mean_used > 0 else 0.0
            else:
                result[name] = min(1.0, mean_used / quota)
        return result

    def start_period(self) -> None:
        self._period_start = self._clock
        self._period_area = {name: 0.0 for name in self.specs}

    def adapt(self, floor_fraction: Optional[float] = None, **marks) -> bool:
        """
        Rebalance quotas from this period's utilization and open a new period.

        Returns True when any quota changed.
        """
        floor_fraction = floor_fraction if floor_fraction is not None else _defaults().get('quota_floor', 0.02)
        utilization = self.period_utilization()
        floor = min(int(floor_fraction * self.total_blocks), min(self.quotas.values(), default=0))
        new = adapt_quota(utilization, self.quotas, floor=floor, **marks)
        for name in self.specs:
            self.history.append({'time_s': self._clock, 'llm': name, 'quota': self.quotas[name],
                                 'used': self.used[name], 'utilization': utilization[name]})
        self.start_period()
        if new == self.quotas:
            return False
        self.quotas = new
        return True

    # Introspection

    def snapshot(self) -> Dict:
        return {
            'total_blocks': self.total_blocks,
            'free_blocks': self.free_blocks,
            'used': dict(self.used),
            'quotas': dict(self.quotas),
        }

    def check_invariants(self) -> None:
        """Raise AssertionError when blocks leak, double up or drift from the counters."""
        owned = [extent for table in self._tables.values() for extent in table]
        extents = sorted(owned + self._free, key=lambda r: r.start)
        position = 0
        for extent in extents:
            assert extent.start >= position, f"block {extent.start} owned twice"
            position = extent.stop
        assert sum(len(e) for e in extents) == self.total_blocks, "blocks leaked"
        assert sum(len(e) for e in self._free) == self.free_blocks, "free counter drifted"
        assert sum(self.used.values()) + self.free_blocks == self.total_blocks, "conservation broken"
        for name in self.specs:
            held = sum(len(e) for rid, table in self._tables.items()
                       if self._owner[rid] == name for e in table)
            assert held == self.used[name], f"{name} used counter drifted"


def _merge(extents: List[range]) -> List[range]:
    merged: List[range] = []
    for extent in sorted(extents, key=lambda r: r.start):
        if merged and merged[-1].stop == extent.start:
            merged[-1] = range(merged[-1].start, extent.stop)
        else:
            merged.append(extent)
    return merged
