"""
Unified KV-cache memory: partition layout, allocations and allocation errors.
"""
from dataclasses import dataclass
from typing import Iterable, NamedTuple

from apps.cost_model.domain import LLMSpec


class InsufficientBlocks(ValueError):
    """
    An allocation that cannot be served.

    ``reason`` is ``'pool'`` when the shared pool is exhausted and ``'quota'``
    when the LLM's own token-block quota is.
    """

    def __init__(self, reason: str, llm: str, needed: int, available: int):
        self.reason = reason
        self.llm = llm
        self.needed = needed
        self.available = available
        super().__init__(f"{llm}: need {needed} blocks, {reason} has {available}")


class UnknownRequestError(KeyError):
    pass


class DoubleFreeError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryLayout:
    """Weights, activation reserve and KV cache of one mesh; they sum to its memory."""

    total_bytes: int
    weights_bytes: int
    activation_reserve_bytes: int
    kv_bytes: int

    def __post_init__(self):
        if min(self.weights_bytes, self.activation_reserve_bytes, self.kv_bytes) < 0:
            raise ValueError(f"memory partitions must be non-negative: {self}")
        if self.weights_bytes + self.activation_reserve_bytes + self.kv_bytes != self.total_bytes:
            raise ValueError(f"memory partitions do not add up to {self.total_bytes}")

    @classmethod
    def for_unit(cls, total_bytes: int, specs: Iterable[LLMSpec],
                 activation_reserve: float) -> 'MemoryLayout':
        """One weight replica per LLM; the KV cache takes whatever is left."""
        weights = sum(spec.weight_bytes for spec in specs)
        reserve = int(total_bytes * activation_reserve)
        kv = total_bytes - weights - reserve
        if kv < 0:
            raise ValueError(f"weights ({weights} bytes) and activations ({reserve} bytes) "
                             f"exceed mesh memory ({total_bytes} bytes)")
        return cls(total_bytes, weights, reserve, kv)


class Allocation(NamedTuple):
    request_id: int
    llm: str
    blocks: int
    tokens: int
