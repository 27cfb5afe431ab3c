"""
Workload domain types: length distributions, workload specs and requests.
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

DISTRIBUTION_KINDS = ('constant', 'lognormal', 'empirical')


class DistributionError(ValueError):
    """Raised for a malformed length-distribution descriptor."""


@dataclass(frozen=True)
class LengthDistribution:
    """
    Token-length distribution.

    ``constant`` uses ``value``; ``lognormal`` is parameterized by its mean and
    sigma (mu is fitted so the distribution mean equals ``mean``); ``empirical``
    samples the keys of ``histogram`` with weights given by its values.
    """

    kind: str
    value: Optional[int] = None
    mean: Optional[float] = None
    sigma: Optional[float] = None
    histogram: Tuple[Tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.kind not in DISTRIBUTION_KINDS:
            raise DistributionError(f"unknown distribution kind {self.kind!r}")
        if self.kind == 'constant' and (self.value is None or self.value < 1):
            raise DistributionError(f"constant distribution needs value >= 1, got {self.value}")
        if self.kind == 'lognormal':
            if self.mean is None or self.mean < 1:
                raise DistributionError(f"lognormal distribution needs mean >= 1, got {self.mean}")
            if self.sigma is None or self.sigma < 0:
                raise DistributionError(f"lognormal distribution needs sigma >= 0, got {self.sigma}")
        if self.kind == 'empirical':
            if not self.histogram:
                raise DistributionError("empirical distribution needs a non-empty histogram")
            if any(length < 1 or weight < 0 for length, weight in self.histogram):
                raise DistributionError("empirical histogram needs lengths >= 1 and weights >= 0")
            if sum(weight for _, weight in self.histogram) <= 0:
                raise DistributionError("empirical histogram weights sum to zero")

    @classmethod
    def constant(cls, value: int) -> 'LengthDistribution':
        return cls('constant', value=int(value))

    @classmethod
    def lognormal(cls, mean: float, sigma: float) -> 'LengthDistribution':
        return cls('lognormal', mean=float(mean), sigma=float(sigma))

    @classmethod
    def empirical(cls, histogram: Mapping[int, float]) -> 'LengthDistribution':
        return cls('empirical', histogram=tuple(sorted((int(k), float(v)) for k, v in histogram.items())))

    @classmethod
    def from_descriptor(cls, descriptor: Mapping) -> 'LengthDistribution':
        """Build from a config descriptor such as ``{"kind": "lognormal", "mean": 161, "sigma": 1.0}``."""
        if not isinstance(descriptor, Mapping) or 'kind' not in descriptor:
            raise DistributionError(f"malformed length distribution {descriptor!r}")
        kind = descriptor['kind']
        try:
            if kind == 'constant':
                return cls.constant(descriptor['value'])
            if kind == 'lognormal':
                return cls.lognormal(descriptor['mean'], descriptor.get('sigma', 1.0))
            if kind == 'empirical':
                return cls.empirical(descriptor['histogram'])
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, DistributionError):
                raise
            raise DistributionError(f"malformed {kind} distribution {dict(descriptor)!r}: {e}") from e
        raise DistributionError(f"unknown distribution kind {kind!r}")

    def to_descriptor(self) -> Dict:
        if self.kind == 'constant':
            return {'kind': 'constant', 'value': self.value}
        if self.kind == 'lognormal':
            return {'kind': 'lognormal', 'mean': self.mean, 'sigma': self.sigma}
        return {'kind': 'empirical', 'histogram': {str(k): v for k, v in self.histogram}}

    @property
    def expected(self) -> float:
        """Distribution mean before integer rounding."""
        if self.kind == 'constant':
            return float(self.value)
        if self.kind == 'lognormal':
            return float(self.mean)
        lengths = np.array([k for k, _ in self.histogram], dtype=float)
        weights = np.array([w for _, w in self.histogram], dtype=float)
        return float(np.dot(lengths, weights) / weights.sum())


@dataclass(frozen=True)
class WorkloadSpec:
    """Per-LLM rates, horizon, length distributions and seed."""

    llm_rates: Dict[str, float]
    horizon_s: float
    prompt_len_dist: LengthDistribution
    output_len_dist: LengthDistribution
    seed: int = 0
    per_llm: Dict[str, Tuple[LengthDistribution, LengthDistribution]] = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon_s <= 0:
            raise ValueError(f"horizon_s must be positive, got {self.horizon_s}")
        for name, rate in self.llm_rates.items():
            if rate < 0:
                raise ValueError(f"rate for {name} must be >= 0, got {rate}")

    def lengths_for(self, llm: str) -> Tuple[LengthDistribution, LengthDistribution]:
        return self.per_llm.get(llm, (self.prompt_len_dist, self.output_len_dist))

    def mean_lengths(self, llm: str) -> Tuple[float, float]:
        prompt, output = self.lengths_for(llm)
        return prompt.expected, output.expected


@dataclass(frozen=True)
class Request:
    id: int
    llm: str
    arrival_s: float
    prompt_len: int
    output_len: int
