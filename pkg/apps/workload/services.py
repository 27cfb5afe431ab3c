"""
Synthetic workload generation.

Per-LLM rates follow a rank-based power law, arrivals are Poisson, and prompt
and output lengths are drawn from configurable distributions. All randomness
comes from one experiment seed split into named substreams, so adding a new
consumer never perturbs the others.
"""
import logging
import math
import zlib
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from django.conf import settings

from .domain import LengthDistribution, Request, WorkloadSpec

logger = logging.getLogger(__name__)

TOP_SHARE_FRACTION = 0.2


def named_rng(seed: int, *names: str) -> np.random.Generator:
    """Independent generator for the substream ``names`` of ``seed``."""
    spawn_key = tuple(zlib.crc32(name.encode('utf-8')) for name in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=spawn_key))


def gen_rates(n_llms: int, alpha: float, max_rate: float) -> List[float]:
    """Rate of the LLM ranked i (1-based) is ``max_rate * i ** -alpha``."""
    if n_llms < 1:
        raise ValueError(f"n_llms must be >= 1, got {n_llms}")
    if max_rate <= 0:
        raise ValueError(f"max_rate must be positive, got {max_rate}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    ranks = np.arange(1, n_llms + 1, dtype=float)
    rates = max_rate * ranks ** (-alpha)
    return [float(r) for r in rates]


def top_share(rates: Sequence[float], fraction: float = TOP_SHARE_FRACTION) -> float:
    """Share of the total rate carried by the top ``fraction`` of LLMs."""
    ordered = sorted(rates, reverse=True)
    total = sum(ordered)
    if total <= 0:
        return 0.0
    k = max(1, math.ceil(fraction * len(ordered) - 1e-9))
    return sum(ordered[:k]) / total


def gen_arrivals(rate: float, horizon_s: float, rng: np.random.Generator) -> List[float]:
    """Sorted Poisson arrival times in [0, horizon_s)."""
    if rate < 0:
        raise ValueError(f"rate must be >= 0, got {rate}")
    if rate == 0 or horizon_s <= 0:
        return []
    expected = rate * horizon_s
    chunk = int(expected + 6 * math.sqrt(expected) + 16)
    times = np.cumsum(rng.exponential(1.0 / rate, size=chunk))
    while times[-1] < horizon_s:
        more = np.cumsum(rng.exponential(1.0 / rate, size=chunk)) + times[-1]
        times = np.concatenate([times, more])
    return times[times < horizon_s].tolist()


def sample_lengths(dist: LengthDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` integer lengths (all >= 1) from ``dist``."""
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if dist.kind == 'constant':
        return np.full(n, dist.value, dtype=np.int64)
    if dist.kind == 'lognormal':
        if dist.sigma == 0:
            return np.full(n, max(1, int(round(dist.mean))), dtype=np.int64)
        mu = math.log(dist.mean) - dist.sigma ** 2 / 2.0
        draws = rng.lognormal(mu, dist.sigma, size=n)
        return np.maximum(1, np.rint(draws)).astype(np.int64)
    lengths = np.array([k for k, _ in dist.histogram], dtype=np.int64)
    weights = np.array([w for _, w in dist.histogram], dtype=float)
    return rng.choice(lengths, size=n, p=weights / weights.sum())


def default_prompt_dist(sigma: Optional[float] = None) -> LengthDistribution:
    defaults = getattr(settings, 'MUXSIM_DEFAULTS', {})
    return LengthDistribution.lognormal(
        defaults.get('mean_prompt_len', 161),
        sigma if sigma is not None else defaults.get('length_sigma', 1.0),
    )


def default_output_dist(sigma: Optional[float] = None) -> LengthDistribution:
    defaults = getattr(settings, 'MUXSIM_DEFAULTS', {})
    return LengthDistribution.lognormal(
        defaults.get('mean_output_len', 338),
        sigma if sigma is not None else defaults.get('length_sigma', 1.0),
    )


class WorkloadGenerator:
    """Builds a request trace from a WorkloadSpec."""

    def __init__(self, spec: WorkloadSpec):
        self.spec = spec

    def generate(self) -> List[Request]:
        """All requests of all LLMs, ordered by arrival then LLM order."""
        frames = []
        for rank, (llm, rate) in enumerate(self.spec.llm_rates.items()):
            arrivals = gen_arrivals(rate, self.spec.horizon_s,
                                    named_rng(self.spec.seed, 'arrivals', llm))
            n = len(arrivals)
            prompt_dist, output_dist = self.spec.lengths_for(llm)
            frames.append(pd.DataFrame({
                'llm': [llm] * n,
                'rank': rank,
                'arrival_s': arrivals,
                'prompt_len': sample_lengths(prompt_dist, n, named_rng(self.spec.seed, 'prompt', llm)),
                'output_len': sample_lengths(output_dist, n, named_rng(self.spec.seed, 'output', llm)),
            }))
            logger.debug(f"{llm}: {n} requests at {rate:.3f} req/s")

        if not frames:
            return []
        df = pd.concat(frames, ignore_index=True)
        if df.empty:
            return []
        df = df.sort_values(['arrival_s', 'rank'], kind='mergesort').reset_index(drop=True)
        logger.info(f"Generated {len(df)} requests for {len(self.spec.llm_rates)} LLMs "
                    f"over {self.spec.horizon_s:g}s")
        return [
            Request(id=i, llm=row.llm, arrival_s=float(row.arrival_s),
                    prompt_len=int(row.prompt_len), output_len=int(row.output_len))
            for i, row in enumerate(df.itertuples(index=False))
        ]


def rate_table(rates: Dict[str, float]) -> pd.DataFrame:
    """Rates with their share of the total, ordered by rate."""
    df = pd.DataFrame({'llm': list(rates), 'rate': list(rates.values())})
    total = df['rate'].sum()
    df['share'] = df['rate'] / total if total > 0 else 0.0
    return df.sort_values('rate', ascending=False, kind='mergesort').reset_index(drop=True)
