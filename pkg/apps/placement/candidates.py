"""
Parallel candidate generation.

For every LLM and every admissible tensor-parallel degree, pick the smallest
SM share whose estimated throughput covers the LLM's arrival rate.
"""
import logging
from typing import Dict, List, Mapping, Tuple

from apps.cost_model.domain import LLMSpec
from apps.cost_model.services import LatencyModel

from .domain import Cluster, InfeasiblePlacementError, ParallelCandidate, PlacementOptions

logger = logging.getLogger(__name__)


def usable_memory(cluster: Cluster, mesh_size: int, activation_reserve: float) -> float:
    """Bytes of a ``mesh_size`` mesh left after the activation reserve."""
    return mesh_size * cluster.gpu_memory_bytes * (1.0 - activation_reserve)


def memory_need(spec: LLMSpec, prompt_len: float, output_len: float) -> float:
    """Weights plus the KV cache of one mean request."""
    return spec.weight_bytes + spec.kv_bytes_per_token * (prompt_len + output_len)


def feasible_tp_degrees(spec: LLMSpec, lengths: Tuple[float, float], cluster: Cluster,
                        options: PlacementOptions) -> List[int]:
    need = memory_need(spec, *lengths)
    return [
        tp for tp in options.tp_degrees
        if tp <= cluster.gpus_per_node
        and need <= usable_memory(cluster, tp, options.activation_reserve)
    ]


def llm_parallel_candidates(llms: List[LLMSpec], rates: Mapping[str, float],
                            lengths: Mapping[str, Tuple[float, float]], model: LatencyModel,
                            cluster: Cluster,
                            options: PlacementOptions) -> Dict[str, List[ParallelCandidate]]:
    """
    One candidate per feasible tp degree for every LLM.

    SM shares are scanned in ascending order and the scan stops at the first
    share whose estimate is not saturated. When every share saturates, the
    largest share is kept and flagged ``saturated``.

    Raises:
        InfeasiblePlacementError: an LLM fits no mesh at any tp degree.
    """
    candidates = {}
    for spec in llms:
        prompt_len, output_len = lengths[spec.name]
        rate = rates.get(spec.name, 0.0)
        degrees = feasible_tp_degrees(spec, (prompt_len, output_len), cluster, options)
        if not degrees:
            raise InfeasiblePlacementError(
                f"{spec.name} needs {memory_need(spec, prompt_len, output_len) / 2**30:.1f} GiB "
                f"and fits no mesh of this cluster", llm=spec.name)

        per_llm = []
        for tp in degrees:
            if rate <= 0:
                per_llm.append(ParallelCandidate(tp, options.sm_list[0], 1, 0.0))
                continue
            kv_bytes = usable_memory(cluster, tp, options.activation_reserve) - spec.weight_bytes
            max_batch = max(1, min(options.max_batch,
                                   model.kv_capacity_batch(spec, kv_bytes, prompt_len + output_len)))
            chosen = None
            for num_sm in options.sm_list:
                estimate = model.estimate_throughput(spec, num_sm, tp, rate, gen_len=output_len,
                                                     prompt_len=prompt_len, max_batch=max_batch)
                chosen = ParallelCandidate(tp, num_sm, estimate.batch, estimate.throughput,
                                           saturated=estimate.saturated)
                if not estimate.saturated:
                    break
            per_llm.append(chosen)
            logger.debug(f"{spec.name} tp={tp}: sm={chosen.num_sm} batch={chosen.batch} "
                         f"tpt={chosen.est_tpt:.3f} saturated={chosen.saturated}")
        candidates[spec.name] = per_llm
    return candidates
