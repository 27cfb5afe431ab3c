"""
End-to-end pipeline: config -> workload -> placement -> simulation -> metrics.

Management commands are thin wrappers around these functions, and the
acceptance tests drive them directly.
"""
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import pandas as pd
from django.conf import settings

from apps.cost_model.domain import LLMSpec, LatencyProfile
from apps.cost_model.services import LatencyModel
from apps.metrics.domain import MetricsReport
from apps.metrics.services import ReferenceLatency, build_report, write_report
from apps.placement.domain import (
    Cluster,
    PlacementOptions,
    PlacementResult,
    SearchSpaceTooLarge,
)
from apps.placement.services import PlacementContext, place, placement_gap
from apps.scheduler.domain import SchedulerConfig
from apps.scheduler.services import fairness_gap, resource_usage
from apps.sim_engine.domain import SimulationConfig, SimulationResult
from apps.sim_engine.services import run, write_decisions, write_pool_stats, write_records
from apps.workload.domain import Request, WorkloadSpec
from apps.workload.services import WorkloadGenerator, default_output_dist, default_prompt_dist, gen_rates

from .domain import ConfigError, ExperimentConfig, table1_catalog
from .serializers import TABLE1, ExperimentConfigSerializer

logger = logging.getLogger(__name__)

GB = 10 ** 9
DEFAULT_RATE_SCALES = (0.5, 1.0, 2.0, 4.0)


def _defaults() -> Dict:
    return getattr(settings, 'MUXSIM_DEFAULTS', {})


# Configuration

def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Read and validate an experiment JSON file.

    Raises:
        ConfigError: unreadable file, malformed JSON or schema violations.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    return parse_config(data)


def _flatten_errors(errors, prefix: str = '') -> List[str]:
    if isinstance(errors, dict):
        flat = []
        for key, value in errors.items():
            flat.extend(_flatten_errors(value, f"{prefix}{key}." if key != 'non_field_errors' else prefix))
        return flat
    if isinstance(errors, list):
        flat = []
        for index, value in enumerate(errors):
            if isinstance(value, (dict, list)):
                flat.extend(_flatten_errors(value, f"{prefix}{index}."))
            else:
                flat.append(f"{prefix.rstrip('.') or 'config'}: {value}")
        return flat
    return [f"{prefix.rstrip('.') or 'config'}: {errors}"]


def parse_config(data: Mapping) -> ExperimentConfig:
    """
    Raises:
        ConfigError: the data does not match the schema or builds invalid objects.
    """
    serializer = ExperimentConfigSerializer(data=data)
    if not serializer.is_valid():
        raise ConfigError("invalid config: " + '; '.join(_flatten_errors(serializer.errors)),
                          serializer.errors)
    try:
        return _resolve(serializer.validated_data)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid config: {e}") from e


def _build_llms(validated: Mapping, bytes_per_element: Optional[int]) -> List[LLMSpec]:
    llms = validated.get('llms', TABLE1)
    if llms == TABLE1:
        return table1_catalog(bytes_per_element)
    return [LLMSpec.from_params(bytes_per_element=bytes_per_element, **dict(entry)) for entry in llms]


def _build_workload(section: Mapping, names: List[str], seed: int) -> WorkloadSpec:
    defaults = _defaults()
    if 'rates' in section:
        unknown = sorted(set(section['rates']) - set(names))
        if unknown:
            raise ConfigError(f"workload.rates names unknown LLMs: {', '.join(unknown)}")
        rates = {name: float(section['rates'].get(name, 0.0)) for name in names}
    else:
        generated = gen_rates(len(names), section.get('alpha', defaults.get('alpha', 0.9)),
                              section.get('max_rate', defaults.get('max_rate', 20.0)))
        rates = dict(zip(names, generated))
    scale = section.get('rate_scale', 1.0)
    rates = {name: rate * scale for name, rate in rates.items()}

    prompt = section['prompt_len']['distribution'] if 'prompt_len' in section else default_prompt_dist()
    output = section['output_len']['distribution'] if 'output_len' in section else default_output_dist()
    per_llm = {}
    for name, lengths in section.get('per_llm', {}).items():
        if name not in names:
            raise ConfigError(f"workload.per_llm names unknown LLM {name}")
        per_llm[name] = (
            lengths['prompt_len']['distribution'] if 'prompt_len' in lengths else prompt,
            lengths['output_len']['distribution'] if 'output_len' in lengths else output,
        )
    return WorkloadSpec(rates, section.get('horizon_s', defaults.get('horizon_s', 600.0)),
                        prompt, output, seed=seed, per_llm=per_llm)


def _resolve(validated: Mapping) -> ExperimentConfig:
    defaults = _defaults()
    seed = validated.get('seed', 0)
    cluster_section = validated['cluster']
    cluster = Cluster(cluster_section['num_nodes'], cluster_section['gpus_per_node'],
                      int(cluster_section['gpu_memory_gb'] * GB))
    kv = validated.get('kv', {})
    llms = _build_llms(validated, kv.get('bytes_per_element'))
    names = [spec.name for spec in llms]
    workload = _build_workload(validated.get('workload', {}), names, seed)
    profile = LatencyProfile.from_settings(**validated.get('profile', {}))

    placement_section = dict(validated.get('placement', {}))
    backend = placement_section.pop('backend', 'greedy')
    gen_len = placement_section.pop('gen_len', None)
    prompt_len = placement_section.pop('prompt_len', None)
    options = PlacementOptions.from_settings(**placement_section)
    planning_lengths = {}
    if gen_len is not None or prompt_len is not None:
        for name in names:
            mean_prompt, mean_output = workload.mean_lengths(name)
            planning_lengths[name] = (prompt_len or mean_prompt, gen_len or mean_output)

    scheduler_section = dict(validated.get('scheduler', {}))
    fairness_epsilon = scheduler_section.pop('fairness_epsilon', defaults.get('fairness_epsilon', 0.15))
    scheduler_section.setdefault('decode_sm', profile.sm_saturation)
    scheduler = SchedulerConfig.from_settings(**scheduler_section)

    simulation_section = validated.get('simulation', {})
    simulation = SimulationConfig.from_settings(
        scheduler=scheduler.kind,
        interference=simulation_section.get('interference'),
        debug_checks=simulation_section.get('debug_checks'),
        record_decisions=simulation_section.get('record_decisions'),
        block_tokens=kv.get('block_tokens'),
        activation_reserve=options.activation_reserve,
        quota_floor=kv.get('quota_floor'),
        low_mark=kv.get('low_mark'),
        high_mark=kv.get('high_mark'),
        quota_step=kv.get('step'),
        adapt_period_s=kv.get('adapt_period_s'),
        adapt_quota=kv.get('adapt'),
    )
    ablation = validated.get('ablation', {})
    return ExperimentConfig(
        seed=seed,
        cluster=cluster,
        llms=llms,
        workload=workload,
        profile=profile,
        placement=options,
        backend=backend,
        scheduler=scheduler,
        simulation=simulation,
        fairness_epsilon=fairness_epsilon,
        slo_scales=list(validated.get('metrics', {}).get('slo_scales', defaults.get('slo_scales', [1, 2, 4, 8, 16]))),
        rate_scales=list(ablation.get('rate_scales', DEFAULT_RATE_SCALES)),
        ablation_schedulers=list(ablation.get('schedulers', ['adbs', 'round_robin', 'fcfs'])),
        planning_lengths=planning_lengths,
    )


# Pipeline

def generate_trace(config: ExperimentConfig, workload: Optional[WorkloadSpec] = None) -> List[Request]:
    return WorkloadGenerator(workload or config.workload).generate()


def mean_lengths(config: ExperimentConfig, workload: Optional[WorkloadSpec] = None) -> Dict[str, Tuple[float, float]]:
    workload = workload or config.workload
    return {name: workload.mean_lengths(name) for name in config.names}


def planning_context(config: ExperimentConfig, workload: Optional[WorkloadSpec] = None) -> PlacementContext:
    workload = workload or config.workload
    lengths = config.planning_lengths or mean_lengths(config, workload)
    return PlacementContext(config.cluster, config.llms, workload.llm_rates, lengths,
                            LatencyModel(config.profile), config.placement)


def plan(config: ExperimentConfig, backend: Optional[str] = None,
         workload: Optional[WorkloadSpec] = None) -> PlacementResult:
    """
    Raises:
        InfeasiblePlacementError: no mesh group can host the LLMs.
        SearchSpaceTooLarge: the exact backend exceeds its guard on every group.
    """
    return place(planning_context(config, workload), backend or config.backend)


def compare_backends(config: ExperimentConfig, workload: Optional[WorkloadSpec] = None
                     ) -> Tuple[PlacementResult, Optional[PlacementResult], Optional[float]]:
    """Greedy placement, exact placement and the greedy gap; exact is ``None`` past the guard."""
    context = planning_context(config, workload)
    greedy = place(context, 'greedy')
    try:
        exact = place(context, 'ilp')
    except SearchSpaceTooLarge as e:
        logger.info(f"Exact placement skipped: {e}")
        return greedy, None, None
    return greedy, exact, placement_gap(greedy, exact)


def simulate(config: ExperimentConfig, placement: PlacementResult, trace: List[Request],
             scheduler: Optional[str] = None,
             workload: Optional[WorkloadSpec] = None) -> Tuple[SimulationResult, MetricsReport]:
    """
    Run the simulator and score it.

    Raises:
        TracePlacementMismatch: the trace names an LLM the placement lacks.
    """
    workload = workload or config.workload
    kind = scheduler or config.scheduler.kind
    model = LatencyModel(config.profile)
    lengths = mean_lengths(config, workload)
    result = run(placement, trace, config.cluster, scheduler_kind=kind, model=model,
                 config=config.simulation, scheduler_config=replace(config.scheduler, kind=kind),
                 horizon_s=workload.horizon_s, rates=workload.llm_rates, lengths=lengths)

    placed = {spec.name: spec for unit in placement.units for spec in (p.spec for p in unit.llms)}
    rates = {name: workload.llm_rates.get(name, 0.0) for name in placed}
    usage = resource_usage(result.average_blocks(), rates, placed,
                           {name: lengths.get(name, (0.0, 0.0)) for name in placed},
                           config.simulation.block_tokens)
    report = build_report(result, rates, ReferenceLatency.for_placement(placement, model),
                          config.slo_scales, usage, fairness_gap(usage, rates))
    return result, report


def write_simulation(result: SimulationResult, report: MetricsReport, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records(result.records, out_dir / 'records.csv')
    write_report(report, out_dir / 'metrics.json')
    write_pool_stats(result, out_dir / 'pool_stats.json')
    if result.decisions:
        write_decisions(result, out_dir / 'decisions.jsonl')
    return out_dir


def write_placement(placement: PlacementResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(placement.to_dict(), f, indent=2, sort_keys=True)
    return path


def read_placement(path: Union[str, Path]) -> PlacementResult:
    """
    Raises:
        ConfigError: unreadable or malformed placement file.
    """
    path = Path(path)
    try:
        return PlacementResult.from_dict(json.loads(path.read_text()))
    except FileNotFoundError:
        raise ConfigError(f"placement file not found: {path}")
    except (json.JSONDecodeError, ValueError) as e:
        raise ConfigError(f"placement file {path} is malformed: {e}")


def ablate(config: ExperimentConfig) -> pd.DataFrame:
    """
    Sweep rate scales and schedulers.

    Each rate point is planned once with the configured backend and simulated
    with every scheduler. Rows carry throughput, SLO attainment, fairness, the
    greedy and exact placement objectives (exact only within the ILP guard)
    and, per LLM, its share of KV blocks and its normalized usage.
    """
    rows = []
    for scale in config.rate_scales:
        workload = replace(config.workload,
                           llm_rates={name: rate * scale for name, rate in config.workload.llm_rates.items()})
        trace = generate_trace(config, workload)
        placement = plan(config, workload=workload)
        greedy, exact, gap = compare_backends(config, workload)
        for kind in config.ablation_schedulers:
            result, report = simulate(config, placement, trace, kind, workload)
            blocks = result.average_blocks()
            total_blocks = sum(blocks.values())
            row = {
                'rate_scale': scale,
                'scheduler': kind,
                'total_rate': sum(workload.llm_rates.values()),
                'requests': report.total_requests,
                'finished': report.finished_requests,
                'aggregated_throughput': report.aggregated_throughput,
                'p99_latency_s': report.p99_latency_s,
                'fairness_gap': report.fairness_gap,
                'greedy_objective': greedy.objective,
                'ilp_objective': exact.objective if exact is not None else None,
                'placement_gap': gap,
            }
            for key, attainment in report.slo_attainment.items():
                row[f"slo@{key}"] = attainment
            for name in sorted(blocks):
                row[f"share:{name}"] = blocks[name] / total_blocks if total_blocks > 0 else 0.0
                row[f"usage:{name}"] = report.token_block_usage.get(name, 0.0)
            rows.append(row)
            logger.info(f"rate x{scale:g} {kind}: {report.aggregated_throughput:.3f} req/s")
    return pd.DataFrame(rows)


def write_sweep(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep='', float_format='%.6f')
    return path
