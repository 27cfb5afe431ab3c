"""
LLM placement over a cluster.

The outer loop walks every mesh group; for each group a backend assigns LLMs
to meshes, and the group with the best score wins. Unit throughput F(b, W_b)
comes from the analytical estimator in apps.cost_model.
"""
import itertools
import logging
import math
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from apps.cost_model.domain import LLMSpec, PeerLoad
from apps.cost_model.services import LatencyModel
from apps.workload.domain import WorkloadSpec

from .branch_and_bound import AssignmentProblem, solve_branch_and_bound
from .candidates import llm_parallel_candidates, memory_need, usable_memory
from .domain import (
    Cluster,
    InfeasiblePlacementError,
    LLMUnit,
    ParallelCandidate,
    PlacedLLM,
    PlacementOptions,
    PlacementResult,
    SearchSpaceTooLarge,
)
from .meshes import MeshGroup, describe_group, enumerate_mesh_groups

logger = logging.getLogger(__name__)

BACKENDS = ('greedy', 'ilp', 'memory_greedy', 'spatial')
SM_TOLERANCE = 1e-9


class PlacementContext:
    """
    Everything a placement backend needs about one instance, plus caches.

    ``lengths`` maps each LLM to its mean (prompt_len, output_len).
    """

    def __init__(self, cluster: Cluster, llms: Sequence[LLMSpec], rates: Mapping[str, float],
                 lengths: Mapping[str, Tuple[float, float]], model: Optional[LatencyModel] = None,
                 options: Optional[PlacementOptions] = None):
        names = [spec.name for spec in llms]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate LLM names in {names}")
        missing = [name for name in names if name not in lengths]
        if missing:
            raise ValueError(f"no request lengths for {missing}")
        self.cluster = cluster
        self.llms = list(llms)
        self.specs = {spec.name: spec for spec in self.llms}
        self.order = {name: i for i, name in enumerate(names)}
        self.rates = {name: float(rates.get(name, 0.0)) for name in names}
        self.lengths = {name: (float(lengths[name][0]), float(lengths[name][1])) for name in names}
        self.model = model or LatencyModel()
        self.options = options or PlacementOptions.from_settings()
        self.candidates = llm_parallel_candidates(self.llms, self.rates, self.lengths,
                                                  self.model, cluster, self.options)
        self._unit_cache: Dict[Tuple[int, Tuple[str, ...]], float] = {}

    @classmethod
    def from_workload(cls, cluster: Cluster, llms: Sequence[LLMSpec], workload: WorkloadSpec,
                      model: Optional[LatencyModel] = None,
                      options: Optional[PlacementOptions] = None) -> 'PlacementContext':
        lengths = {spec.name: workload.mean_lengths(spec.name) for spec in llms}
        return cls(cluster, llms, workload.llm_rates, lengths, model, options)

    # Memory and SM bookkeeping

    def usable_memory(self, mesh_size: int) -> float:
        return usable_memory(self.cluster, mesh_size, self.options.activation_reserve)

    def memory_need(self, name: str) -> float:
        return memory_need(self.specs[name], *self.lengths[name])

    def candidate_for(self, name: str, mesh_size: int) -> Optional[ParallelCandidate]:
        """The candidate with the widest tp degree that fits in the mesh."""
        fitting = [c for c in self.candidates[name] if c.tp_degree <= mesh_size]
        return max(fitting, key=lambda c: c.tp_degree) if fitting else None

    def fits(self, names: Iterable[str], mesh_size: int) -> bool:
        names = list(names)
        chosen = [self.candidate_for(name, mesh_size) for name in names]
        if any(c is None for c in chosen):
            return False
        if sum(self.memory_need(name) for name in names) > self.usable_memory(mesh_size):
            return False
        return sum(c.num_sm for c in chosen) <= 1.0 + SM_TOLERANCE

    def free_memory(self, names: Iterable[str], mesh_size: int) -> float:
        return self.usable_memory(mesh_size) - sum(self.memory_need(name) for name in names)

    def demand(self, name: str) -> float:
        """Computation demand used to order LLMs: rate x tokens x model size."""
        prompt_len, output_len = self.lengths[name]
        return self.rates[name] * (prompt_len + output_len) * self.specs[name].size

    def by_demand(self) -> List[str]:
        return [spec.name for spec in sorted(self.llms, key=lambda s: -self.demand(s.name))]

    # Throughput

    def unit_throughput(self, names: Iterable[str], mesh_size: int) -> float:
        """
        F(b, W_b): estimated requests/s of the LLMs ``names`` sharing one mesh.

        Each LLM runs its own candidate while the others' stable prefill
        batches interleave with it; KV capacity is split by token demand.
        """
        key = (mesh_size, tuple(sorted(names, key=self.order.__getitem__)))
        if key in self._unit_cache:
            return self._unit_cache[key]
        names = key[1]
        if not names:
            return 0.0

        chosen = {name: self.candidate_for(name, mesh_size) for name in names}
        if any(c is None for c in chosen.values()):
            raise InfeasiblePlacementError(f"no candidate fits a {mesh_size}-GPU mesh for {names}")
        kv_bytes = self.usable_memory(mesh_size) - sum(self.specs[n].weight_bytes for n in names)
        token_demand = {
            name: self.rates[name] * self.specs[name].kv_bytes_per_token * sum(self.lengths[name])
            for name in names
        }
        total_demand = sum(token_demand.values())

        total = 0.0
        for name in names:
            rate = self.rates[name]
            if rate <= 0:
                continue
            spec = self.specs[name]
            candidate = chosen[name]
            prompt_len, output_len = self.lengths[name]
            share = token_demand[name] / total_demand if total_demand > 0 else 1.0 / len(names)
            kv_cap = self.model.kv_capacity_batch(spec, kv_bytes * share, prompt_len + output_len)
            peers = [PeerLoad(self.specs[other], chosen[other].batch)
                     for other in names if other != name and self.rates[other] > 0]
            estimate = self.model.estimate_throughput(
                spec, candidate.num_sm, candidate.tp_degree, rate, peers=peers,
                gen_len=output_len, prompt_len=prompt_len,
                max_batch=max(1, min(self.options.max_batch, kv_cap)),
            )
            total += estimate.throughput
        self._unit_cache[key] = total
        return total

    def standalone_value(self, name: str, mesh_size: int) -> float:
        """
        The linear objective coefficient of ``name`` on a mesh of ``mesh_size`` GPUs:
        its arrival rate times its standalone throughput there.
        """
        return self.rates[name] * self.candidate_for(name, mesh_size).est_tpt

    # Results

    def build_result(self, group: MeshGroup, assignment: Mapping[int, List[str]],
                     backend: str) -> PlacementResult:
        units = []
        for index, mesh in enumerate(group):
            names = sorted(assignment.get(index, []), key=self.order.__getitem__)
            if not names:
                continue
            units.append(LLMUnit(mesh, [PlacedLLM(self.specs[n], self.candidate_for(n, mesh.size))
                                        for n in names]))
        est_total = sum(self.unit_throughput(unit.names, unit.mesh.size) for unit in units)
        objective = sum(self.standalone_value(n, unit.mesh.size)
                        for unit in units for n in unit.names)
        return PlacementResult(units=units, est_total_tpt=est_total, objective=objective,
                               backend=backend)


def _assignment_from_vector(vector: Sequence[int], names: Sequence[str]) -> Dict[int, List[str]]:
    assignment: Dict[int, List[str]] = {}
    for name, mesh_index in zip(names, vector):
        assignment.setdefault(mesh_index, []).append(name)
    return assignment


def greedy_place(context: PlacementContext, group: MeshGroup) -> PlacementResult:
    """
    Place LLMs in descending computation demand, each on the mesh where it
    raises unit throughput the most. Ties go to the lowest mesh index.

    Raises:
        InfeasiblePlacementError: some LLM fits on no mesh of the group.
    """
    assignment: Dict[int, List[str]] = {i: [] for i in range(len(group))}
    for name in context.by_demand():
        best_index, best_delta = None, -math.inf
        for index, mesh in enumerate(group):
            current = assignment[index]
            if not context.fits(current + [name], mesh.size):
                continue
            delta = (context.unit_throughput(current + [name], mesh.size)
                     - context.unit_throughput(current, mesh.size))
            if delta > best_delta:
                best_index, best_delta = index, delta
        if best_index is None:
            raise InfeasiblePlacementError(f"{name} fits on no mesh of group {describe_group(group)}",
                                           llm=name)
        assignment[best_index].append(name)
    return context.build_result(group, assignment, 'greedy')


def assignment_problem(context: PlacementContext, group: MeshGroup) -> AssignmentProblem:
    """Precompute value, SM and memory coefficients for every (LLM, mesh) pair."""
    n, m = len(context.llms), len(group)
    value = [[0.0] * m for _ in range(n)]
    sm = [[0.0] * m for _ in range(n)]
    mem = [[0.0] * m for _ in range(n)]
    allowed = [[False] * m for _ in range(n)]
    for i, spec in enumerate(context.llms):
        for j, mesh in enumerate(group):
            candidate = context.candidate_for(spec.name, mesh.size)
            if candidate is None:
                continue
            allowed[i][j] = True
            value[i][j] = context.standalone_value(spec.name, mesh.size)
            sm[i][j] = candidate.num_sm
            mem[i][j] = context.memory_need(spec.name)
    return AssignmentProblem(
        value=value, sm=sm, mem=mem,
        sm_cap=[1.0] * m,
        mem_cap=[context.usable_memory(mesh.size) for mesh in group],
        allowed=allowed,
    )


def ilp_place(context: PlacementContext, group: MeshGroup) -> PlacementResult:
    """
    Exact assignment maximizing the rate-weighted standalone throughput.

    Raises:
        SearchSpaceTooLarge: more binary variables than ``ilp_max_dims``.
        InfeasiblePlacementError: the constraints admit no assignment.
    """
    dims = len(context.llms) * len(group)
    if dims > context.options.ilp_max_dims:
        raise SearchSpaceTooLarge(
            f"{len(context.llms)} LLMs x {len(group)} meshes = {dims} binary variables "
            f"exceeds ilp_max_dims={context.options.ilp_max_dims}")
    problem = assignment_problem(context, group)
    solution = solve_branch_and_bound(problem)
    if not solution.feasible:
        raise InfeasiblePlacementError(f"no feasible assignment on group {describe_group(group)}")
    names = [spec.name for spec in context.llms]
    return context.build_result(group, _assignment_from_vector(solution.assignment, names), 'ilp')


def memory_greedy_place(context: PlacementContext, group: MeshGroup) -> PlacementResult:
    """Busiest LLM first, each onto the fitting mesh with the most free memory."""
    assignment: Dict[int, List[str]] = {i: [] for i in range(len(group))}
    for spec in sorted(context.llms, key=lambda s: -context.rates[s.name]):
        name = spec.name
        best_index, best_free = None, -math.inf
        for index, mesh in enumerate(group):
            current = assignment[index]
            if not context.fits(current + [name], mesh.size):
                continue
            free = context.free_memory(current, mesh.size)
            if free > best_free:
                best_index, best_free = index, free
        if best_index is None:
            raise InfeasiblePlacementError(f"{name} fits on no mesh of group {describe_group(group)}",
                                           llm=name)
        assignment[best_index].append(name)
    return context.build_result(group, assignment, 'memory_greedy')


def spatial_place(context: PlacementContext, group: MeshGroup) -> PlacementResult:
    """One LLM per mesh, no colocation."""
    if len(group) < len(context.llms):
        raise InfeasiblePlacementError(
            f"spatial partitioning needs {len(context.llms)} meshes, group has {len(group)}")
    assignment: Dict[int, List[str]] = {}
    for name in context.by_demand():
        best_index, best_tpt = None, -math.inf
        for index, mesh in enumerate(group):
            if index in assignment or not context.fits([name], mesh.size):
                continue
            tpt = context.unit_throughput([name], mesh.size)
            if tpt > best_tpt:
                best_index, best_tpt = index, tpt
        if best_index is None:
            raise InfeasiblePlacementError(f"{name} has no free mesh in group {describe_group(group)}",
                                           llm=name)
        assignment[best_index] = [name]
    return context.build_result(group, assignment, 'spatial')


def exhaustive_place(context: PlacementContext, group: MeshGroup) -> PlacementResult:
    """Best Σ F over every feasible assignment; exponential, for checking the heuristics."""
    names = [spec.name for spec in context.llms]
    best_vector, best_score = None, -math.inf
    for vector in itertools.product(range(len(group)), repeat=len(names)):
        assignment = _assignment_from_vector(vector, names)
        if not all(context.fits(members, group[index].size)
                   for index, members in assignment.items()):
            continue
        score = sum(context.unit_throughput(members, group[index].size)
                    for index, members in assignment.items())
        if score > best_score + SM_TOLERANCE:
            best_vector, best_score = vector, score
    if best_vector is None:
        raise InfeasiblePlacementError(f"no feasible assignment on group {describe_group(group)}")
    return context.build_result(group, _assignment_from_vector(best_vector, names), 'exhaustive')


BACKEND_SOLVERS: Dict[str, Callable[[PlacementContext, MeshGroup], PlacementResult]] = {
    'greedy': greedy_place,
    'ilp': ilp_place,
    'memory_greedy': memory_greedy_place,
    'spatial': spatial_place,
    'exhaustive': exhaustive_place,
}


def _score(result: PlacementResult, backend: str) -> float:
    return result.objective if backend == 'ilp' else result.est_total_tpt


def place(context: PlacementContext, backend: str = 'greedy',
          groups: Optional[List[MeshGroup]] = None) -> PlacementResult:
    """
    Best placement over all mesh groups.

    Greedy and the baselines are scored by Σ F; the exact backend by its
    linear objective. Earlier groups win ties.

    Raises:
        InfeasiblePlacementError: no group admits a placement.
        SearchSpaceTooLarge: every group was too large for the exact backend.
    """
    if backend not in BACKEND_SOLVERS:
        raise ValueError(f"unknown placement backend {backend!r}; choose from {sorted(BACKEND_SOLVERS)}")
    solver = BACKEND_SOLVERS[backend]
    if groups is None:
        groups = enumerate_mesh_groups(context.cluster, context.llms,
                                       1.0 - context.options.activation_reserve)

    best: Optional[PlacementResult] = None
    too_large = 0
    for group in groups:
        try:
            result = solver(context, group)
        except SearchSpaceTooLarge as e:
            too_large += 1
            logger.debug(f"Skipping group {describe_group(group)}: {e}")
            continue
        except InfeasiblePlacementError as e:
            logger.debug(f"Skipping group {describe_group(group)}: {e}")
            continue
        if best is None or _score(result, backend) > _score(best, backend) + SM_TOLERANCE:
            best = result

    if best is None:
        if too_large:
            raise SearchSpaceTooLarge(
                f"{too_large} mesh groups exceed ilp_max_dims={context.options.ilp_max_dims} "
                f"and no smaller group is feasible")
        raise InfeasiblePlacementError(
            f"no mesh group of {context.cluster.total_gpus} GPUs can host {len(context.llms)} LLMs")

    validate_placement(context, best)
    logger.info(f"{backend} placement: {len(best.units)} units, "
                f"est_total_tpt={best.est_total_tpt:.3f} req/s, objective={best.objective:.3f}")
    return best


def validate_placement(context: PlacementContext, result: PlacementResult) -> None:
    """
    Check a result against the cluster independently of the solver.

    Raises:
        ValueError: naming the first violated constraint.
    """
    cluster = context.cluster
    placed = result.llm_names
    if sorted(placed) != sorted(context.specs):
        raise ValueError(f"placement must hold every LLM exactly once, got {placed}")

    seen_gpus = set()
    for unit in result.units:
        mesh = unit.mesh
        node_gpus = range(mesh.node * cluster.gpus_per_node, (mesh.node + 1) * cluster.gpus_per_node)
        if mesh.node >= cluster.num_nodes or any(gpu not in node_gpus for gpu in mesh.gpu_ids):
            raise ValueError(f"mesh {mesh.gpu_ids} is not inside node {mesh.node}")
        overlap = seen_gpus.intersection(mesh.gpu_ids)
        if overlap:
            raise ValueError(f"GPUs {sorted(overlap)} appear in more than one mesh")
        seen_gpus.update(mesh.gpu_ids)

        if any(p.candidate.tp_degree > mesh.size for p in unit.llms):
            raise ValueError(f"unit {unit.names}: tp degree exceeds mesh size {mesh.size}")
        need = sum(memory_need(p.spec, *context.lengths[p.spec.name]) for p in unit.llms)
        if need > context.usable_memory(mesh.size) * (1 + SM_TOLERANCE):
            raise ValueError(f"unit {unit.names} needs {need:.3e} bytes, "
                             f"mesh offers {context.usable_memory(mesh.size):.3e}")
        if sum(p.candidate.num_sm for p in unit.llms) > 1.0 + SM_TOLERANCE:
            raise ValueError(f"unit {unit.names} oversubscribes SMs")


def placement_gap(greedy: PlacementResult, exact: PlacementResult) -> float:
    """Relative shortfall of the greedy objective against the exact one."""
    if exact.objective <= 0:
        return 0.0
    return (exact.objective - greedy.objective) / exact.objective
