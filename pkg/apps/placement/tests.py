import numpy as np
from django.test import SimpleTestCase

from apps.cost_model.domain import LatencyProfile, LLMSpec
from apps.cost_model.services import LatencyModel

from .branch_and_bound import AssignmentProblem, solve_branch_and_bound, solve_enumeration
from .domain import (
    Cluster,
    InfeasiblePlacementError,
    LLMUnit,
    Mesh,
    PlacementOptions,
    PlacementResult,
    SearchSpaceTooLarge,
)
from .meshes import enumerate_mesh_groups, node_partitions
from .services import (
    PlacementContext,
    assignment_problem,
    exhaustive_place,
    greedy_place,
    ilp_place,
    memory_greedy_place,
    place,
    placement_gap,
    spatial_place,
    validate_placement,
)

GB = 10 ** 9
PROFILE = LatencyProfile(prefill_ms_per_token=0.1, decode_ms_per_step=12.0,
                         decode_ms_per_context_token=0.005)
OPTIONS = PlacementOptions(sm_list=tuple(round(0.1 * i, 1) for i in range(1, 11)),
                           tp_degrees=(1, 2, 4, 8), ilp_max_dims=20,
                           activation_reserve=0.1, max_batch=256)


def small(name):
    return LLMSpec.from_params(name, num_layers=32, num_heads=32, hidden_size=4096, params_b=6.7)


def large(name):
    return LLMSpec.from_params(name, num_layers=80, num_heads=64, hidden_size=8192, params_b=65.2)


def context(cluster, llms, rates, lengths=(161, 338), options=OPTIONS):
    return PlacementContext(cluster, llms, rates, {spec.name: lengths for spec in llms},
                            LatencyModel(PROFILE), options)


def sizes(group):
    return [mesh.size for mesh in group]


def medium(name):
    return LLMSpec.from_params(name, num_layers=40, num_heads=40, hidden_size=5120, params_b=13.0)


def random_context(rng):
    n_llms = int(rng.integers(1, 5))
    n_gpus = int(rng.integers(n_llms, 5))
    llms = [medium(f'm{i}') if rng.random() < 0.3 else small(f'm{i}') for i in range(n_llms)]
    rates = {spec.name: round(float(rng.uniform(0.2, 3.0)), 2) for spec in llms}
    lengths = {spec.name: (int(rng.integers(64, 513)), int(rng.integers(64, 513))) for spec in llms}
    return PlacementContext(Cluster(1, n_gpus, 80 * GB), llms, rates, lengths,
                            LatencyModel(PROFILE), OPTIONS)


class MeshGroupTests(SimpleTestCase):
    def test_node_partitions(self):
        self.assertEqual(node_partitions(2), [(2,), (1, 1)])
        self.assertEqual(node_partitions(4), [(4,), (2, 2), (2, 1, 1), (1, 1, 1, 1)])
        self.assertEqual(node_partitions(8)[0], (8,))

    def test_single_node_groups(self):
        groups = enumerate_mesh_groups(Cluster(1, 2, 80 * GB))
        self.assertEqual([sizes(g) for g in groups], [[2], [1, 1]])
        groups = enumerate_mesh_groups(Cluster(1, 4, 80 * GB))
        self.assertEqual([sizes(g) for g in groups], [[4], [2, 2], [2, 1, 1], [1, 1, 1, 1]])

    def test_isomorphic_groups_deduplicated(self):
        groups = enumerate_mesh_groups(Cluster(2, 2, 80 * GB))
        # {[2],[2]}, {[2],[1,1]}, {[1,1],[1,1]}; {[1,1],[2]} is the same group as the second
        self.assertEqual(len(groups), 3)

    def test_meshes_are_node_local_and_disjoint(self):
        for group in enumerate_mesh_groups(Cluster(2, 4, 80 * GB)):
            gpus = [gpu for mesh in group for gpu in mesh.gpu_ids]
            self.assertEqual(sorted(gpus), list(range(8)))
            for mesh in group:
                self.assertTrue(all(gpu // 4 == mesh.node for gpu in mesh.gpu_ids))

    def test_prunes_groups_too_small_for_weights(self):
        groups = enumerate_mesh_groups(Cluster(1, 2, 80 * GB), [large('big')], usable_fraction=0.9)
        self.assertEqual([sizes(g) for g in groups], [[2]])
        self.assertEqual(enumerate_mesh_groups(Cluster(1, 1, 80 * GB), [large('big')]), [])


class CandidateTests(SimpleTestCase):
    def test_low_rate_takes_smallest_share(self):
        ctx = context(Cluster(1, 1, 80 * GB), [small('a')], {'a': 0.01})
        (candidate,) = ctx.candidates['a']
        self.assertEqual(candidate.tp_degree, 1)
        self.assertEqual(candidate.num_sm, 0.1)
        self.assertFalse(candidate.saturated)

    def test_one_candidate_per_tp_degree(self):
        ctx = context(Cluster(1, 4, 80 * GB), [small('a')], {'a': 1.0})
        self.assertEqual([c.tp_degree for c in ctx.candidates['a']], [1, 2, 4])

    def test_share_is_minimal_against_linear_scan(self):
        model = LatencyModel(PROFILE)
        ctx = context(Cluster(1, 4, 80 * GB), [small('a')], {'a': 2.5})
        spec = ctx.specs['a']
        for candidate in ctx.candidates['a']:
            kv_bytes = ctx.usable_memory(candidate.tp_degree) - spec.weight_bytes
            max_batch = min(256, model.kv_capacity_batch(spec, kv_bytes, 161 + 338))
            meeting = [f for f in OPTIONS.sm_list
                       if not model.estimate_throughput(spec, f, candidate.tp_degree, 2.5,
                                                        gen_len=338, prompt_len=161,
                                                        max_batch=max_batch).saturated]
            if meeting:
                self.assertEqual(candidate.num_sm, meeting[0])
                self.assertFalse(candidate.saturated)
            else:
                self.assertEqual(candidate.num_sm, 1.0)
                self.assertTrue(candidate.saturated)

    def test_unreachable_rate_is_saturated_at_full_share(self):
        ctx = context(Cluster(1, 1, 80 * GB), [small('a')], {'a': 50.0})
        (candidate,) = ctx.candidates['a']
        self.assertTrue(candidate.saturated)
        self.assertEqual(candidate.num_sm, 1.0)

    def test_model_too_large_names_the_llm(self):
        with self.assertRaises(InfeasiblePlacementError) as ctx:
            context(Cluster(1, 1, 80 * GB), [small('a'), large('huge')], {'a': 1.0, 'huge': 1.0})
        self.assertEqual(ctx.exception.llm, 'huge')
        self.assertIn('huge', str(ctx.exception))


class BranchAndBoundTests(SimpleTestCase):
    def test_single_item(self):
        problem = AssignmentProblem([[3.0]], [[0.5]], [[1.0]], [1.0], [2.0])
        solution = solve_branch_and_bound(problem)
        self.assertTrue(solution.feasible)
        self.assertEqual(problem.one_hot(solution.assignment).tolist(), [[1]])

    def test_tight_memory_forces_separation(self):
        problem = AssignmentProblem(
            value=[[2.0, 1.0], [2.0, 1.0]], sm=[[0.1, 0.1], [0.1, 0.1]],
            mem=[[6.0, 6.0], [6.0, 6.0]], sm_cap=[1.0, 1.0], mem_cap=[10.0, 10.0],
        )
        solution = solve_branch_and_bound(problem)
        self.assertEqual(solution.assignment, (0, 1))
        self.assertAlmostEqual(solution.objective, 3.0)
        self.assertEqual(solve_enumeration(problem).assignment, (0, 1))

    def test_infeasible_instance(self):
        problem = AssignmentProblem([[1.0]], [[0.5]], [[5.0]], [1.0], [4.0])
        self.assertFalse(solve_branch_and_bound(problem).feasible)
        self.assertFalse(solve_enumeration(problem).feasible)

    def test_matches_enumeration_on_random_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(60):
            n, m = rng.integers(1, 5), rng.integers(1, 4)
            problem = AssignmentProblem(
                value=rng.uniform(0, 10, (n, m)),
                sm=rng.choice([0.1, 0.3, 0.5, 0.7], (n, m)),
                mem=rng.uniform(1, 6, (n, m)),
                sm_cap=np.ones(m),
                mem_cap=rng.uniform(4, 12, m),
                allowed=rng.uniform(size=(n, m)) < 0.85,
            )
            exact = solve_branch_and_bound(problem)
            oracle = solve_enumeration(problem)
            self.assertEqual(exact.feasible, oracle.feasible)
            if oracle.feasible:
                self.assertAlmostEqual(exact.objective, oracle.objective)
                self.assertTrue(problem.is_feasible(exact.assignment))

    def test_shape_validation(self):
        with self.assertRaises(ValueError):
            AssignmentProblem([[1.0, 2.0]], [[0.1]], [[1.0, 1.0]], [1.0, 1.0], [1.0, 1.0])


class GreedyTests(SimpleTestCase):
    def test_single_llm_single_mesh(self):
        ctx = context(Cluster(1, 1, 80 * GB), [small('a')], {'a': 1.0})
        (group,) = enumerate_mesh_groups(ctx.cluster)
        result = greedy_place(ctx, group)
        self.assertEqual(len(result.units), 1)
        self.assertEqual(result.units[0].names, ['a'])
        self.assertAlmostEqual(result.est_total_tpt, ctx.unit_throughput(['a'], 1))

    def test_identical_busy_llms_are_separated(self):
        ctx = context(Cluster(1, 2, 80 * GB), [small('a'), small('b')], {'a': 5.0, 'b': 5.0})
        group = (Mesh((0,)), Mesh((1,)))
        result = greedy_place(ctx, group)
        self.assertEqual(sorted(unit.names for unit in result.units), [['a'], ['b']])

    def test_never_beats_exhaustive(self):
        llms = [small(name) for name in 'abcd']
        rates = {'a': 1.2, 'b': 0.8, 'c': 0.5, 'd': 0.2}
        ctx = context(Cluster(1, 2, 80 * GB), llms, rates)
        group = (Mesh((0,)), Mesh((1,)))
        greedy = greedy_place(ctx, group)
        best = exhaustive_place(ctx, group)
        self.assertLessEqual(greedy.est_total_tpt, best.est_total_tpt + 1e-9)
        self.assertGreater(greedy.est_total_tpt / best.est_total_tpt, 0.5)

    def test_greedy_respects_sm_and_memory(self):
        llms = [small(name) for name in 'abcd']
        ctx = context(Cluster(1, 2, 80 * GB), llms, {'a': 3.0, 'b': 2.0, 'c': 1.0, 'd': 0.5})
        result = greedy_place(ctx, (Mesh((0,)), Mesh((1,))))
        validate_placement(ctx, result)

    def test_no_feasible_mesh(self):
        ctx = context(Cluster(1, 1, 80 * GB), [small('a'), small('b')], {'a': 50.0, 'b': 50.0})
        with self.assertRaises(InfeasiblePlacementError):
            greedy_place(ctx, (Mesh((0,)),))


class ExactPlacementTests(SimpleTestCase):
    def setUp(self):
        llms = [small(name) for name in 'abcd']
        self.ctx = context(Cluster(1, 4, 80 * GB), llms, {'a': 3.0, 'b': 1.5, 'c': 0.8, 'd': 0.3})

    def test_exact_objective_dominates_greedy(self):
        for group in enumerate_mesh_groups(self.ctx.cluster):
            greedy = greedy_place(self.ctx, group)
            exact = ilp_place(self.ctx, group)
            self.assertGreaterEqual(exact.objective, greedy.objective - 1e-9)

    def test_backends_over_all_groups(self):
        greedy = place(self.ctx, 'greedy')
        exact = place(self.ctx, 'ilp')
        self.assertGreaterEqual(exact.objective, greedy.objective - 1e-9)
        self.assertGreaterEqual(placement_gap(greedy, exact), -1e-9)

    def test_search_space_guard(self):
        options = PlacementOptions(ilp_max_dims=1)
        ctx = context(Cluster(1, 2, 80 * GB), [small('a'), small('b')], {'a': 1.0, 'b': 1.0},
                      options=options)
        with self.assertRaises(SearchSpaceTooLarge):
            ilp_place(ctx, (Mesh((0,)), Mesh((1,))))
        with self.assertRaises(SearchSpaceTooLarge):
            place(ctx, 'ilp')

    def test_infeasible_assignment(self):
        ctx = context(Cluster(1, 1, 80 * GB), [small('a'), small('b')], {'a': 50.0, 'b': 50.0})
        with self.assertRaises(InfeasiblePlacementError):
            ilp_place(ctx, (Mesh((0,)),))

    def test_objective_weights_throughput_by_rate(self):
        rates = {'a': 8.0, 'b': 1.0, 'c': 0.5}
        ctx = context(Cluster(1, 2, 80 * GB), [small(name) for name in rates], rates)
        for group in enumerate_mesh_groups(ctx.cluster):
            problem = assignment_problem(ctx, group)
            for i, spec in enumerate(ctx.llms):
                for j, mesh in enumerate(group):
                    candidate = ctx.candidate_for(spec.name, mesh.size)
                    self.assertAlmostEqual(problem.value[i][j],
                                           rates[spec.name] * candidate.est_tpt)


class RandomizedPlacementTests(SimpleTestCase):
    """Greedy, exact and enumerated placements on seeded random clusters of up to 4 LLMs and 4 GPUs."""

    INSTANCES = 60

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        rng = np.random.default_rng(11)
        cls.contexts = [random_context(rng) for _ in range(cls.INSTANCES)]

    def test_candidate_share_is_minimal(self):
        model = LatencyModel(PROFILE)
        for ctx in self.contexts:
            for spec in ctx.llms:
                prompt, output = ctx.lengths[spec.name]
                for candidate in ctx.candidates[spec.name]:
                    kv_bytes = ctx.usable_memory(candidate.tp_degree) - spec.weight_bytes
                    max_batch = max(1, min(256, model.kv_capacity_batch(spec, kv_bytes, prompt + output)))

                    def sustains(share):
                        return not model.estimate_throughput(
                            spec, share, candidate.tp_degree, ctx.rates[spec.name],
                            gen_len=output, prompt_len=prompt, max_batch=max_batch).saturated

                    index = OPTIONS.sm_list.index(candidate.num_sm)
                    self.assertEqual(sustains(candidate.num_sm), not candidate.saturated)
                    if index > 0:
                        self.assertFalse(sustains(OPTIONS.sm_list[index - 1]))

    def test_exact_matches_enumeration_per_group(self):
        for ctx in self.contexts:
            groups = enumerate_mesh_groups(ctx.cluster, ctx.llms, 1.0 - OPTIONS.activation_reserve)
            for group in groups:
                problem = assignment_problem(ctx, group)
                exact = solve_branch_and_bound(problem)
                oracle = solve_enumeration(problem)
                self.assertEqual(exact.feasible, oracle.feasible)
                if not exact.feasible:
                    continue
                self.assertAlmostEqual(exact.objective, oracle.objective)
                self.assertAlmostEqual(ilp_place(ctx, group).objective, oracle.objective)
                try:
                    greedy = greedy_place(ctx, group)
                except InfeasiblePlacementError:
                    continue
                self.assertGreaterEqual(oracle.objective, greedy.objective - 1e-9)

    def test_greedy_stays_close_to_exact(self):
        gaps = []
        for ctx in self.contexts:
            greedy = place(ctx, 'greedy')
            exact = place(ctx, 'ilp')
            self.assertGreaterEqual(exact.objective, greedy.objective - 1e-9)
            gaps.append(placement_gap(greedy, exact))
        self.assertEqual(len(gaps), self.INSTANCES)
        close = sum(gap <= 0.1 for gap in gaps)
        mean_gap = float(np.mean(gaps))
        self.assertGreaterEqual(close, 0.8 * len(gaps),
                                msg=f"{close}/{len(gaps)} within 10%, mean gap {mean_gap:.4f}")
        self.assertLess(mean_gap, 0.1, msg=f"mean gap {mean_gap:.4f}")



class PlaceTests(SimpleTestCase):
    def test_trivial_cluster(self):
        ctx = context(Cluster(1, 1, 80 * GB), [small('a')], {'a': 1.0})
        result = place(ctx, 'greedy')
        self.assertEqual(result.llm_names, ['a'])
        self.assertEqual(result.units[0].mesh.gpu_ids, (0,))

    def test_deterministic(self):
        llms = [small(name) for name in 'abc']
        rates = {'a': 2.0, 'b': 1.0, 'c': 0.5}
        first = place(context(Cluster(1, 4, 80 * GB), llms, rates), 'greedy')
        second = place(context(Cluster(1, 4, 80 * GB), llms, rates), 'greedy')
        self.assertEqual(first.to_dict(), second.to_dict())

    def test_every_llm_once(self):
        llms = [small(name) for name in 'abcde'] + [large('big')]
        rates = {'a': 2.0, 'b': 1.0, 'c': 0.5, 'd': 0.3, 'e': 0.0, 'big': 0.5}
        ctx = context(Cluster(1, 4, 80 * GB), llms, rates)
        for backend in ('greedy', 'memory_greedy'):
            result = place(ctx, backend)
            self.assertEqual(sorted(result.llm_names), sorted(ctx.specs))

    def test_spatial_uses_one_mesh_per_llm(self):
        ctx = context(Cluster(1, 4, 80 * GB), [small(n) for n in 'abc'], {'a': 2.0, 'b': 1.0, 'c': 0.5})
        result = place(ctx, 'spatial')
        self.assertTrue(all(len(unit.llms) == 1 for unit in result.units))
        self.assertEqual(len(result.units), 3)

    def test_memory_greedy_spreads_by_free_memory(self):
        ctx = context(Cluster(1, 2, 80 * GB), [small('a'), small('b')], {'a': 0.5, 'b': 0.4})
        result = memory_greedy_place(ctx, (Mesh((0,)), Mesh((1,))))
        self.assertEqual(len(result.units), 2)

    def test_spatial_needs_enough_meshes(self):
        ctx = context(Cluster(1, 1, 80 * GB), [small('a'), small('b')], {'a': 0.5, 'b': 0.4})
        with self.assertRaises(InfeasiblePlacementError):
            spatial_place(ctx, (Mesh((0,)),))

    def test_unknown_backend(self):
        ctx = context(Cluster(1, 1, 80 * GB), [small('a')], {'a': 1.0})
        with self.assertRaises(ValueError):
            place(ctx, 'annealing')

    def test_serialized_result_loads_back(self):
        ctx = context(Cluster(1, 2, 80 * GB), [small('a'), small('b')], {'a': 1.0, 'b': 0.5})
        result = place(ctx, 'greedy')
        loaded = PlacementResult.from_dict(result.to_dict())
        self.assertEqual(loaded.to_dict(), result.to_dict())
        with self.assertRaises(ValueError):
            PlacementResult.from_dict({'units': [{'mesh': {}}]})


class ValidationTests(SimpleTestCase):
    def setUp(self):
        self.ctx = context(Cluster(1, 2, 80 * GB), [small('a'), small('b')], {'a': 0.5, 'b': 0.5})
        self.result = place(self.ctx, 'greedy')

    def test_rejects_shared_gpus(self):
        units = [LLMUnit(Mesh((0,)), [placed]) for unit in self.result.units for placed in unit.llms]
        bad = PlacementResult(units, 0.0, 0.0, 'manual')
        with self.assertRaises(ValueError):
            validate_placement(self.ctx, bad)

    def test_rejects_missing_llm(self):
        bad = PlacementResult(self.result.units[:0], 0.0, 0.0, 'manual')
        with self.assertRaises(ValueError):
            validate_placement(self.ctx, bad)
