import numpy as np
from django.test import SimpleTestCase

from apps.cost_model.domain import LLMSpec

from .domain import DoubleFreeError, InsufficientBlocks, MemoryLayout, UnknownRequestError
from .services import (
    BlockPool,
    adapt_quota,
    apportion,
    block_bytes,
    blocks_per_token,
    init_token_block_quota,
)


def tiny(name='tiny', layers=2, heads=2):
    return LLMSpec(name, num_layers=layers, num_heads=heads, head_dim=64, hidden_size=128,
                   weight_bytes=1000)


def llama_7b(name='llama-7b'):
    return LLMSpec.from_params(name, num_layers=32, num_heads=32, hidden_size=4096, params_b=6.7)


class SizingTests(SimpleTestCase):
    def test_blocks_per_token(self):
        self.assertEqual(blocks_per_token(tiny(), 1), 8)
        self.assertAlmostEqual(blocks_per_token(tiny(), 16), 0.5)
        self.assertEqual(blocks_per_token(llama_7b(), 16) * 16, 2048)

    def test_whole_blocks_per_allocation(self):
        pool = BlockPool(1000, {'tiny': tiny()}, block_tokens=16)
        self.assertEqual(pool.blocks_for('tiny', 1), 8)
        self.assertEqual(pool.blocks_for('tiny', 16), 8)
        self.assertEqual(pool.blocks_for('tiny', 17), 16)
        self.assertEqual(pool.growth('tiny', 16, 1), 8)
        self.assertEqual(pool.growth('tiny', 17, 1), 0)

    def test_llama_allocates_128_blocks_per_16_tokens(self):
        pool = BlockPool(10000, {'llama-7b': llama_7b()}, block_tokens=16)
        self.assertEqual(pool.blocks_for('llama-7b', 16), 2 * 32 * 32)

    def test_block_bytes_uses_widest_head(self):
        wide = LLMSpec('wide', 2, 2, 128, 256, 1000)
        self.assertEqual(block_bytes([tiny(), wide], 16), 128 * 2 * 16)

    def test_memory_layout(self):
        layout = MemoryLayout.for_unit(100_000, [tiny('a'), tiny('b')], 0.1)
        self.assertEqual(layout.weights_bytes, 2000)
        self.assertEqual(layout.activation_reserve_bytes, 10_000)
        self.assertEqual(layout.kv_bytes, 88_000)
        with self.assertRaises(ValueError):
            MemoryLayout.for_unit(1500, [tiny('a'), tiny('b')], 0.1)


class AllocationTests(SimpleTestCase):
    def setUp(self):
        self.pool = BlockPool(100, {'a': tiny('a'), 'b': tiny('b', layers=1)}, block_tokens=1)

    def test_alloc_and_free_restores_pool(self):
        before = self.pool.snapshot()
        allocation = self.pool.alloc('a', 1, 3)
        self.assertEqual(allocation.blocks, 24)
        self.assertEqual(self.pool.free_blocks, 76)
        self.pool.check_invariants()
        self.assertEqual(self.pool.free(1), 24)
        self.assertEqual(self.pool.snapshot(), before)
        self.pool.check_invariants()

    def test_prefill_blocks_retained_across_decode(self):
        self.pool.alloc('a', 1, 4)
        for _ in range(3):
            self.pool.alloc('a', 1, 1)
        self.assertEqual(self.pool.tokens_of(1), 7)
        self.assertEqual(self.pool.blocks_of(1), 56)

    def test_pool_exhaustion_is_atomic(self):
        self.pool.alloc('a', 1, 10)
        before = self.pool.snapshot()
        with self.assertRaises(InsufficientBlocks) as ctx:
            self.pool.alloc('b', 2, 11)
        self.assertEqual(ctx.exception.reason, 'pool')
        self.assertEqual(self.pool.snapshot(), before)
        self.assertFalse(self.pool.holds(2))

    def test_quota_exhaustion_is_atomic(self):
        self.pool.set_quotas({'a': 30, 'b': 70})
        before = self.pool.snapshot()
        with self.assertRaises(InsufficientBlocks) as ctx:
            self.pool.alloc('a', 1, 4)
        self.assertEqual(ctx.exception.reason, 'quota')
        self.assertEqual(self.pool.snapshot(), before)
        self.pool.alloc('a', 1, 4, enforce_quota=False)
        self.assertEqual(self.pool.used['a'], 32)

    def test_heterogeneous_models_share_one_pool(self):
        self.pool.alloc('a', 1, 5)
        self.pool.alloc('b', 2, 5)
        self.assertEqual(self.pool.used, {'a': 40, 'b': 20})
        self.assertEqual(self.pool.free_blocks, 40)

    def test_double_free(self):
        self.pool.alloc('a', 1, 1)
        self.pool.free(1)
        with self.assertRaises(DoubleFreeError):
            self.pool.free(1)

    def test_released_ids_are_bounded(self):
        pool = BlockPool(100, {'a': tiny('a')}, block_tokens=1, released_window=3)
        for request_id in range(10):
            pool.alloc('a', request_id, 1)
            pool.free(request_id)
        self.assertEqual(len(pool._released), 3)
        with self.assertRaises(DoubleFreeError):
            pool.free(9)
        with self.assertRaises(DoubleFreeError):
            pool.alloc('a', 7, 1)
        with self.assertRaises(UnknownRequestError):
            pool.free(0)
        self.assertEqual(pool.free_blocks, 100)

    def test_free_unknown_request(self):
        with self.assertRaises(UnknownRequestError):
            self.pool.free(42)

    def test_quotas_must_fit(self):
        with self.assertRaises(ValueError):
            self.pool.set_quotas({'a': 80, 'b': 80})

    def test_random_operations_conserve_blocks(self):
        rng = np.random.default_rng(5)
        specs = {'a': tiny('a', 3, 2), 'b': tiny('b', 1, 4), 'c': tiny('c', 2, 1)}
        pool = BlockPool(2000, specs, block_tokens=4, quotas={'a': 800, 'b': 700, 'c': 500})
        tokens = {}
        owner = {}
        next_id = 0
        for _ in range(10_000):
            if tokens and rng.uniform() < 0.35:
                rid = int(rng.choice(list(tokens)))
                pool.free(rid)
                del tokens[rid], owner[rid]
            else:
                if tokens and rng.uniform() < 0.6:
                    rid = int(rng.choice(list(tokens)))
                    llm = owner[rid]
                else:
                    rid, llm = next_id, str(rng.choice(list(specs)))
                    next_id += 1
                n = int(rng.integers(1, 20))
                before = pool.snapshot()
                try:
                    pool.alloc(llm, rid, n)
                except InsufficientBlocks:
                    self.assertEqual(pool.snapshot(), before)
                else:
                    tokens[rid] = tokens.get(rid, 0) + n
                    owner[rid] = llm
            expected = {name: sum(pool.blocks_for(name, t) for r, t in tokens.items() if owner[r] == name)
                        for name in specs}
            self.assertEqual(pool.used, expected)
            self.assertEqual(sum(pool.used.values()) + pool.free_blocks, 2000)
            for name in specs:
                self.assertLessEqual(pool.used[name], pool.quotas[name])
        pool.check_invariants()


class QuotaTests(SimpleTestCase):
    def test_apportion_sums_exactly(self):
        parts = apportion(10, {'a': 1.0, 'b': 1.0, 'c': 1.0})
        self.assertEqual(sum(parts.values()), 10)
        self.assertEqual(parts, {'a': 4, 'b': 3, 'c': 3})
        self.assertEqual(apportion(4, {'a': 0.0, 'b': 0.0}), {'a': 2, 'b': 2})

    def test_rate_proportional_quotas(self):
        specs = {'a': llama_7b('a'), 'b': llama_7b('b')}
        lengths = {'a': (100, 100), 'b': (100, 100)}
        quotas = init_token_block_quota(specs, {'a': 1.0, 'b': 8.0}, lengths, 9000,
                                        block_tokens=16, floor_fraction=0.0)
        self.assertEqual(quotas, {'a': 1000, 'b': 8000})
        floored = init_token_block_quota(specs, {'a': 1.0, 'b': 8.0}, lengths, 9000,
                                         block_tokens=16, floor_fraction=0.02)
        # 180-block floors, the remaining 8640 split 1:8
        self.assertEqual(floored, {'a': 1140, 'b': 7860})

    def test_block_heavy_model_gets_more(self):
        specs = {'a': tiny('a', 2, 2), 'b': tiny('b', 2, 4)}
        lengths = {'a': (10, 10), 'b': (10, 10)}
        quotas = init_token_block_quota(specs, {'a': 1.0, 'b': 1.0}, lengths, 300,
                                        block_tokens=1, floor_fraction=0.0)
        self.assertEqual(quotas, {'a': 100, 'b': 200})

    def test_three_llm_scenario(self):
        # rates 2:8:8, request lengths 2:1:1 -> demand 4:8:8
        specs = {name: llama_7b(name) for name in 'xyz'}
        lengths = {'x': (200, 200), 'y': (100, 100), 'z': (100, 100)}
        quotas = init_token_block_quota(specs, {'x': 2.0, 'y': 8.0, 'z': 8.0}, lengths, 2000,
                                        block_tokens=16, floor_fraction=0.0)
        self.assertEqual(quotas, {'x': 400, 'y': 800, 'z': 800})

    def test_equal_split_when_floors_overflow(self):
        specs = {name: tiny(name) for name in 'abc'}
        lengths = {name: (1, 1) for name in 'abc'}
        quotas = init_token_block_quota(specs, {'a': 1.0}, lengths, 10, block_tokens=1,
                                        floor_fraction=0.5)
        self.assertEqual(sum(quotas.values()), 10)
        self.assertEqual(sorted(quotas.values()), [3, 3, 4])

    def test_equal_utilization_leaves_quotas(self):
        quotas = {'a': 500, 'b': 500}
        self.assertEqual(adapt_quota({'a': 0.7, 'b': 0.7}, quotas), quotas)

    def test_transfer_from_idle_to_saturated(self):
        new = adapt_quota({'a': 0.1, 'b': 0.95}, {'a': 500, 'b': 500}, floor=10,
                          low_mark=0.5, high_mark=0.9, step=0.1)
        self.assertEqual(new, {'a': 450, 'b': 550})

    def test_floor_respected(self):
        new = adapt_quota({'a': 0.0, 'b': 1.0}, {'a': 12, 'b': 988}, floor=10,
                          low_mark=0.5, high_mark=0.9, step=0.5)
        self.assertEqual(new, {'a': 10, 'b': 990})

    def test_receivers_split_by_deficit(self):
        new = adapt_quota({'a': 0.0, 'b': 1.0, 'c': 0.95}, {'a': 1000, 'b': 100, 'c': 100},
                          floor=0, low_mark=0.5, high_mark=0.9, step=0.1)
        self.assertEqual(sum(new.values()), 1200)
        self.assertEqual(new['b'] - 100, 67)
        self.assertEqual(new['c'] - 100, 33)

    def test_receiver_grows_until_below_high_mark(self):
        quotas = {'idle': 1000, 'busy': 200}
        demand = 400  # blocks the busy LLM would hold if allowed
        previous = quotas['busy']
        for _ in range(20):
            utilization = {'idle': 0.05, 'busy': min(1.0, demand / quotas['busy'])}
            quotas = adapt_quota(utilization, quotas, floor=24, low_mark=0.5, high_mark=0.9, step=0.1)
            self.assertEqual(sum(quotas.values()), 1200)
            if utilization['busy'] > 0.9:
                self.assertGreaterEqual(quotas['busy'], previous)
            previous = quotas['busy']
        self.assertLessEqual(demand / quotas['busy'], 0.9 + 1e-9)


class UtilizationTests(SimpleTestCase):
    def test_time_averaged_usage(self):
        pool = BlockPool(100, {'a': tiny('a')}, block_tokens=1, quotas={'a': 80})
        pool.advance(0.0)
        pool.alloc('a', 1, 5)  # 40 blocks
        pool.advance(10.0)
        pool.free(1)
        pool.advance(20.0)
        self.assertAlmostEqual(pool.average_used('a'), 20.0)
        self.assertAlmostEqual(pool.period_utilization()['a'], 0.25)

    def test_adapt_records_history_and_moves_quota(self):
        pool = BlockPool(100, {'a': tiny('a'), 'b': tiny('b')}, block_tokens=1,
                         quotas={'a': 50, 'b': 50})
        pool.alloc('b', 1, 6)  # 48 of 50
        pool.advance(10.0)
        changed = pool.adapt(floor_fraction=0.02, low_mark=0.5, high_mark=0.9, step=0.1)
        self.assertTrue(changed)
        self.assertEqual(pool.quotas, {'a': 45, 'b': 55})
        self.assertEqual(len(pool.history), 2)

    def test_time_cannot_go_backwards(self):
        pool = BlockPool(10, {'a': tiny('a')}, block_tokens=1)
        pool.advance(5.0)
        with self.assertRaises(ValueError):
            pool.advance(4.0)
