import heapq
import unittest

from domain.models import AttestationPolicy, BlockCost, CostModel, PipelineMode, Verdict
from numkit.rng import SeededRng
from pipeline.attest.scheduler import (
    COPY,
    DECRYPT,
    SWITCH,
    VERIFY,
    RoundCosts,
    critical_path_us,
    early_exit_check,
    record_bytes,
    schedule_pipeline,
)

NO_CONTENTION = CostModel(contention=0.0)


def example_costs(blocks: int = 4, copy_us: float = 1.0, verify_us: float = 9.0) -> RoundCosts:
    return RoundCosts(
        switch_us=0.0, decrypt_us=2.0, blocks={i: BlockCost(copy_us, verify_us) for i in range(blocks)}
    )


def policy(mode: PipelineMode, workers: int = 4, samples: int = 4, early_exit: bool = True) -> AttestationPolicy:
    return AttestationPolicy(
        interval=100, samples=samples, blocks=16, mode=mode, workers=workers, early_exit=early_exit
    )


def worker_pool_oracle(costs: RoundCosts, workers: int) -> float:
    """FIFO verification over `workers` slots at full rate, each block waiting for its own copy."""
    time = costs.switch_us + costs.decrypt_us
    free = [time] * workers
    last_start, finish = time, time
    for index in sorted(costs.blocks):
        cost = costs.blocks[index]
        time += cost.copy_us
        start = max(time, heapq.heappop(free), last_start)
        heapq.heappush(free, start + cost.verify_us)
        last_start = start
        finish = max(finish, start + cost.verify_us)
    return max(finish, time)


class TestSchedulePipeline(unittest.TestCase):
    def test_worked_example(self):
        """
        Scenario: k=4, copy 1, verify 9, decrypt 2, four workers, no contention
        THEN sequential takes 2 + 4 * (1 + 9) = 42 and overlapped 2 + 4 + 9 = 15
        """
        costs = example_costs()
        sequential = schedule_pipeline(policy(PipelineMode.SEQUENTIAL), NO_CONTENTION, costs)
        overlapped = schedule_pipeline(policy(PipelineMode.OVERLAPPED), NO_CONTENTION, costs)
        self.assertAlmostEqual(sequential.total_us, 42.0)
        self.assertAlmostEqual(overlapped.total_us, 15.0)
        self.assertAlmostEqual(overlapped.total_us, worker_pool_oracle(costs, 4))

    def test_matches_worker_pool_oracle(self):
        rng = SeededRng(0)
        for trial in range(25):
            count = int(rng.integers(1, 7))
            copies = rng.random(count) * 3 + 0.5
            verifies = rng.random(count) * 9 + 1
            costs = RoundCosts(
                switch_us=float(rng.random() * 5),
                decrypt_us=float(rng.random() * 5),
                blocks={i: BlockCost(float(copies[i]), float(verifies[i])) for i in range(count)},
            )
            workers = 1 + trial % 3
            schedule = schedule_pipeline(
                policy(PipelineMode.OVERLAPPED, workers=workers, samples=count), NO_CONTENTION, costs
            )
            self.assertAlmostEqual(schedule.total_us, worker_pool_oracle(costs, workers), places=6)

    def test_overlapped_never_slower(self):
        costs = example_costs(blocks=5, copy_us=3.0, verify_us=4.0)
        for contention in (0.0, 0.3, 0.6, 1.0):
            cost_model = CostModel(contention=contention)
            sequential = schedule_pipeline(policy(PipelineMode.SEQUENTIAL, samples=5), cost_model, costs)
            overlapped = schedule_pipeline(policy(PipelineMode.OVERLAPPED, workers=2, samples=5), cost_model, costs)
            self.assertLessEqual(overlapped.total_us, sequential.total_us + 1e-9)

    def test_contention_slows_parallel_verification(self):
        costs = example_costs()
        free = schedule_pipeline(policy(PipelineMode.OVERLAPPED), NO_CONTENTION, costs)
        shared = schedule_pipeline(policy(PipelineMode.OVERLAPPED), CostModel(contention=0.6), costs)
        self.assertGreater(shared.total_us, free.total_us)

    def test_single_worker_serializes_verification(self):
        schedule = schedule_pipeline(policy(PipelineMode.OVERLAPPED, workers=1), CostModel(), example_costs())
        # first verify waits for one copy, the rest are back to back
        self.assertAlmostEqual(schedule.total_us, 2 + 1 + 4 * 9)

    def test_sequential_early_exit(self):
        schedule = schedule_pipeline(policy(PipelineMode.SEQUENTIAL), NO_CONTENTION, example_costs(), failing=[1])
        self.assertAlmostEqual(schedule.total_us, 22.0)
        self.assertEqual(schedule.processed, [0, 1])
        self.assertEqual(schedule.early_exit_block, 1)

    def test_overlapped_early_exit_cuts_work_in_flight(self):
        schedule = schedule_pipeline(policy(PipelineMode.OVERLAPPED), NO_CONTENTION, example_costs(), failing=[1])
        self.assertAlmostEqual(schedule.total_us, 13.0)
        self.assertEqual(schedule.processed, [0, 1])
        self.assertEqual(schedule.early_exit_block, 1)
        self.assertAlmostEqual(schedule.verify_spent[2], 8.0)
        self.assertAlmostEqual(schedule.verify_spent[3], 7.0)

    def test_without_early_exit_every_block_runs(self):
        schedule = schedule_pipeline(
            policy(PipelineMode.OVERLAPPED, early_exit=False), NO_CONTENTION, example_costs(), failing=[1]
        )
        self.assertAlmostEqual(schedule.total_us, 15.0)
        self.assertEqual(schedule.processed, [0, 1, 2, 3])
        self.assertIsNone(schedule.early_exit_block)

    def test_stage_totals(self):
        costs = RoundCosts(switch_us=5.0, decrypt_us=2.0, blocks={0: BlockCost(1.0, 9.0), 3: BlockCost(1.0, 9.0)})
        schedule = schedule_pipeline(policy(PipelineMode.SEQUENTIAL, samples=2), NO_CONTENTION, costs)
        self.assertEqual(schedule.stage_us, {SWITCH: 5.0, DECRYPT: 2.0, COPY: 2.0, VERIFY: 18.0})
        self.assertEqual([e.block for e in schedule.events if e.stage == VERIFY], [0, 3])

    def test_critical_path_equals_latency(self):
        costs = example_costs(blocks=3, copy_us=2.0, verify_us=5.0)
        for mode in PipelineMode:
            for workers in (1, 2):
                schedule = schedule_pipeline(policy(mode, workers=workers, samples=3), CostModel(), costs)
                self.assertAlmostEqual(critical_path_us(schedule), schedule.total_us, places=6)


class TestEarlyExitCheck(unittest.TestCase):
    def test_stops_at_first_failure(self):
        stream = iter([(0, 100.0), (3, 95.0), (5, 100.0)])
        result = early_exit_check(stream)
        self.assertIs(result.verdict, Verdict.ABORT)
        self.assertEqual(result.processed, [0, 3])
        self.assertEqual(result.failing_block, 3)
        self.assertEqual(next(stream), (5, 100.0))

    def test_all_pass(self):
        result = early_exit_check([(1, 100.0), (2, 100.0)])
        self.assertIs(result.verdict, Verdict.PASS)
        self.assertIsNone(result.failing_block)


class TestRecordSizes(unittest.TestCase):
    def test_record_bytes(self):
        self.assertEqual(record_bytes(20, 26), 4 * 20 * 26 + 4 * 26 + 20)


if __name__ == "__main__":
    unittest.main()
