import tempfile
import unittest
from pathlib import Path

from apis.simulated_enclave import SimulatedEnclave
from domain.models import AttestationPolicy, CostModel, PipelineMode, TamperKind, TamperSpec, Verdict
from numkit.rng import SeededRng
from pipeline.attest.analysis import evasion_probability
from pipeline.attest.scheduler import STAGES
from pipeline.attest.session_pipeline import AttestationSession, run_session
from tests.fixtures import SMALL_SHAPE, keyed_deployment


def small_policy(**overrides) -> AttestationPolicy:
    settings = dict(interval=10, samples=2, blocks=SMALL_SHAPE.blocks)
    settings.update(overrides)
    return AttestationPolicy(**settings)


class TestAttestationSession(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.deployment = keyed_deployment(Path(self.tmp.name))

    def tearDown(self):
        self.tmp.cleanup()

    def _run(self, policy=None, tokens=50, tamper=None, seed=0, single_round=False):
        return run_session(
            self.deployment.bundle_path,
            self.deployment.key_store_path,
            self.deployment.key,
            policy or small_policy(),
            CostModel(),
            tokens,
            tamper=tamper,
            rng=SeededRng(seed),
            single_round=single_round,
        )

    def test_authentic_session_passes_every_round(self):
        report = self._run()
        self.assertIs(report.verdict, Verdict.PASS)
        self.assertEqual([r.token for r in report.rounds], [10, 20, 30, 40, 50])
        for record in report.rounds:
            self.assertEqual(len(record.blocks), 2)
            self.assertEqual(record.blocks, sorted(set(record.blocks)))
            self.assertTrue(all(outcome.wer == 100.0 for outcome in record.outcomes))
            self.assertEqual(set(record.stage_us), set(STAGES))
        self.assertGreater(report.overhead_pct, 0.0)
        self.assertAlmostEqual(report.evasion_analytic, evasion_probability(4, 2, 1, 5))
        self.assertIsNone(report.attack)

    def test_fewer_tokens_than_interval(self):
        report = self._run(tokens=9)
        self.assertEqual(report.rounds, [])
        self.assertIs(report.verdict, Verdict.PASS)
        self.assertEqual(report.overhead_pct, 0.0)

    def test_single_round(self):
        report = self._run(tokens=1000, single_round=True)
        self.assertEqual(len(report.rounds), 1)
        self.assertEqual(report.tokens, 10)

    def test_same_seed_same_samples(self):
        first = self._run(seed=4)
        second = self._run(seed=4)
        self.assertEqual([r.blocks for r in first.rounds], [r.blocks for r in second.rounds])
        self.assertEqual(first.report_hash, second.report_hash)

    def test_replaced_model_aborts_in_first_round(self):
        """
        GIVEN every block replaced under the victim's header
        WHEN the session runs
        THEN the first round aborts and no later round is attempted
        """
        report = self._run(tamper=TamperSpec(kind=TamperKind.REPLACE_ALL, seed=1))
        self.assertIs(report.verdict, Verdict.ABORT)
        self.assertEqual(len(report.rounds), 1)
        self.assertIn(report.rounds[0].early_exit_block, report.rounds[0].blocks)
        self.assertEqual(report.attack["kind"], "replace_all")
        self.assertEqual(report.attack["targets"], [0, 1, 2, 3])
        self.assertAlmostEqual(report.evasion_analytic, 0.0)

    def test_early_exit_leaves_later_blocks_unprocessed(self):
        policy = small_policy(samples=4, mode=PipelineMode.SEQUENTIAL, workers=1)
        report = self._run(policy=policy, tamper=TamperSpec(kind=TamperKind.REPLACE_BLOCKS, targets=(1,), seed=2))
        record = report.rounds[0]
        self.assertIs(record.verdict, Verdict.ABORT)
        self.assertEqual(record.early_exit_block, 1)
        self.assertEqual([o.processed for o in record.outcomes], [True, True, False, False])
        self.assertEqual(record.wer[0], 100.0)
        self.assertIsNone(record.wer[3])

    def test_policy_must_match_bundle(self):
        with SimulatedEnclave(
            self.deployment.bundle_path, self.deployment.key_store_path, self.deployment.key
        ) as enclave:
            with self.assertRaises(ValueError):
                AttestationSession(enclave, small_policy(blocks=5), CostModel())


if __name__ == "__main__":
    unittest.main()
