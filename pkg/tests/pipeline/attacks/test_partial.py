import tempfile
import unittest
from pathlib import Path

from domain.models import AttestationPolicy, CostModel, TamperKind, TamperSpec
from numkit.rng import SeededRng
from pipeline.attacks.partial import evasion_convergence, partial_tamper
from tests.fixtures import SMALL_SHAPE, keyed_deployment


class TestPartialTamper(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.deployment = keyed_deployment(Path(self.tmp.name))
        self.policy = AttestationPolicy(interval=10, samples=2, blocks=SMALL_SHAPE.blocks)
        self.spec = TamperSpec(kind=TamperKind.REPLACE_BLOCKS, count=1, seed=3)

    def tearDown(self):
        self.tmp.cleanup()

    def _run(self, spec=None, sessions=4000):
        return partial_tamper(
            self.deployment.bundle_path,
            self.deployment.key_store_path,
            self.deployment.key,
            spec or self.spec,
            self.policy,
            CostModel(),
            30,
            SeededRng(0),
            sessions=sessions,
        )

    def test_one_replaced_block(self):
        """
        Scenario: L=4, k=2, t=1, three rounds
        THEN each round misses with probability 1/2 and sessions evade at about 1/8
        """
        result = self._run()
        self.assertEqual(len(result.targets), 1)
        self.assertEqual(result.detectable, result.targets)
        self.assertEqual(result.rounds, 3)
        self.assertAlmostEqual(result.estimate.analytic, 0.125)
        self.assertLessEqual(result.estimate.abs_error, 4 * result.estimate.standard_error)
        self.assertEqual(result.report.attack["kind"], "replace_blocks")
        self.assertEqual(result.report.attack["spec_sha256"], self.spec.spec_hash)
        self.assertEqual(result.row()["t"], 1)

    def test_reproducible(self):
        self.assertEqual(self._run(sessions=500).estimate, self._run(sessions=500).estimate)

    def test_only_block_replacement(self):
        with self.assertRaises(ValueError):
            self._run(spec=TamperSpec(kind=TamperKind.NOISE, sigma=1.0))

    def test_convergence_rows(self):
        rows = evasion_convergence(
            self.deployment.bundle_path,
            self.deployment.key_store_path,
            self.deployment.key,
            self.spec,
            self.policy,
            30,
            SeededRng(1),
            sizes=(200, 2000),
        )
        self.assertEqual([row["sessions"] for row in rows], [200, 2000])
        self.assertEqual({row["analytic"] for row in rows}, {0.125})


if __name__ == "__main__":
    unittest.main()
