import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import numpy.testing as npt

# Add the parent directory to the path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.errors import OutputError, ParseError, ValidationError
from modules.evalkit import DEFAULT_THRESHOLDS_MM, MetricsReport, emit_curves, evaluate, parse_curves
from modules.skeleton import JointSet


def frames(array):
    return [JointSet(positions=a) for a in array]


class TestEvaluate(unittest.TestCase):
    """Unit tests for evalkit.evaluate."""

    def setUp(self):
        """Set up test fixtures."""
        rng = np.random.default_rng(0)
        self.truth = rng.normal(0.0, 50.0, size=(100, 16, 3))
        self.pred = self.truth + rng.normal(0.0, 8.0, size=self.truth.shape)

    def test_perfect_predictions(self):
        report = evaluate(frames(self.truth), frames(self.truth))
        self.assertEqual(report.mean_joint_error_mm, 0.0)
        self.assertTrue(all(f == 1.0 for _, f in report.threshold_curve))
        self.assertEqual([t for t, _ in report.threshold_curve], list(DEFAULT_THRESHOLDS_MM))

    def test_single_joint_offset(self):
        truth = np.zeros((1, 16, 3))
        pred = truth.copy()
        pred[0, 4, 0] = 10.0
        report = evaluate(frames(pred), frames(truth), thresholds_mm=(5.0, 15.0))
        self.assertEqual(report.threshold_curve, [(5.0, 0.0), (15.0, 1.0)])
        self.assertAlmostEqual(report.mean_joint_error_mm, 10.0 / 16.0)
        self.assertEqual(report.per_joint_mean_mm[4], 10.0)

    def test_matches_brute_force(self):
        report = evaluate(frames(self.pred), frames(self.truth), thresholds_mm=(10.0, 20.0, 30.0))
        total = 0.0
        worst = []
        for f in range(100):
            frame_worst = 0.0
            for j in range(16):
                d = float(np.sqrt(sum((self.pred[f, j, k] - self.truth[f, j, k]) ** 2 for k in range(3))))
                total += d
                frame_worst = max(frame_worst, d)
            worst.append(frame_worst)
        self.assertAlmostEqual(report.mean_joint_error_mm, total / 1600.0, places=9)
        for t, fraction in report.threshold_curve:
            self.assertAlmostEqual(fraction, sum(w <= t for w in worst) / 100.0)

    def test_frame_order_irrelevant(self):
        order = np.random.default_rng(1).permutation(100)
        a = evaluate(frames(self.pred), frames(self.truth))
        b = evaluate(frames(self.pred[order]), frames(self.truth[order]))
        self.assertAlmostEqual(a.mean_joint_error_mm, b.mean_joint_error_mm, places=10)
        npt.assert_allclose(a.per_joint_mean_mm, b.per_joint_mean_mm, rtol=1e-12)
        self.assertEqual(a.threshold_curve, b.threshold_curve)

    def test_curve_monotone(self):
        report = evaluate(frames(self.pred), frames(self.truth))
        fractions = [f for _, f in report.threshold_curve]
        self.assertTrue(all(b >= a for a, b in zip(fractions, fractions[1:])))

    def test_unsorted_thresholds_sorted(self):
        report = evaluate(frames(self.pred), frames(self.truth), thresholds_mm=(40, 10, 20))
        self.assertEqual([t for t, _ in report.threshold_curve], [10.0, 20.0, 40.0])

    def test_length_mismatch(self):
        with self.assertRaises(ValidationError):
            evaluate(frames(self.pred[:3]), frames(self.truth[:2]))

    def test_empty(self):
        with self.assertRaises(ValidationError):
            evaluate([], [])

    def test_joint_count_mismatch(self):
        with self.assertRaises(ValidationError):
            evaluate(frames(self.pred[:2, :15]), frames(self.truth[:2]))

    def test_fraction_out_of_range_rejected(self):
        with self.assertRaises(ValueError):
            MetricsReport(mean_joint_error_mm=1.0, per_joint_mean_mm=[1.0], threshold_curve=[(5.0, 1.5)])


class TestCurveFiles(unittest.TestCase):
    """Plot-data files written by emit_curves."""

    def setUp(self):
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        """Clean up test fixtures."""
        self.tmp.cleanup()

    def test_round_trip(self):
        truth = np.zeros((4, 16, 3))
        pred = truth + 3.0
        report = evaluate(frames(pred), frames(truth))
        path = self.dir / 'curves.tsv'
        emit_curves(report, path)
        again = parse_curves(path)
        self.assertAlmostEqual(again.mean_joint_error_mm, report.mean_joint_error_mm, places=6)
        self.assertEqual(len(again.per_joint_mean_mm), 16)
        self.assertEqual(len(again.threshold_curve), len(DEFAULT_THRESHOLDS_MM))

    def test_perfect_fraction_printed(self):
        truth = np.zeros((2, 16, 3))
        path = self.dir / 'curves.tsv'
        emit_curves(evaluate(frames(truth), frames(truth), thresholds_mm=(0.0,)), path)
        lines = path.read_text().splitlines()
        self.assertIn('0.000000\t1.000000', lines)
        self.assertEqual(lines[0], 'mean_joint_error_mm')

    def test_no_thresholds_omits_curve_block(self):
        truth = np.zeros((2, 16, 3))
        path = self.dir / 'curves.tsv'
        emit_curves(evaluate(frames(truth), frames(truth), thresholds_mm=()), path)
        text = path.read_text()
        self.assertNotIn('threshold_mm', text)
        self.assertEqual(text.count('\n\n'), 1)
        self.assertEqual(parse_curves(path).threshold_curve, [])

    def test_unwritable_destination(self):
        blocker = self.dir / 'file'
        blocker.write_text('x')
        report = MetricsReport(mean_joint_error_mm=0.0, per_joint_mean_mm=[0.0], threshold_curve=[])
        with self.assertRaises(OutputError):
            emit_curves(report, blocker / 'curves.tsv')

    def test_malformed_file(self):
        path = self.dir / 'bad.tsv'
        path.write_text('joint\tmean_error_mm\n0\t1.0\n')
        with self.assertRaises(ParseError):
            parse_curves(path)


if __name__ == '__main__':
    unittest.main()
