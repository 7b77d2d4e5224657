import itertools

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import DimensionMismatch, EmptyInput, NonFiniteVector, ZeroVector
from core.vecspace import (
    as_gradient, coordinate_median, cosine, count_distances, distance_meter, euclidean, gap_boundary,
    metered_stage, minority_gap_boundary,
)


class CosineTests(SimpleTestCase):
    def test_antiparallel(self):
        self.assertEqual(cosine(np.array([1.0, 0.0]), np.array([-1.0, 0.0])), -1.0)

    def test_identity(self):
        self.assertEqual(cosine(np.array([3.0, 4.0]), np.array([3.0, 4.0])), 1.0)

    def test_forty_five_degrees(self):
        self.assertAlmostEqual(cosine(np.array([1.0, 0.0]), np.array([1.0, 1.0])), 1 / np.sqrt(2), delta=1e-9)

    def test_zero_vector_raises(self):
        with self.assertRaises(ZeroVector):
            cosine(np.zeros(3), np.ones(3))

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatch):
            cosine(np.ones(2), np.ones(3))

    def test_symmetric_and_scale_signature(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = rng.normal(size=7), rng.normal(size=7)
            self.assertAlmostEqual(cosine(a, b), cosine(b, a), places=12)
            k = rng.uniform(0.1, 10)
            self.assertAlmostEqual(cosine(a, k * a), 1.0, places=12)
            self.assertAlmostEqual(cosine(a, -k * a), -1.0, places=12)

    def test_result_is_clamped(self):
        v = np.full(1000, 0.1)
        value = cosine(v, v.copy())
        self.assertLessEqual(value, 1.0)
        self.assertGreaterEqual(value, -1.0)


class EuclideanTests(SimpleTestCase):
    def test_three_four_five(self):
        self.assertEqual(euclidean(np.array([0.0, 0.0]), np.array([3.0, 4.0])), 5.0)

    def test_identity(self):
        v = np.array([1.5, -2.0, 7.0])
        self.assertEqual(euclidean(v, v), 0.0)

    def test_hand_arithmetic(self):
        self.assertEqual(euclidean(np.array([1.0, 2.0, 3.0]), np.array([4.0, 6.0, 3.0])), 5.0)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatch):
            euclidean(np.ones(2), np.ones(4))

    def test_triangle_inequality(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            a, b, c = rng.normal(size=(3, 5))
            self.assertLessEqual(euclidean(a, c), euclidean(a, b) + euclidean(b, c) + 1e-12)


class CoordinateMedianTests(SimpleTestCase):
    def test_odd_count(self):
        result = coordinate_median([np.array([1.0, 2.0]), np.array([3.0, 0.0]), np.array([2.0, 1.0])])
        np.testing.assert_array_equal(result, [2.0, 1.0])

    def test_even_count_midpoint(self):
        result = coordinate_median([np.array([0.0, 0.0]), np.array([2.0, 2.0])])
        np.testing.assert_array_equal(result, [1.0, 1.0])

    def test_majority_value(self):
        result = coordinate_median([np.array([1.0]), np.array([1.0]), np.array([9.0])])
        np.testing.assert_array_equal(result, [1.0])

    def test_empty_input(self):
        with self.assertRaises(EmptyInput):
            coordinate_median([])

    def test_matches_per_coordinate_sort(self):
        rng = np.random.default_rng(5)
        for n in range(1, 9):
            vectors = list(rng.normal(size=(n, 4)))
            expected = []
            for j in range(4):
                column = sorted(v[j] for v in vectors)
                mid = n // 2
                expected.append(column[mid] if n % 2 else (column[mid - 1] + column[mid]) / 2)
            np.testing.assert_allclose(coordinate_median(vectors), expected, rtol=0, atol=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(8)
        vectors = list(rng.normal(size=(5, 3)))
        reference = coordinate_median(vectors)
        for order in itertools.permutations(range(5)):
            np.testing.assert_array_equal(coordinate_median([vectors[i] for i in order]), reference)


class GapBoundaryTests(SimpleTestCase):
    def test_largest_gap_midpoint(self):
        self.assertAlmostEqual(gap_boundary([0.1, 0.2, 0.9, 1.0], min_gap=0), 0.55, places=12)

    def test_single_value_has_no_gap(self):
        self.assertIsNone(gap_boundary([0.5], min_gap=0))

    def test_gap_below_minimum(self):
        self.assertIsNone(gap_boundary([0.1, 0.11, 0.12], min_gap=0.05))

    def test_unsorted_input(self):
        self.assertAlmostEqual(gap_boundary([2.0, 0.1, 0.12]), 1.06, places=12)

    def test_empty_raises(self):
        with self.assertRaises(EmptyInput):
            gap_boundary([])

    def test_boundary_partitions_values(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            values = list(rng.uniform(-1, 1, size=rng.integers(2, 12)))
            boundary = gap_boundary(values)
            if boundary is None:
                continue
            self.assertGreater(boundary, min(values))
            self.assertLess(boundary, max(values))
            self.assertTrue(any(v < boundary for v in values))
            self.assertTrue(any(v > boundary for v in values))


class MinorityGapBoundaryTests(SimpleTestCase):
    def test_gap_at_the_top_is_not_admissible(self):
        self.assertIsNone(minority_gap_boundary([0.40, 0.41, 0.42, 0.43, 0.99], min_gap=0.1))

    def test_picks_widest_gap_under_a_minority(self):
        self.assertAlmostEqual(minority_gap_boundary([0.1, 0.12, 0.6, 0.62, 0.64, 0.99]), 0.36, places=12)

    def test_two_values_never_split(self):
        self.assertIsNone(minority_gap_boundary([0.0, 1.0]))

    def test_empty_raises(self):
        with self.assertRaises(EmptyInput):
            minority_gap_boundary([])

    def test_less_than_half_below(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            values = list(rng.uniform(-1, 1, size=rng.integers(1, 12)))
            boundary = minority_gap_boundary(values)
            if boundary is None:
                continue
            self.assertLess(2 * sum(v < boundary for v in values), len(values))
            self.assertGreater(boundary, min(values))


class GradientCoercionTests(SimpleTestCase):
    def test_rejects_nan(self):
        with self.assertRaises(NonFiniteVector):
            as_gradient([1.0, float('nan')])

    def test_flattens(self):
        self.assertEqual(as_gradient([[1, 2], [3, 4]]).shape, (4,))


class DistanceMeterTests(SimpleTestCase):
    def test_counts_per_stage(self):
        a, b = np.ones(3), np.arange(3.0) + 1
        with distance_meter() as meter:
            with metered_stage('alpha'):
                cosine(a, b)
                euclidean(a, b)
            with metered_stage('beta'):
                euclidean(a, b)
        self.assertEqual(meter.counts['alpha'], 2)
        self.assertEqual(meter.counts['beta'], 1)
        self.assertEqual(meter.total, 3)

    def test_no_meter_outside_block(self):
        with distance_meter() as meter:
            pass
        euclidean(np.ones(2), np.zeros(2))
        self.assertEqual(meter.total, 0)

    def test_bulk_counts(self):
        with distance_meter() as meter:
            with metered_stage('grouping'):
                count_distances(45)
            count_distances()
        self.assertEqual(meter.counts['grouping'], 45)
        self.assertEqual(meter.counts['unstaged'], 1)
