import unittest

import numpy as np

from piecewise_sir.core_model import (EpidemicSeries, SegmentParams, UnderReporting, basic_reproduction_number,
                                      build_design, ols, reporting_factor, segment_at, segment_coefficients,
                                      standardize, to_true_infected)
from piecewise_sir.exceptions import InsufficientData, InvalidSeries, NonFiniteInput, UnderReportingSingular
from tests.helpers import sir_series


def _series(infected, recovered, population=100.0):
    dates = np.datetime64('2020-03-01', 'D') + np.arange(len(infected))
    return EpidemicSeries('r', dates, infected, recovered, population)


class EpidemicSeriesTest(unittest.TestCase):

    def test_valid_series(self):
        s = _series([1, 2, 4], [0, 0, 1])
        self.assertEqual(len(s), 3)
        self.assertEqual(str(s.start_date), '2020-03-01')
        self.assertEqual(str(s.date_of(3)), '2020-03-03')
        np.testing.assert_array_equal(s.delta_infected(), [1, 2])

    def test_too_short(self):
        with self.assertRaises(InvalidSeries):
            _series([1, 2], [0, 0])

    def test_dates_must_be_consecutive(self):
        dates = np.array(['2020-03-01', '2020-03-02', '2020-03-04'], dtype='datetime64[D]')
        with self.assertRaises(InvalidSeries):
            EpidemicSeries('r', dates, [1, 2, 3], [0, 0, 0], 100)

    def test_negative_counts(self):
        with self.assertRaises(InvalidSeries):
            _series([1, -2, 3], [0, 0, 0])

    def test_counts_above_population(self):
        with self.assertRaises(InvalidSeries):
            _series([1, 2, 90], [0, 0, 20])

    def test_non_finite(self):
        with self.assertRaises(NonFiniteInput):
            _series([1, np.nan, 3], [0, 0, 0])

    def test_head(self):
        s = _series([1, 2, 4, 8], [0, 0, 1, 2])
        np.testing.assert_array_equal(s.head(3).infected, [1, 2, 4])


class UnderReportingTest(unittest.TestCase):

    def test_none_is_zero(self):
        np.testing.assert_array_equal(UnderReporting.none().at([1, 5, 100]), [0, 0, 0])

    def test_quadratic_reaches_zero_at_horizon(self):
        u = UnderReporting.quadratic(0.5, 200)
        self.assertAlmostEqual(float(u.at(200)), 0.0)
        self.assertGreater(float(u.at(1)), 0.0)
        self.assertEqual(float(u.at(250)), 0.0)

    def test_cutoff(self):
        u = UnderReporting.quadratic(0.5, 200, cutoff=10)
        self.assertGreater(float(u.at(10)), 0.0)
        self.assertEqual(float(u.at(11)), 0.0)

    def test_exponential_identity_case(self):
        series = _series([10, 15, 22], [0, 0, 0])
        np.testing.assert_allclose(to_true_infected(series, UnderReporting.none()), [10, 15, 22])

    def test_exponential_hand_values(self):
        u = UnderReporting.exponential(0.05, 10.0, 2)
        series = _series([1, 2, 3], [0, 0, 0])
        true_infected = to_true_infected(series, u)
        self.assertAlmostEqual(true_infected[0], 11.0)
        self.assertAlmostEqual(true_infected[1], 11.0 + 1.0 + 10.0 * np.exp(-0.05))

    def test_singular(self):
        u = UnderReporting.exponential(0.0, 1e20, 10)
        with self.assertRaises(UnderReportingSingular):
            reporting_factor(u, 1, 5)

    def test_invalid_parameters(self):
        with self.assertRaises(ValueError):
            UnderReporting.quadratic(-0.1, 100)
        with self.assertRaises(ValueError):
            UnderReporting('cubic')

    def test_dict_round_trip(self):
        u = UnderReporting.exponential(0.05, 10.0, 250, cutoff=100)
        self.assertEqual(UnderReporting.from_dict(u.to_dict()), u)

    def test_transform_inverse_consistency(self):
        u = UnderReporting.quadratic(0.3, 60)
        series = sir_series((0.1,), (0.04,), n_days=60)
        true_infected = to_true_infected(series, u)
        keep = 1.0 - u.at(np.arange(2, 61))
        np.testing.assert_allclose(np.diff(true_infected) * keep, series.delta_infected(), rtol=1e-9)


class DesignTest(unittest.TestCase):

    def test_hand_computed_rows(self):
        design = build_design(_series([1, 2, 4], [0, 0, 1]), UnderReporting.none())
        self.assertEqual(len(design), 2)
        row = design.row(1)
        self.assertEqual(row.y, (1.0, 0.0))
        self.assertEqual(row.x, ((0.99, -1.0), (0.0, 1.0)))
        row = design.row(2)
        self.assertEqual(row.y, (2.0, 1.0))
        self.assertAlmostEqual(row.x[0][0], 1.96)
        self.assertEqual(row.x[0][1], -2.0)
        self.assertEqual(row.x[1], (0.0, 2.0))

    def test_zero_infection_row(self):
        design = build_design(_series([0, 0, 1], [0, 1, 1]), UnderReporting.none())
        np.testing.assert_array_equal(design.x[0], np.zeros((2, 2)))
        self.assertEqual(design.y[0, 1], 1.0)

    def test_clamped_susceptible_is_counted(self):
        u = UnderReporting.exponential(0.0, 99.0, 3)
        with self.assertLogs('piecewise_sir.core_model', level='WARNING'):
            design = build_design(_series([10, 20, 30], [0, 0, 0]), u)
        self.assertGreater(design.clamped, 0)
        self.assertTrue(np.all(design.x[:, 0, 0] >= 0))

    def test_noiseless_rates_are_recovered(self):
        series = sir_series((0.1,), (0.04,), n_days=80)
        fit = ols(build_design(series, UnderReporting.none()))
        np.testing.assert_allclose(fit.coef, [0.1, 0.04], rtol=1e-8)

    def test_subset_and_iteration(self):
        design = build_design(sir_series((0.1,), (0.04,), n_days=10), UnderReporting.none())
        part = design.subset(3, 6)
        self.assertEqual(len(part), 3)
        np.testing.assert_array_equal(part.y[0], design.y[2])
        self.assertEqual(len(list(design)), 9)


class StandardizeTest(unittest.TestCase):

    def test_unit_columns(self):
        rng = np.random.default_rng(0)
        design = build_design(sir_series((0.1,), (0.04,), n_days=51), UnderReporting.none())
        design = type(design)(design.y + rng.normal(size=design.y.shape), design.x * rng.uniform(1, 5))
        scaled, info = standardize(design)
        Y, X = scaled.stacked()
        self.assertAlmostEqual(float(np.std(Y, ddof=1)), 1.0, places=10)
        np.testing.assert_allclose(np.std(X, axis=0, ddof=1), [1.0, 1.0], atol=1e-10)
        coef = np.array([0.3, -1.2])
        np.testing.assert_allclose(info.to_raw(info.to_scaled(coef)), coef, atol=1e-12)

    def test_scaled_fit_maps_back(self):
        design = build_design(sir_series((0.1,), (0.04,), n_days=60), UnderReporting.none())
        scaled, info = standardize(design)
        np.testing.assert_allclose(info.to_raw(ols(scaled).coef), ols(design).coef, rtol=1e-8)

    def test_too_few_rows(self):
        design = build_design(_series([1, 2, 4], [0, 0, 1]), UnderReporting.none()).subset(1, 2)
        with self.assertRaises(InsufficientData):
            standardize(design)


class SegmentTest(unittest.TestCase):

    def setUp(self):
        self.segments = (SegmentParams(1, 5, 0.1, 0.04), SegmentParams(5, 10, 0.05, 0.04))

    def test_segment_at(self):
        self.assertEqual(segment_at(self.segments, 4).beta, 0.1)
        self.assertEqual(segment_at(self.segments, 5).beta, 0.05)
        self.assertEqual(segment_at(self.segments, 30).beta, 0.05)

    def test_segment_coefficients(self):
        coef = segment_coefficients(self.segments, 9)
        self.assertEqual(coef.shape, (9, 2))
        np.testing.assert_array_equal(coef[3], [0.1, 0.04])
        np.testing.assert_array_equal(coef[4], [0.05, 0.04])

    def test_reproduction_number(self):
        self.assertAlmostEqual(basic_reproduction_number(self.segments[0]), 2.5)
        self.assertEqual(basic_reproduction_number(SegmentParams(1, 2, 0.1, 0.0)), float('inf'))

    def test_empty_segment_rejected(self):
        with self.assertRaises(ValueError):
            SegmentParams(5, 5, 0.1, 0.04)


if __name__ == '__main__':
    unittest.main()
