import contextlib
import io
import json
import logging
import tempfile
import unittest
from pathlib import Path

import pandas as pd

from piecewise_sir import cli

FIT_MODEL1 = ['--model', '1', '--breaks', '100', '--underreporting', 'none', '--holdout', '20']


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


class CliTestCase(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls._tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls._tmp.name)
        cls.sim = cls.root / 'sim'
        code, _, err = run('simulate', '--scenario', 'E', '--out', cls.sim)
        assert code == 0, err

    @classmethod
    def tearDownClass(cls):
        logging.getLogger('piecewise_sir').removeHandler(cli._handler)
        cls._tmp.cleanup()

    def path(self, name):
        return self.root / name


class SimulateTest(CliTestCase):

    def test_files(self):
        for name in ('series.csv', 'population.csv', 'distances.csv', 'truth.json'):
            self.assertTrue((self.sim / name).exists(), name)
        truth = json.loads((self.sim / 'truth.json').read_text())
        self.assertEqual(truth['breaks'], [100])

    def test_same_seed_same_files(self):
        code, stdout, _ = run('simulate', '--scenario', 'e', '--out', self.path('again'))
        self.assertEqual(code, 0)
        self.assertIn('series.csv', stdout)
        self.assertEqual((self.sim / 'series.csv').read_bytes(), (self.path('again') / 'series.csv').read_bytes())

    def test_other_seed(self):
        self.assertEqual(run('simulate', '--scenario', 'E', '--seed', 7, '--out', self.path('seed7'))[0], 0)
        self.assertNotEqual((self.sim / 'series.csv').read_bytes(),
                            (self.path('seed7') / 'series.csv').read_bytes())

    def test_unknown_scenario(self):
        code, _, err = run('simulate', '--scenario', 'Q', '--out', self.path('q'))
        self.assertEqual(code, 2)
        self.assertIn('unknown scenario', err)


class FitTest(CliTestCase):

    def test_model1(self):
        out = self.path('fit1')
        code, _, err = run('fit', self.sim, '--region', 'target', '--out', out, *FIT_MODEL1)
        self.assertEqual(code, 0, err)
        model = json.loads((out / 'target' / 'model.json').read_text())
        self.assertEqual(model['variant'], 'model1')
        self.assertEqual(model['n_days'], 200)
        self.assertIsNone(model['alpha'])
        points = pd.read_csv(out / 'target' / 'change_points.csv')
        self.assertEqual(list(points['day']), [100])
        self.assertEqual(points['date'][0], '2020-06-08')
        segments = pd.read_csv(out / 'target' / 'segments.csv')
        self.assertEqual(list(segments['end_day']), [99, 199])
        acf = pd.read_csv(out / 'target' / 'acf.csv')
        self.assertEqual(acf['acf_infected'][0], 1.0)
        self.assertEqual(len(pd.read_csv(out / 'target' / 'residuals.csv')), 199)
        self.assertEqual(len(pd.read_csv(out / 'target' / 'fitted.csv')), 200)

    def test_model2_is_reproducible(self):
        args = ['fit', self.sim, '--region', 'target', '--model', '2', '--weights', 'similarity-top5',
                '--breaks', '100', '--underreporting', 'none', '--holdout', '20']
        self.assertEqual(run(*args, '--out', self.path('fit2a'))[0], 0)
        self.assertEqual(run(*args, '--out', self.path('fit2b'))[0], 0)
        first = (self.path('fit2a') / 'target' / 'model.json').read_bytes()
        self.assertEqual(first, (self.path('fit2b') / 'target' / 'model.json').read_bytes())
        model = json.loads(first)
        self.assertIsNotNone(model['alpha'])
        self.assertEqual(model['weights']['neighbors'], ['neighbor'])

    def test_config_file_and_flag_precedence(self):
        config = self.path('config.json')
        config.write_text(json.dumps({'model': 'model1', 'fixed_breaks': [100], 'underreporting': 'none'}))
        out = self.path('fitcfg')
        self.assertEqual(run('--config', config, 'fit', self.sim, '--region', 'target', '--out', out)[0], 0)
        self.assertEqual(json.loads((out / 'target' / 'model.json').read_text())['variant'], 'model1')
        out = self.path('fitcfg2')
        self.assertEqual(run('--config', config, 'fit', self.sim, '--region', 'target', '--model', '2',
                             '--weights', 'equal', '--out', out)[0], 0)
        self.assertEqual(json.loads((out / 'target' / 'model.json').read_text())['variant'], 'model2')

    def test_bad_config_key(self):
        config = self.path('bad.json')
        config.write_text(json.dumps({'modle': 'model1'}))
        code, _, err = run('--config', config, 'fit', self.sim, '--out', self.path('bad'))
        self.assertEqual(code, 1)
        self.assertIn('unknown config key', err)

    def test_unknown_region(self):
        code, _, err = run('fit', self.sim, '--region', 'atlantis', '--out', self.path('none'), *FIT_MODEL1)
        self.assertEqual(code, 1)
        self.assertIn('atlantis', err)

    def test_bad_model_flag(self):
        self.assertEqual(run('fit', self.sim, '--model', '4', '--out', self.path('m4'))[0], 2)

    def test_bad_breaks(self):
        base = ['fit', self.sim, '--region', 'target', '--model', '1', '--underreporting', 'none', '--holdout', '20']
        for breaks in ('1', '500', '100,100'):
            with self.subTest(breaks=breaks):
                code, _, err = run(*base, '--breaks', breaks, '--out', self.path('badbreaks'))
                self.assertEqual(code, 1)
                self.assertIn('fixed change points', err)

    def test_holdout_longer_than_the_series(self):
        args = ['fit', self.sim, '--region', 'target', '--model', '1', '--breaks', '100', '--underreporting', 'none']
        for holdout in (220, 500):
            with self.subTest(holdout=holdout):
                code, _, err = run(*args, '--holdout', holdout, '--out', self.path('longholdout'))
                self.assertEqual(code, 1)
                self.assertIn('holdout', err)

    def test_negative_settings(self):
        code, _, err = run('fit', self.sim, '--region', 'target', '--underreporting', 'quadratic', '--a', -0.1,
                           '--out', self.path('nega'))
        self.assertEqual(code, 1)
        self.assertIn('nonnegative', err)
        code, _, err = run('simulate', '--scenario', 'E', '--seed', -1, '--out', self.path('negseed'))
        self.assertEqual(code, 1)
        self.assertIn('seed', err)


class ForecastTest(CliTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.fits = cls.root / 'fits'
        code, _, err = run('fit', cls.sim, '--region', 'target', '--out', cls.fits, *FIT_MODEL1)
        assert code == 0, err
        cls.model = cls.fits / 'target' / 'model.json'

    def test_rolling(self):
        out = self.path('fc')
        code, stdout, err = run('forecast', self.model, self.sim, '--horizon', 14, '--out', out)
        self.assertEqual(code, 0, err)
        self.assertIn('forecast.json', stdout)
        report = json.loads((out / 'forecast.json').read_text())
        self.assertEqual(report['horizon'], 14)
        self.assertEqual(report['days'][0], 201)
        self.assertLess(report['mrpe_infected'], 0.5)
        self.assertEqual(len(pd.read_csv(out / 'forecast.csv')), 14)

    def test_zero_horizon(self):
        out = self.path('fc0')
        self.assertEqual(run('forecast', self.model, self.sim, '--horizon', 0, '--out', out)[0], 0)
        report = json.loads((out / 'forecast.json').read_text())
        self.assertEqual(report['days'], [])
        self.assertIsNone(report['mrpe_infected'])

    def test_counterfactual(self):
        out = self.path('fcseg')
        self.assertEqual(run('forecast', self.model, self.sim, '--mode', 'free', '--segment', 0,
                             '--horizon', 30, '--out', out)[0], 0)
        report = json.loads((out / 'forecast.json').read_text())
        self.assertEqual(report['mode'], 'free')
        self.assertIsNone(report['observed_infected'][-1])

    def test_rolling_past_the_data(self):
        code, _, err = run('forecast', self.model, self.sim, '--horizon', 40, '--out', self.path('fclong'))
        self.assertEqual(code, 1)
        self.assertIn('rolling', err)

    def test_not_a_model(self):
        bogus = self.path('bogus.json')
        bogus.write_text('{"schema_version": 1}')
        code, _, err = run('forecast', bogus, self.sim, '--out', self.path('fcbogus'))
        self.assertEqual(code, 1)
        self.assertIn('not a fitted model', err)

    def test_model_path_is_not_a_config_flag(self):
        args = cli.build_parser().parse_args(['forecast', str(self.model), str(self.sim), '--out', 'x'])
        self.assertEqual(args.model_path, str(self.model))
        self.assertEqual(cli.resolve_config(args).model, cli.FitConfig().model)

    def test_per_day_errors(self):
        out = self.path('fcerr')
        self.assertEqual(run('forecast', self.model, self.sim, '--horizon', 7, '--out', out)[0], 0)
        report = json.loads((out / 'forecast.json').read_text())
        self.assertEqual(len(report['errors_infected']), 7)
        self.assertEqual(len(report['errors_recovered']), 7)
        self.assertAlmostEqual(sum(report['errors_infected']) / 7, report['mrpe_infected'])
        frame = pd.read_csv(out / 'forecast.csv')
        self.assertAlmostEqual(frame['error_recovered'].mean(), report['mrpe_recovered'])

    def test_unknown_segment(self):
        for segment in (5, -1):
            with self.subTest(segment=segment):
                code, _, err = run('forecast', self.model, self.sim, '--mode', 'free', '--segment', segment,
                                   '--out', self.path('fcbadseg'))
                self.assertEqual(code, 1)
                self.assertIn('segment {}'.format(segment), err)


class IngestCheckTest(CliTestCase):

    def test_report(self):
        out = self.path('report.csv')
        code, stdout, _ = run('ingest-check', self.sim, '--out', out)
        self.assertEqual(code, 0)
        self.assertIn('target', stdout)
        report = pd.read_csv(out)
        self.assertEqual(list(report['region_id']), ['neighbor', 'target'])
        self.assertEqual(list(report['days']), [221, 220])
        self.assertFalse(report['isolated'].any())

    def test_missing_directory(self):
        self.assertEqual(run('ingest-check', self.path('nowhere'))[0], 1)


class ReplicateCommandTest(CliTestCase):

    def test_small_study(self):
        out = self.path('study')
        code, _, err = run('--jobs', 2, 'replicate', '--scenario', 'D', '--reps', 2, '--breaks', '100,200',
                           '--underreporting', 'none', '--out', out)
        self.assertEqual(code, 0, err)
        summary = pd.read_csv(out / 'summary_D.csv')
        self.assertIn('beta_3', set(summary['statistic']))
        self.assertEqual(len(pd.read_csv(out / 'replicates_D.csv')), 2)

    def test_needs_a_replicate(self):
        self.assertEqual(run('replicate', '--scenario', 'D', '--reps', 0, '--out', self.path('s0'))[0], 1)


if __name__ == '__main__':
    unittest.main()
