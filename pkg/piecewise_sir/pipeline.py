"""
The three-step estimation of the piecewise SIR models and their forecasts.

    Model 1   piecewise-constant (beta, gamma) with detected change points
    Model 2   Model 1 plus the spatial term alpha * N * Z_t
    Model 3   Model 2 plus a VAR(p) model of the residuals

Step 1 detects the change points on the target series alone, step 2 refits
all segment rates together with alpha by least squares, step 3 fits the VAR
on the step-2 residuals.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.stats import norm

from piecewise_sir import settings
from piecewise_sir.config import FitConfig
from piecewise_sir.context import region_scope
from piecewise_sir.core_model import (ScalingInfo, SegmentParams, SirDesign, UnderReporting, build_design,
                                      ols, segment_at, segment_coefficients, standardize,
                                      to_true_infected)
from piecewise_sir.detect import (ChangePointResult, detect_change_points, segment_bounds,
                                  segments_from_points)
from piecewise_sir.exceptions import (ConfigError, HorizonTooLong, InsufficientData, SegmentTooShort,
                                      UnderReportingSingular)
from piecewise_sir.spatial import SpatialWeights, build_weights, spatial_covariate
from piecewise_sir.varfit import VarModel, fit_var, screen_var_breaks

logger = logging.getLogger(__name__)

VARIANTS = ('model1', 'model2', 'model3')


def underreporting_from_config(config, a, horizon):
    if config.underreporting == 'none':
        return UnderReporting.none()
    if config.underreporting == 'quadratic':
        return UnderReporting.quadratic(a, horizon, config.cutoff)
    return UnderReporting.exponential(a, config.b, horizon, config.cutoff)


@dataclass(frozen=True)
class AlphaEstimate:
    estimate: float
    se: float
    p_value: float
    ci_low: float
    ci_high: float

    @classmethod
    def from_fit(cls, estimate, se):
        if se > 0:
            p_value = float(2.0 * norm.sf(abs(estimate) / se))
        else:
            p_value = 0.0 if estimate != 0 else 1.0
        return cls(float(estimate), float(se), p_value, float(estimate - 1.96 * se), float(estimate + 1.96 * se))

    def to_dict(self):
        return {'estimate': self.estimate, 'se': self.se, 'p_value': self.p_value,
                'ci_low': self.ci_low, 'ci_high': self.ci_high}

    @classmethod
    def from_dict(cls, data):
        return cls(data['estimate'], data['se'], data['p_value'], data['ci_low'], data['ci_high'])


@dataclass(frozen=True)
class FittedModel:
    region_id: str
    variant: str
    n_days: int
    start_date: str
    population: float
    underreporting: UnderReporting
    change_points: ChangePointResult
    segments: Tuple[SegmentParams, ...]
    scaling: Optional[ScalingInfo] = None
    scheme: Optional[str] = None
    weights: Optional[SpatialWeights] = None
    alpha: Optional[AlphaEstimate] = None
    var: Optional[VarModel] = None
    residual_tail: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    design: Optional[SirDesign] = field(default=None, compare=False, repr=False)

    @property
    def has_spatial(self):
        return self.variant in ('model2', 'model3')

    @property
    def breaks(self):
        return tuple(s.start for s in self.segments[1:])

    def restrict(self, variant):
        """The nested lower model, without refitting: Model 2 drops the VAR,
        Model 1 also drops alpha and uses the step-1 segment estimates."""
        if VARIANTS.index(variant) > VARIANTS.index(self.variant):
            raise ValueError('cannot derive {} from a {} fit'.format(variant, self.variant))
        if variant == 'model1':
            return FittedModel(self.region_id, 'model1', self.n_days, self.start_date, self.population,
                               self.underreporting, self.change_points, self.change_points.segments,
                               self.scaling, design=self.design)
        if variant == 'model2':
            return FittedModel(self.region_id, 'model2', self.n_days, self.start_date, self.population,
                               self.underreporting, self.change_points, self.segments, self.scaling,
                               self.scheme, self.weights, self.alpha, design=self.design)
        return self

    def to_dict(self):
        return {
            'schema_version': settings.SCHEMA_VERSION,
            'region_id': self.region_id,
            'variant': self.variant,
            'scheme': self.scheme,
            'n_days': self.n_days,
            'start_date': self.start_date,
            'population': self.population,
            'underreporting': self.underreporting.to_dict(),
            'scaling': None if self.scaling is None else self.scaling.to_dict(),
            'change_points': self.change_points.to_dict(),
            'segments': [s.to_dict() for s in self.segments],
            'alpha': None if self.alpha is None else self.alpha.to_dict(),
            'weights': None if self.weights is None else self.weights.to_dict(),
            'var': None if self.var is None else self.var.to_dict(),
            'residual_tail': np.asarray(self.residual_tail).tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        if data.get('schema_version') != settings.SCHEMA_VERSION:
            raise ValueError('unsupported model schema version {!r}'.format(data.get('schema_version')))
        return cls(
            data['region_id'], data['variant'], int(data['n_days']), data['start_date'], float(data['population']),
            UnderReporting.from_dict(data['underreporting']),
            ChangePointResult.from_dict(data['change_points']),
            tuple(SegmentParams.from_dict(s) for s in data['segments']),
            None if data.get('scaling') is None else ScalingInfo.from_dict(data['scaling']),
            data.get('scheme'),
            None if data.get('weights') is None else SpatialWeights.from_dict(data['weights']),
            None if data.get('alpha') is None else AlphaEstimate.from_dict(data['alpha']),
            None if data.get('var') is None else VarModel.from_dict(data['var']),
            np.asarray(data.get('residual_tail', []), dtype=float).reshape(-1, 2),
        )


def augmented_design(design, bounds, spatial=None):
    """Segment-indicator SIR regressors, optionally followed by one column
    for the spatial term. Coefficients are (beta_1, gamma_1, ..., alpha)."""
    n = len(design)
    width = 2 * len(bounds) + (0 if spatial is None else 1)
    x = np.zeros((n, 2, width))
    for j, (start, end) in enumerate(bounds):
        x[start - 1:end - 1, :, 2 * j:2 * j + 2] = design.x[start - 1:end - 1]
    if spatial is not None:
        x[:, :, -1] = spatial
    return SirDesign(design.y, x, design.clamped)


def _spatial_regressor(model, catalog, dates):
    if catalog is None:
        raise ValueError('{} predictions need the region catalog'.format(model.variant))
    z = spatial_covariate(model.weights, catalog, model.underreporting, dates)
    return model.population * z.values


def _choose_underreporting(series, config):
    if config.underreporting == 'none':
        return UnderReporting.none()
    a = config.a if config.a is not None else fit_underreporting(series, config, config.a_grid)
    return underreporting_from_config(config, a, len(series))


def _step_one(design, config):
    if config.fixed_breaks:
        points = sorted(config.fixed_breaks)
        if points[0] < 2 or points[-1] > len(design) or len(set(points)) != len(points):
            raise ConfigError('fixed change points must be distinct days in 2..{}, got {}'.format(
                len(design), points))
        return ChangePointResult((), (), tuple(points),
                                 segments_from_points(design, config.fixed_breaks))
    return detect_change_points(design, config)


def fit(series, catalog=None, config=None, u=None):
    """
    Fit Model 1, 2 or 3 (config.model) on a training series. catalog supplies
    the neighbors for Models 2 and 3; u fixes the under-reporting function
    instead of estimating it.
    """
    config = config or FitConfig()
    with region_scope(series.region_id):
        if len(series) < 4 * config.block_size:
            raise InsufficientData('{} days are too few for blocks of {} days'.format(len(series), config.block_size))
        u = u or _choose_underreporting(series, config)
        design = build_design(series, u)
        _, scaling = standardize(design)
        change_points = _step_one(design, config)
        common = dict(region_id=series.region_id, n_days=len(series), start_date=str(series.start_date),
                      population=series.population, underreporting=u, change_points=change_points,
                      scaling=scaling, design=design)
        if config.model == 'model1':
            return FittedModel(variant='model1', segments=change_points.segments, **common)

        if catalog is None:
            raise ValueError('Models 2 and 3 need a region catalog')
        catalog = catalog if series.region_id in catalog.series else catalog.with_series(series)
        target = series if config.similarity_training_only else catalog.series[series.region_id]
        weights = build_weights(catalog, series.region_id, config.scheme, config.distance_threshold, u,
                                config.max_neighbors, target=target)
        spatial = series.population * spatial_covariate(weights, catalog, u, series.dates).values
        bounds = segment_bounds(len(design), change_points.final_points)
        step_two = ols(augmented_design(design, bounds, spatial))
        segments = tuple(
            SegmentParams(start, end, float(step_two.coef[2 * j]), float(step_two.coef[2 * j + 1]),
                          float(step_two.se[2 * j]), float(step_two.se[2 * j + 1]))
            for j, (start, end) in enumerate(bounds))
        alpha = AlphaEstimate.from_fit(step_two.coef[-1], step_two.se[-1])
        logger.info('alpha=%.4f (se %.4f, p=%.3g) with %s weights over %s', alpha.estimate, alpha.se,
                    alpha.p_value, config.scheme, list(weights.neighbors))
        model = FittedModel(variant='model2', segments=segments, scheme=config.scheme, weights=weights,
                            alpha=alpha, **common)
        if config.model == 'model2':
            return model

        residuals = design.y - _base_prediction(model, design, spatial)
        var = fit_var(residuals, config.p_max)
        if config.screen_var_breaks:
            var = screen_var_breaks(residuals, var, config)
        logger.info('VAR order %d, last stationary residual segment from day %d', var.p, var.segment_start)
        tail = residuals[-max(config.p_max, var.p):] if max(config.p_max, var.p) else residuals[:0]
        return FittedModel(variant='model3', segments=segments, scheme=config.scheme, weights=weights,
                           alpha=alpha, var=var, residual_tail=tail, **common)


def _base_prediction(model, design, spatial=None):
    """SIR (+ spatial) part of the prediction for every row of design."""
    coef = segment_coefficients(model.segments, len(design))
    out = np.einsum('tij,tj->ti', design.x, coef)
    if model.has_spatial and spatial is not None:
        out = out + model.alpha.estimate * spatial[:len(design)]
    return out


def in_sample_prediction(model, series, catalog=None):
    """Predicted Y_t for t = 1..T-1 of the training window, with the design
    rebuilt from series. Model 3 adds the VAR part from var.segment_start + p."""
    design = build_design(series, model.underreporting)
    spatial = _spatial_regressor(model, catalog, series.dates) if model.has_spatial else None
    out = _base_prediction(model, design, spatial)
    if model.var is not None and model.var.p:
        residuals = design.y - out
        out = out + model.var.fitted(residuals, model.var.segment_start)
    return design, out


def in_sample_residuals(model, series, catalog=None):
    design, predicted = in_sample_prediction(model, series, catalog)
    return design.y - predicted


def mrpe(predicted, observed):
    """Mean |predicted - observed| / |observed| over nonzero observations."""
    predicted = np.asarray(predicted, dtype=float)
    observed = np.asarray(observed, dtype=float)
    keep = observed != 0
    if not keep.any():
        return float('nan')
    return float(np.mean(np.abs(predicted[keep] - observed[keep]) / np.abs(observed[keep])))


def in_sample_mrpe(model, series, catalog=None):
    """In-sample MRPE of the corrected new infections dI_f."""
    design, predicted = in_sample_prediction(model, series, catalog)
    return mrpe(predicted[:, 0], design.y[:, 0])


def underreporting_score(series, config, a):
    """In-sample MRPE of dI_f for a Model 1 fit under u with parameter a."""
    u = underreporting_from_config(config, a, len(series))
    design = build_design(series, u)
    change_points = _step_one(design, config)
    coef = segment_coefficients(change_points.segments, len(design))
    predicted = np.einsum('tij,tj->ti', design.x, coef)
    return mrpe(predicted[:, 0], design.y[:, 0])


def fit_underreporting(series, config, grid=None):
    """Grid search for the under-reporting parameter a; ties go to the
    smallest a."""
    grid = sorted(float(a) for a in (grid if grid is not None else config.a_grid))
    if not grid:
        raise ValueError('the a grid is empty')
    if config.underreporting == 'none':
        return 0.0
    best_a, best_score = None, np.inf
    for a in grid:
        try:
            score = underreporting_score(series, config, a)
        except UnderReportingSingular as exc:
            logger.warning('a=%g skipped: %s', a, exc)
            continue
        logger.debug('a=%g in-sample MRPE %.6g', a, score)
        if np.isfinite(score) and score < best_score:
            best_a, best_score = a, score
    if best_a is None:
        raise UnderReportingSingular('no value in the a grid gives a usable fit')
    logger.info('under-reporting a=%g (in-sample MRPE %.4g)', best_a, best_score)
    return best_a


@dataclass(frozen=True)
class FittedSeries:
    infected: np.ndarray
    recovered: np.ndarray


def fitted_series(model, series, catalog=None):
    """In-sample reconstruction I~(t) = I(1) + sum of predicted increments."""
    design, predicted = in_sample_prediction(model, series, catalog)
    keep = 1.0 - model.underreporting.at(np.arange(2, len(series) + 1))
    infected = series.infected[0] + np.concatenate([[0.0], np.cumsum(predicted[:, 0] * keep)])
    recovered = series.recovered[0] + np.concatenate([[0.0], np.cumsum(predicted[:, 1])])
    return FittedSeries(infected, recovered)


def alpha_inference(model):
    if model.alpha is None:
        raise ValueError('{} has no spatial term'.format(model.variant))
    return model.alpha


def segment_rate_inference(model, series=None):
    """Per-segment least-squares (beta, gamma) with standard errors from
    sigma^2 = RSS / (2 n_seg - 2)."""
    design = model.design
    if design is None:
        if series is None:
            raise ValueError('a reloaded model needs its training series for segment inference')
        design = build_design(series.head(model.n_days), model.underreporting)
    out = []
    for segment in model.segments:
        if segment.length < 3:
            raise SegmentTooShort('segment {}..{} has fewer than 3 days'.format(segment.start, segment.end - 1))
        fit_ = ols(design.subset(segment.start, segment.end))
        out.append(SegmentParams(segment.start, segment.end, float(fit_.coef[0]), float(fit_.coef[1]),
                                 float(fit_.se[0]), float(fit_.se[1])))
    return tuple(out)


@dataclass(frozen=True)
class ForecastReport:
    region_id: str
    mode: str
    origin: int
    days: np.ndarray
    dates: Tuple[str, ...]
    predicted_infected: np.ndarray
    predicted_recovered: np.ndarray
    observed_infected: Optional[np.ndarray] = None
    observed_recovered: Optional[np.ndarray] = None

    @property
    def horizon(self):
        return len(self.days)

    def _daily_errors(self, predicted, observed):
        """|pred - obs| / |obs| per forecast day, NaN where nothing was observed or obs is 0."""
        out = np.full(self.horizon, np.nan)
        if observed is None or len(observed) == 0:
            return out
        keep = ~np.isnan(observed) & (observed != 0)
        out[keep] = np.abs(predicted[keep] - observed[keep]) / np.abs(observed[keep])
        return out

    @property
    def daily_errors_infected(self):
        return self._daily_errors(self.predicted_infected, self.observed_infected)

    @property
    def daily_errors_recovered(self):
        return self._daily_errors(self.predicted_recovered, self.observed_recovered)

    @property
    def errors_infected(self):
        errors = self.daily_errors_infected
        return errors[~np.isnan(errors)]

    @property
    def errors_recovered(self):
        errors = self.daily_errors_recovered
        return errors[~np.isnan(errors)]

    @staticmethod
    def _mean(errors):
        return float(np.mean(errors)) if len(errors) else None

    @staticmethod
    def _std(errors):
        return float(np.std(errors, ddof=1)) if len(errors) > 1 else None

    @property
    def mrpe_infected(self):
        return self._mean(self.errors_infected)

    @property
    def mrpe_recovered(self):
        return self._mean(self.errors_recovered)

    @property
    def mrpe_ir(self):
        return self._mean(np.concatenate([self.errors_infected, self.errors_recovered]))

    @property
    def std_infected(self):
        return self._std(self.errors_infected)

    @property
    def std_recovered(self):
        return self._std(self.errors_recovered)

    def to_dict(self):
        def values(arr):
            return None if arr is None else [None if np.isnan(v) else float(v) for v in arr]
        return {
            'schema_version': settings.SCHEMA_VERSION,
            'region_id': self.region_id,
            'mode': self.mode,
            'origin': self.origin,
            'horizon': self.horizon,
            'days': [int(d) for d in self.days],
            'dates': list(self.dates),
            'predicted_infected': values(self.predicted_infected),
            'predicted_recovered': values(self.predicted_recovered),
            'observed_infected': values(self.observed_infected),
            'observed_recovered': values(self.observed_recovered),
            'errors_infected': values(self.daily_errors_infected),
            'errors_recovered': values(self.daily_errors_recovered),
            'mrpe_infected': self.mrpe_infected,
            'mrpe_recovered': self.mrpe_recovered,
            'mrpe_ir': self.mrpe_ir,
            'std_infected': self.std_infected,
            'std_recovered': self.std_recovered,
        }


def _observed(series, days):
    out_i = np.full(len(days), np.nan)
    out_r = np.full(len(days), np.nan)
    for k, day in enumerate(days):
        if day <= len(series):
            out_i[k] = series.infected[day - 1]
            out_r[k] = series.recovered[day - 1]
    return out_i, out_r


def _dates(model, series, days):
    first = np.datetime64(model.start_date, 'D')
    return tuple(str(first + np.timedelta64(int(d) - 1, 'D')) for d in days)


def _forecast_rolling(model, series, catalog, horizon):
    T = model.n_days
    if len(series) < T + horizon:
        raise HorizonTooLong('rolling forecasts need observations through day {}, the series ends at day {}'.format(
            T + horizon, len(series)))
    window = series.head(T + horizon)
    design = build_design(window, model.underreporting)
    spatial = _spatial_regressor(model, catalog, window.dates) if model.has_spatial else None
    base = _base_prediction(model, design, spatial)
    residuals = design.y - base
    days = np.arange(T + 1, T + horizon + 1)
    keep = 1.0 - model.underreporting.at(days)
    pred_i = np.empty(horizon)
    pred_r = np.empty(horizon)
    for k, day in enumerate(days):
        row = day - 1
        y_hat = base[row - 1].copy()
        if model.var is not None and model.var.p:
            y_hat += model.var.predict_next(residuals[:row - 1])
        pred_i[k] = series.infected[day - 2] + y_hat[0] * keep[k]
        pred_r[k] = series.recovered[day - 2] + y_hat[1]
    obs_i, obs_r = _observed(series, days)
    return days, pred_i, pred_r, obs_i, obs_r


def _forecast_free(model, series, catalog, horizon, segment=None, origin=None):
    origin = model.n_days if origin is None else int(origin)
    if origin > len(series):
        raise HorizonTooLong('origin day {} is past the end of the series'.format(origin))
    if origin < 1:
        raise ConfigError('origin day must be at least 1, got {}'.format(origin))
    if segment is not None and not 0 <= segment < len(model.segments):
        raise ConfigError('segment {} does not exist, the model has segments 0..{}'.format(
            segment, len(model.segments) - 1))
    history = series.head(origin)
    params = model.segments[segment] if segment is not None else None
    u = model.underreporting
    true_infected = to_true_infected(history, u)[-1]
    infected, recovered = history.infected[-1], history.recovered[-1]
    N = model.population

    spatial = None
    if model.has_spatial:
        last = history.date_of(origin + horizon)
        dates = np.arange(history.dates[0], last + np.timedelta64(1, 'D'), dtype='datetime64[D]')
        spatial = _spatial_regressor(model, catalog, dates)

    var_history = None
    if model.var is not None and model.var.p:
        if origin == model.n_days and len(model.residual_tail):
            var_history = list(np.asarray(model.residual_tail))
        else:
            var_history = list(in_sample_residuals(model, history, catalog))

    days = np.arange(origin + 1, origin + horizon + 1)
    keep = 1.0 - u.at(days)
    pred_i = np.empty(horizon)
    pred_r = np.empty(horizon)
    for k, day in enumerate(days):
        row = day - 1
        coef = params.coef if params is not None else segment_at(model.segments, row).coef
        susceptible = max(N - true_infected - recovered, 0.0)
        x = np.array([[susceptible * true_infected / N, -true_infected], [0.0, true_infected]])
        y_hat = x @ coef
        if spatial is not None:
            y_hat = y_hat + model.alpha.estimate * spatial[row - 1]
        if var_history is not None:
            step = model.var.predict_next(var_history)
            var_history.append(step)
            y_hat = y_hat + step
        true_infected += y_hat[0]
        infected += y_hat[0] * keep[k]
        recovered += y_hat[1]
        pred_i[k], pred_r[k] = infected, recovered
    obs_i, obs_r = _observed(series, days)
    return days, pred_i, pred_r, obs_i, obs_r


def forecast(model, series, catalog=None, horizon=settings.FORECAST_HORIZON, mode=None, segment=None,
             origin=None):
    """
    Predict I and R for the days after the training window.

    rolling  each day from the observed history through the previous day,
             I^(t) = I(t-1) + dI^(t-1); needs observations for the horizon
    free     recursion on the predicted state from origin (default: the end
             of training); segment freezes the rates of one segment, which
             gives counterfactual projections
    """
    mode = mode or settings.FORECAST_MODE
    if mode not in ('rolling', 'free'):
        raise ValueError('unknown forecast mode {!r}'.format(mode))
    start = model.n_days if origin is None or mode == 'rolling' else int(origin)
    with region_scope(model.region_id):
        if horizon == 0:
            empty = np.zeros(0)
            return ForecastReport(model.region_id, mode, start, np.zeros(0, dtype=int), (), empty, empty,
                                  empty, empty)
        if mode == 'rolling':
            days, pred_i, pred_r, obs_i, obs_r = _forecast_rolling(model, series, catalog, horizon)
        else:
            days, pred_i, pred_r, obs_i, obs_r = _forecast_free(model, series, catalog, horizon, segment, origin)
        report = ForecastReport(model.region_id, mode, start, days, _dates(model, series, days),
                                pred_i, pred_r, obs_i, obs_r)
        if report.mrpe_infected is not None:
            logger.info('%s forecast over %d days: MRPE(I)=%.4g MRPE(R)=%s', mode, horizon,
                        report.mrpe_infected, report.mrpe_recovered)
        return report
