"""
Neighbor selection, spatial weights and the spatial covariate Z_t.

Z_t is the weighted average of the neighbors' per-capita increments of the
previous day, lined up with the target's regression rows:

    Z_t = sum_j w_j (dI_j(t-1) / (N_j (1 - u(t))), dR_j(t-1) / N_j)
"""
import logging
from dataclasses import dataclass, field
from typing import Mapping, Tuple

import numpy as np
import pandas as pd

from piecewise_sir import settings
from piecewise_sir.core_model import ONE_DAY, EpidemicSeries, UnderReporting, reporting_factor
from piecewise_sir.exceptions import AlignmentError, LengthMismatch, MissingPopulation, NoNeighbors

logger = logging.getLogger(__name__)

WEIGHT_SCHEMES = ('equal', 'distance', 'similarity-top5', 'similarity-all')


def _pair(a, b):
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class RegionCatalog:
    """Populations, pairwise distances (miles) and series of a set of regions."""

    populations: Mapping[str, float]
    distances: Mapping[Tuple[str, str], float] = field(default_factory=dict)
    series: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        distances = {}
        for (a, b), miles in self.distances.items():
            if a == b:
                continue
            if miles < 0:
                raise ValueError('negative distance between {} and {}'.format(a, b))
            distances[_pair(a, b)] = float(miles)
        object.__setattr__(self, 'distances', distances)
        object.__setattr__(self, 'populations', {k: float(v) for k, v in self.populations.items()})
        object.__setattr__(self, 'series', dict(self.series))

    @property
    def region_ids(self):
        return sorted(self.populations)

    def population(self, region_id):
        try:
            return self.populations[region_id]
        except KeyError:
            raise MissingPopulation(region_id)

    def distance(self, a, b):
        if a == b:
            return 0.0
        return self.distances.get(_pair(a, b))

    def isolated(self):
        """Regions with a series but no distance rows."""
        linked = {r for pair in self.distances for r in pair}
        return sorted(r for r in self.series if r not in linked)

    def with_series(self, series):
        merged = dict(self.series)
        merged[series.region_id] = series
        return RegionCatalog(self.populations, self.distances, merged)

    def neighbor_pool(self, target_id, scheme, distance_threshold=None):
        """Candidate neighbors of a region: every other region with a series,
        restricted to regions within distance_threshold for the distance based
        schemes."""
        others = [r for r in sorted(self.series) if r != target_id]
        if scheme in ('equal', 'distance'):
            pool = []
            for region in others:
                miles = self.distance(target_id, region)
                if miles is None:
                    continue
                if distance_threshold is None or miles <= distance_threshold:
                    pool.append(region)
            return pool
        return others


@dataclass(frozen=True)
class SpatialWeights:
    scheme: str
    target: str
    neighbors: Tuple[str, ...]
    omega: np.ndarray
    excluded: Tuple[str, ...] = ()

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        if len(omega) != len(self.neighbors) or len(omega) == 0:
            raise ValueError('one positive weight per neighbor is required')
        if np.any(omega <= 0) or abs(omega.sum() - 1.0) > 1e-9:
            raise ValueError('weights must be positive and sum to 1')
        object.__setattr__(self, 'omega', omega)

    def as_dict(self):
        return dict(zip(self.neighbors, self.omega.tolist()))

    def to_dict(self):
        return {'scheme': self.scheme, 'target': self.target, 'neighbors': list(self.neighbors),
                'omega': self.omega.tolist(), 'excluded': list(self.excluded)}

    @classmethod
    def from_dict(cls, data):
        return cls(data['scheme'], data['target'], tuple(data['neighbors']),
                   np.asarray(data['omega'], dtype=float), tuple(data.get('excluded', ())))


def _per_capita_increments(series, u):
    factor = reporting_factor(u, 2, len(series))
    dI = series.delta_infected() * factor / series.population
    dR = series.delta_recovered() / series.population
    return dI, dR


def similarity_score(target, other, u=None):
    """Euclidean distance between the per-capita daily increments of two
    aligned series, both corrected with the target's under-reporting."""
    if len(target) != len(other):
        raise LengthMismatch('{} has {} days, {} has {}'.format(
            target.region_id, len(target), other.region_id, len(other)))
    u = u or UnderReporting.none()
    dI, dR = _per_capita_increments(target, u)
    dI_j, dR_j = _per_capita_increments(other, u)
    return float(np.sqrt(np.sum((dI - dI_j) ** 2) + np.sum((dR - dR_j) ** 2)))


def aligned_counts(series, dates):
    """
    Cumulative counts of a series on the given dates. Days the series does not
    cover are carried forward (backward before its first day), which makes
    their increments zero. Returns (infected, recovered, missing_mask).
    """
    index = pd.DatetimeIndex(series.dates)
    wanted = pd.DatetimeIndex(np.asarray(dates, dtype='datetime64[D]'))
    frame = pd.DataFrame({'infected': series.infected, 'recovered': series.recovered}, index=index)
    frame = frame.reindex(wanted)
    missing = frame['infected'].isna().to_numpy()
    if missing.all():
        raise AlignmentError('{} has no days in {} .. {}'.format(series.region_id, wanted[0].date(),
                                                                 wanted[-1].date()))
    frame = frame.ffill().bfill()
    return frame['infected'].to_numpy(), frame['recovered'].to_numpy(), missing


def aligned_series(series, dates):
    """A copy of series restricted and gap-filled onto the given dates."""
    infected, recovered, missing = aligned_counts(series, dates)
    if missing.any():
        logger.warning('%s: %d days missing against the target window, carried forward',
                       series.region_id, int(missing.sum()))
    return EpidemicSeries(series.region_id, dates, infected, recovered, series.population)


def _similarity_ranking(target, catalog, pool, u):
    scores = {}
    for region in pool:
        other = aligned_series(catalog.series[region], target.dates)
        scores[region] = similarity_score(target, other, u)
    return scores


def _normalized(values):
    values = np.asarray(values, dtype=float)
    return values / values.sum()


def build_weights(catalog, target_id, scheme, distance_threshold=settings.STATE_DISTANCE_MILES,
                  u=None, max_neighbors=settings.MAX_NEIGHBORS, target=None):
    """
    Neighbors and weights of a region for one of the four schemes:

        equal            1/q over the (at most max_neighbors) nearest in range
        distance         proportional to 1/d_j over the same neighbors
        similarity-top5  proportional to 1/s_j over the max_neighbors most similar
        similarity-all   proportional to 1/s_j over every other region

    target overrides the catalog's series of target_id, so similarity can be
    scored on a training window only.
    """
    if scheme not in WEIGHT_SCHEMES:
        raise ValueError('unknown weight scheme {!r}'.format(scheme))
    pool = catalog.neighbor_pool(target_id, scheme, distance_threshold)
    if not pool:
        raise NoNeighbors('{} has no eligible neighbors for the {} scheme'.format(target_id, scheme))
    excluded = []

    if scheme in ('equal', 'distance'):
        ranked = sorted(pool, key=lambda r: (catalog.distance(target_id, r), r))[:max_neighbors]
        keys = {r: catalog.distance(target_id, r) for r in ranked}
    else:
        target = target if target is not None else catalog.series[target_id]
        scores = _similarity_ranking(target, catalog, pool, u or UnderReporting.none())
        ranked = sorted(pool, key=lambda r: (scores[r], r))
        if scheme == 'similarity-top5':
            ranked = ranked[:max_neighbors]
        keys = {r: scores[r] for r in ranked}

    if scheme != 'equal':
        excluded = [r for r in ranked if keys[r] == 0]
        if excluded:
            logger.warning('%s: neighbors %s excluded, zero %s', target_id, excluded,
                           'distance' if scheme == 'distance' else 'similarity score')
        ranked = [r for r in ranked if keys[r] > 0]
        if not ranked:
            raise NoNeighbors('{}: every neighbor has a zero denominator'.format(target_id))
        omega = _normalized([1.0 / keys[r] for r in ranked])
    else:
        omega = np.full(len(ranked), 1.0 / len(ranked))
    logger.debug('%s weights (%s): %s', target_id, scheme, dict(zip(ranked, omega.round(4))))
    return SpatialWeights(scheme, target_id, tuple(ranked), omega, tuple(excluded))


@dataclass(frozen=True)
class SpatialCovariate:
    """Z_t for t = 1..len(values); day0_missing marks Z_1 set from a
    missing neighbor day-0 increment."""

    values: np.ndarray
    day0_missing: bool = False
    gap_filled: int = 0

    def __len__(self):
        return len(self.values)


def spatial_covariate(weights, catalog, u=None, dates=None):
    """
    Z_t paired with the target's regression rows t = 1..len(dates)-1.
    dates defaults to the target's own series; passing a longer range yields
    covariates for forecast days.
    """
    u = u or UnderReporting.none()
    if dates is None:
        dates = catalog.series[weights.target].dates
    dates = np.asarray(dates, dtype='datetime64[D]')
    n_rows = len(dates) - 1
    lookup = np.concatenate([[dates[0] - ONE_DAY], dates[:-1]])
    factor = reporting_factor(u, 1, n_rows)
    z = np.zeros((n_rows, 2))
    day0_missing = False
    gap_filled = 0
    for region, omega in zip(weights.neighbors, weights.omega):
        neighbor = catalog.series[region]
        infected, recovered, missing = aligned_counts(neighbor, lookup)
        if missing[0]:
            day0_missing = True
        gap_filled += int(missing[1:].sum())
        N_j = catalog.population(region)
        dI = np.diff(infected)
        dR = np.diff(recovered)
        z[:, 0] += omega * dI * factor / N_j
        z[:, 1] += omega * dR / N_j
    if day0_missing:
        logger.warning('%s: a neighbor has no day before %s, its Z_1 contribution is 0',
                       weights.target, dates[0])
    if gap_filled:
        logger.warning('%s: %d neighbor days missing, filled with zero increments', weights.target, gap_filled)
    return SpatialCovariate(z, day0_missing, gap_filled)


def select_weight_scheme(series, catalog, config, n_test):
    """
    Fit Model 2 with each weight scheme on all but the last n_test days and
    keep the scheme with the lowest out-of-sample MRPE of I. Returns
    (scheme, {scheme: mrpe}); schemes without neighbors are skipped.
    """
    from piecewise_sir import pipeline

    train = series.head(len(series) - n_test)
    scores = {}
    for scheme in WEIGHT_SCHEMES:
        try:
            model = pipeline.fit(train, catalog, config.replace(model='model2', scheme=scheme))
        except NoNeighbors as exc:
            logger.info('scheme %s skipped: %s', scheme, exc)
            continue
        report = pipeline.forecast(model, series, catalog, n_test, mode='rolling')
        scores[scheme] = report.mrpe_infected
    scored = {s: v for s, v in scores.items() if v is not None}
    if not scored:
        raise NoNeighbors('{} has no scorable weight scheme'.format(series.region_id))
    best = min(scored, key=scored.get)
    logger.info('weight scheme %s selected, out-of-sample MRPE(I) by scheme %s', best, scores)
    return best, scores
