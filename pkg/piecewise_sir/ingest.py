"""
Reading case data and assembling a RegionCatalog.

CSV layouts (UTF-8, comma separated, header row required):

    cases.csv       date,region_id,cases,deaths       cumulative counts
    national.csv    date,recovered,deaths             nationwide cumulative counts
    population.csv  region_id,population
    distances.csv   region_id_a,region_id_b,miles
    series.csv      date,region_id,infected,recovered (a serialized catalog)
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np
import pandas as pd

from piecewise_sir.core_model import EpidemicSeries
from piecewise_sir.exceptions import (DuplicateRow, LengthMismatch, MissingPopulation,
                                      NonMonotonicDates, ParseError)
from piecewise_sir.spatial import RegionCatalog

logger = logging.getLogger(__name__)

CASES_COLUMNS = ('date', 'region_id', 'cases', 'deaths')
NATIONAL_COLUMNS = ('date', 'recovered', 'deaths')
POPULATION_COLUMNS = ('region_id', 'population')
DISTANCE_COLUMNS = ('region_id_a', 'region_id_b', 'miles')
SERIES_COLUMNS = ('date', 'region_id', 'infected', 'recovered')

CASES_FILE = 'cases.csv'
NATIONAL_FILE = 'national.csv'
POPULATION_FILE = 'population.csv'
DISTANCES_FILE = 'distances.csv'
SERIES_FILE = 'series.csv'


def _read_table(path, columns):
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ParseError('{} is empty, a header row is required'.format(path), line=1)
    except (OSError, pd.errors.ParserError) as exc:
        raise ParseError('cannot read {}: {}'.format(path, exc))
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ParseError('{} lacks columns {}'.format(path, ', '.join(missing)), line=1)
    frame = frame[list(columns)].copy()
    frame['line'] = np.arange(2, len(frame) + 2)
    return frame


def _first_bad(frame, mask):
    return int(frame.loc[mask, 'line'].iloc[0])


def _parse_dates(frame, path):
    dates = pd.to_datetime(frame['date'], format='%Y-%m-%d', errors='coerce')
    if dates.isna().any():
        raise ParseError('{}: dates must be ISO-8601 (YYYY-MM-DD)'.format(path), line=_first_bad(frame, dates.isna()))
    return dates


def _parse_numbers(frame, column, path, nonnegative=True):
    values = pd.to_numeric(frame[column], errors='coerce')
    bad = values.isna() | ~np.isfinite(values.fillna(0.0))
    if nonnegative:
        bad |= values < 0
    if bad.any():
        raise ParseError('{}: column {} needs {}numbers'.format(path, column, 'nonnegative ' if nonnegative else ''),
                         line=_first_bad(frame, bad))
    return values.astype(float)


def _reject_blank(frame, column, path):
    blank = frame[column].str.strip() == ''
    if blank.any():
        raise ParseError('{}: {} must not be empty'.format(path, column), line=_first_bad(frame, blank))


@dataclass(frozen=True)
class CaseRecords:
    """Per-region cumulative cases/deaths indexed by date, gaps filled."""

    regions: Dict[str, pd.DataFrame] = field(default_factory=dict)
    gap_fills: Dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.regions)

    @property
    def region_ids(self):
        return sorted(self.regions)


def fill_gaps(frame):
    """Reindex a date-indexed frame to every day of its range, carrying the
    cumulative counts forward. Returns (frame, filled day count)."""
    full = pd.date_range(frame.index[0], frame.index[-1], freq='D')
    filled = len(full) - len(frame)
    return frame.reindex(full).ffill(), filled


def read_cases(path):
    """Parse cases.csv. Rows of one region must have increasing dates."""
    frame = _read_table(path, CASES_COLUMNS)
    if frame.empty:
        return CaseRecords()
    _reject_blank(frame, 'region_id', path)
    frame['date'] = _parse_dates(frame, path)
    for column in ('cases', 'deaths'):
        frame[column] = _parse_numbers(frame, column, path)
    duplicated = frame.duplicated(['date', 'region_id'])
    if duplicated.any():
        line = _first_bad(frame, duplicated)
        raise DuplicateRow('{}: duplicate (date, region_id) row'.format(path), line=line)

    regions, gap_fills = {}, {}
    for region_id, rows in frame.groupby('region_id', sort=True):
        backwards = rows['date'].diff() <= pd.Timedelta(0)
        if backwards.any():
            raise NonMonotonicDates('{}: dates of {} are not increasing'.format(path, region_id),
                                    line=_first_bad(rows, backwards))
        series, filled = fill_gaps(rows.set_index('date')[['cases', 'deaths']])
        if filled:
            logger.warning('%s: %d missing days filled by carrying counts forward', region_id, filled)
        regions[region_id] = series
        gap_fills[region_id] = filled
    return CaseRecords(regions, gap_fills)


def read_national(path):
    frame = _read_table(path, NATIONAL_COLUMNS)
    frame['date'] = _parse_dates(frame, path)
    for column in ('recovered', 'deaths'):
        frame[column] = _parse_numbers(frame, column, path)
    duplicated = frame.duplicated(['date'])
    if duplicated.any():
        raise DuplicateRow('{}: duplicate date row'.format(path), line=_first_bad(frame, duplicated))
    return frame.set_index('date')[['recovered', 'deaths']].sort_index()


def read_populations(path):
    frame = _read_table(path, POPULATION_COLUMNS)
    _reject_blank(frame, 'region_id', path)
    values = _parse_numbers(frame, 'population', path)
    if (values <= 0).any():
        raise ParseError('{}: populations must be positive'.format(path), line=_first_bad(frame, values <= 0))
    duplicated = frame.duplicated(['region_id'])
    if duplicated.any():
        raise DuplicateRow('{}: duplicate region row'.format(path), line=_first_bad(frame, duplicated))
    return dict(zip(frame['region_id'], values))


def read_distances(path):
    frame = _read_table(path, DISTANCE_COLUMNS)
    miles = _parse_numbers(frame, 'miles', path)
    out = {}
    for a, b, d, line in zip(frame['region_id_a'], frame['region_id_b'], miles, frame['line']):
        key = (a, b) if a <= b else (b, a)
        if key in out:
            raise DuplicateRow('{}: distance {} - {} given twice'.format(path, a, b), line=int(line))
        out[key] = float(d)
    return out


def derive_recovered(region_deaths, national_recovered, national_deaths):
    """
    R(t) = deaths(t) * recovered_nat(t) / deaths_nat(t), 0 on days without
    national deaths. A dip of the national ratio can make R decrease; that
    is reported, not corrected.
    """
    region_deaths = np.asarray(region_deaths, dtype=float)
    national_recovered = np.asarray(national_recovered, dtype=float)
    national_deaths = np.asarray(national_deaths, dtype=float)
    if not (len(region_deaths) == len(national_recovered) == len(national_deaths)):
        raise LengthMismatch('regional deaths and national series differ in length')
    ratio = np.divide(national_recovered, national_deaths, out=np.zeros_like(national_recovered),
                      where=national_deaths > 0)
    recovered = region_deaths * ratio
    dips = int(np.count_nonzero(np.diff(recovered) < 0))
    if dips:
        logger.warning('derived recovered series decreases on %d days', dips)
    return recovered


def trim_to_first_case(frame, start=None, end=None):
    """Restrict a region's frame to [start, end] and drop the leading days
    before its first positive case."""
    if start is not None:
        frame = frame[frame.index >= pd.Timestamp(start)]
    if end is not None:
        frame = frame[frame.index <= pd.Timestamp(end)]
    positive = np.flatnonzero(frame['cases'].to_numpy() >= 1)
    if len(positive) == 0:
        return frame.iloc[0:0]
    return frame.iloc[positive[0]:]


def assemble_catalog(cases, populations, distances=None, national=None, start=None, end=None):
    """
    Build the catalog: I(t) is the cumulative case count, R(t) is derived
    from deaths with the national recovered/deaths ratio (deaths themselves
    when no national table is given). Regions shorter than 3 days after
    trimming are left out.
    """
    series = {}
    for region_id in cases.region_ids:
        if region_id not in populations:
            raise MissingPopulation(region_id)
        frame = trim_to_first_case(cases.regions[region_id], start, end)
        if len(frame) < 3:
            logger.warning('%s: fewer than 3 days after the first case, left out', region_id)
            continue
        if national is not None:
            aligned = national.reindex(frame.index).ffill().fillna(0.0)
            recovered = derive_recovered(frame['deaths'], aligned['recovered'], aligned['deaths'])
        else:
            recovered = frame['deaths'].to_numpy()
        series[region_id] = EpidemicSeries(region_id, frame.index.to_numpy().astype('datetime64[D]'),
                                           frame['cases'].to_numpy(), recovered, populations[region_id])
    catalog = RegionCatalog(populations, distances or {}, series)
    isolated = catalog.isolated()
    if isolated and len(series) > 1:
        logger.warning('regions without distance rows, excluded from distance neighbor pools: %s', isolated)
    return catalog


def write_catalog(catalog, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for region_id in sorted(catalog.series):
        s = catalog.series[region_id]
        rows.append(pd.DataFrame({'date': [str(d) for d in s.dates], 'region_id': region_id,
                                  'infected': s.infected, 'recovered': s.recovered}))
    frame = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=list(SERIES_COLUMNS))
    frame.to_csv(directory / SERIES_FILE, index=False)
    pd.DataFrame({'region_id': catalog.region_ids,
                  'population': [catalog.populations[r] for r in catalog.region_ids]}).to_csv(
        directory / POPULATION_FILE, index=False)
    pairs = sorted(catalog.distances)
    pd.DataFrame({'region_id_a': [a for a, _ in pairs], 'region_id_b': [b for _, b in pairs],
                  'miles': [catalog.distances[p] for p in pairs]}).to_csv(directory / DISTANCES_FILE, index=False)
    return directory


def read_series(path, populations):
    frame = _read_table(path, SERIES_COLUMNS)
    if frame.empty:
        return {}
    frame['date'] = _parse_dates(frame, path)
    for column in ('infected', 'recovered'):
        frame[column] = _parse_numbers(frame, column, path)
    out = {}
    for region_id, rows in frame.groupby('region_id', sort=True):
        if region_id not in populations:
            raise MissingPopulation(region_id)
        rows = rows.set_index('date')
        out[region_id] = EpidemicSeries(region_id, rows.index.to_numpy().astype('datetime64[D]'),
                                        rows['infected'].to_numpy(), rows['recovered'].to_numpy(),
                                        populations[region_id])
    return out


def load_catalog(directory):
    directory = Path(directory)
    populations = read_populations(directory / POPULATION_FILE)
    distances = read_distances(directory / DISTANCES_FILE) if (directory / DISTANCES_FILE).exists() else {}
    return RegionCatalog(populations, distances, read_series(directory / SERIES_FILE, populations))


def load_data_dir(directory, start=None, end=None):
    """A serialized catalog (series.csv) when present, raw case files otherwise."""
    directory = Path(directory)
    if (directory / SERIES_FILE).exists():
        return load_catalog(directory)
    if not (directory / CASES_FILE).exists():
        raise ParseError('{} holds neither {} nor {}'.format(directory, SERIES_FILE, CASES_FILE))
    cases = read_cases(directory / CASES_FILE)
    populations = read_populations(directory / POPULATION_FILE)
    distances = read_distances(directory / DISTANCES_FILE) if (directory / DISTANCES_FILE).exists() else {}
    national = read_national(directory / NATIONAL_FILE) if (directory / NATIONAL_FILE).exists() else None
    return assemble_catalog(cases, populations, distances, national, start, end)
