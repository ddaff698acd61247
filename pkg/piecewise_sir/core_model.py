"""
Domain types for regional epidemic series and the linear regression form of
the discrete SIR model.

The SIR difference equations

    S(t+1) - S(t)     = -beta S(t) I_f(t) / N
    I_f(t+1) - I_f(t) =  beta S(t) I_f(t) / N - gamma I_f(t)
    R(t+1) - R(t)     =  gamma I_f(t)

are linear in (beta, gamma), so every day t = 1..T-1 gives a 2-equation
regression row Y_t = X_t B. Day indices are 1-based throughout the package;
row t of a design always pairs with day t of the series.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from piecewise_sir.exceptions import (InsufficientData, InvalidSeries, NonFiniteInput,
                                      UnderReportingSingular)

logger = logging.getLogger(__name__)

ONE_DAY = np.timedelta64(1, 'D')


def _frozen(values):
    values.flags.writeable = False
    return values


def _numeric(name, values):
    try:
        arr = np.array(values, dtype=float)
    except (TypeError, ValueError) as exc:
        raise NonFiniteInput('{} contains non-numeric values'.format(name)) from exc
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput('{} contains NaN or infinite values'.format(name))
    return arr


@dataclass(frozen=True)
class EpidemicSeries:
    """Daily observed infected/recovered counts of one region."""

    region_id: str
    dates: np.ndarray
    infected: np.ndarray
    recovered: np.ndarray
    population: float

    def __post_init__(self):
        dates = np.array(self.dates, dtype='datetime64[D]')
        infected = _numeric('infected', self.infected)
        recovered = _numeric('recovered', self.recovered)
        if not (len(dates) == len(infected) == len(recovered)):
            raise InvalidSeries('{}: dates, infected and recovered differ in length'.format(self.region_id))
        if len(dates) < 3:
            raise InvalidSeries('{}: at least 3 days are required'.format(self.region_id))
        if not np.all(np.diff(dates) == ONE_DAY):
            raise InvalidSeries('{}: dates must increase by exactly one day'.format(self.region_id))
        if not self.population > 0:
            raise InvalidSeries('{}: population must be positive'.format(self.region_id))
        if np.any(infected < 0) or np.any(recovered < 0):
            raise InvalidSeries('{}: counts must be nonnegative'.format(self.region_id))
        if np.any(infected + recovered > self.population):
            raise InvalidSeries('{}: I(t) + R(t) exceeds the population'.format(self.region_id))
        object.__setattr__(self, 'dates', _frozen(dates))
        object.__setattr__(self, 'infected', _frozen(infected))
        object.__setattr__(self, 'recovered', _frozen(recovered))
        object.__setattr__(self, 'population', float(self.population))

    def __len__(self):
        return len(self.dates)

    @property
    def start_date(self):
        return self.dates[0]

    def date_of(self, day):
        """Calendar date of a 1-based day index (may lie past the last day)."""
        return self.dates[0] + (int(day) - 1) * ONE_DAY

    def head(self, n_days):
        """The first n_days days, used to cut a training window."""
        return EpidemicSeries(self.region_id, self.dates[:n_days], self.infected[:n_days],
                              self.recovered[:n_days], self.population)

    def delta_infected(self):
        return np.diff(self.infected)

    def delta_recovered(self):
        return np.diff(self.recovered)


UNDERREPORTING_FAMILIES = ('none', 'quadratic', 'exponential')


@dataclass(frozen=True)
class UnderReporting:
    """
    Parametric reporting loss u(t): the fraction of true new infections
    missing from the observed counts on day t. u = 0 means complete reporting.

        quadratic:   u(t) = 1 - ((t + aT) / ((1 + a)T))^2
        exponential: u(t) = 1 - 1 / (1 + b exp(-a (t - 1)))

    After `cutoff` reporting is treated as complete.
    """

    family: str = 'none'
    a: float = 0.0
    b: float = 0.0
    horizon: int = 1
    cutoff: Optional[int] = None

    def __post_init__(self):
        if self.family not in UNDERREPORTING_FAMILIES:
            raise ValueError('unknown under-reporting family {!r}'.format(self.family))
        if self.a < 0 or self.b < 0:
            raise ValueError('under-reporting parameters must be nonnegative')
        if self.horizon < 1:
            raise ValueError('horizon must be at least one day')

    @classmethod
    def none(cls):
        return cls()

    @classmethod
    def quadratic(cls, a, horizon, cutoff=None):
        return cls('quadratic', float(a), 0.0, int(horizon), cutoff)

    @classmethod
    def exponential(cls, a, b, horizon, cutoff=None):
        return cls('exponential', float(a), float(b), int(horizon), cutoff)

    def with_a(self, a):
        return UnderReporting(self.family, float(a), self.b, self.horizon, self.cutoff)

    def at(self, t):
        t = np.asarray(t, dtype=float)
        if self.family == 'quadratic':
            T = float(self.horizon)
            u = 1.0 - ((t + self.a * T) / ((1.0 + self.a) * T)) ** 2
            u = np.where(t > T, 0.0, u)
        elif self.family == 'exponential':
            u = 1.0 - 1.0 / (1.0 + self.b * np.exp(-self.a * (t - 1.0)))
        else:
            u = np.zeros_like(t)
        if self.cutoff is not None:
            u = np.where(t > self.cutoff, 0.0, u)
        return u

    def to_dict(self):
        return {'family': self.family, 'a': self.a, 'b': self.b,
                'horizon': self.horizon, 'cutoff': self.cutoff}

    @classmethod
    def from_dict(cls, data):
        return cls(data['family'], data['a'], data['b'], data['horizon'], data.get('cutoff'))


def reporting_factor(u, first_day, last_day):
    """1/(1-u(t)) for t in first_day..last_day inclusive."""
    values = u.at(np.arange(first_day, last_day + 1))
    if np.any(values >= 1.0):
        bad = first_day + int(np.argmax(values >= 1.0))
        raise UnderReportingSingular('u(t) >= 1 at day {}, observed counts cannot be inverted'.format(bad))
    return 1.0 / (1.0 - values)


def to_true_infected(series, u):
    """Undo the reporting loss: I_f(1) = I(1)/(1-u(1)) and
    I_f(t) = I_f(t-1) + dI(t-1)/(1-u(t))."""
    factor = reporting_factor(u, 1, len(series))
    infected = series.infected
    true_infected = np.empty(len(infected))
    true_infected[0] = infected[0] * factor[0]
    true_infected[1:] = true_infected[0] + np.cumsum(np.diff(infected) * factor[1:])
    return true_infected


@dataclass(frozen=True)
class SirDesignRow:
    y: Tuple[float, float]
    x: Tuple[Tuple[float, ...], Tuple[float, ...]]


@dataclass(frozen=True)
class SirDesign:
    """
    Stack of regression rows Y_t = X_t B, t = 1..n.

    y has shape (n, 2) and x has shape (n, 2, d). For SIR rows d = 2 and
    B = (beta, gamma); the change-point machinery accepts any d.
    """

    y: np.ndarray
    x: np.ndarray
    clamped: int = 0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if y.ndim != 2 or y.shape[1] != 2 or x.ndim != 3 or x.shape[:2] != y.shape:
            raise ValueError('design needs y of shape (n, 2) and x of shape (n, 2, d)')
        object.__setattr__(self, 'y', _frozen(y))
        object.__setattr__(self, 'x', _frozen(x))

    def __len__(self):
        return len(self.y)

    def __iter__(self):
        for t in range(len(self)):
            yield self.row(t + 1)

    @property
    def n_coef(self):
        return self.x.shape[2]

    def row(self, t):
        y = self.y[t - 1]
        x = self.x[t - 1]
        return SirDesignRow((float(y[0]), float(y[1])),
                            (tuple(float(v) for v in x[0]), tuple(float(v) for v in x[1])))

    def subset(self, start, end):
        """Rows for days start..end-1."""
        return SirDesign(self.y[start - 1:end - 1], self.x[start - 1:end - 1], 0)

    def stacked(self):
        """(Y, X) with Y of length 2n and X of shape (2n, d)."""
        return self.y.reshape(-1), self.x.reshape(-1, self.n_coef)

    def predict(self, coef):
        return np.einsum('tij,j->ti', self.x, np.asarray(coef, dtype=float))


def build_design(series, u):
    """Regression rows for t = 1..T-1 on the count scale:

        Y_t = (dI(t)/(1-u(t+1)), dR(t))
        X_t = [[S(t) I_f(t)/N, -I_f(t)], [0, I_f(t)]]
    """
    true_infected = to_true_infected(series, u)
    factor = reporting_factor(u, 1, len(series))
    N = series.population
    susceptible = N - true_infected - series.recovered
    negative = susceptible < 0
    clamped = int(np.count_nonzero(negative))
    if clamped:
        logger.warning('%s: S(t) < 0 on %d days after the under-reporting transform, clamped to 0',
                       series.region_id, clamped)
        susceptible = np.where(negative, 0.0, susceptible)

    I_f = true_infected[:-1]
    n = len(series) - 1
    x = np.zeros((n, 2, 2))
    x[:, 0, 0] = susceptible[:-1] * I_f / N
    x[:, 0, 1] = -I_f
    x[:, 1, 1] = I_f
    y = np.empty((n, 2))
    y[:, 0] = series.delta_infected() * factor[1:]
    y[:, 1] = series.delta_recovered()
    return SirDesign(y, x, clamped)


@dataclass(frozen=True)
class ScalingInfo:
    """Divisors applied by standardize. Coefficients map back to the raw
    scale as B_raw = B_scaled * y_scale / x_scale."""

    y_scale: float
    x_scale: np.ndarray
    degenerate: Tuple[str, ...] = ()

    def to_raw(self, coef):
        return np.asarray(coef, dtype=float) * self.y_scale / self.x_scale

    def to_scaled(self, coef):
        return np.asarray(coef, dtype=float) * self.x_scale / self.y_scale

    def to_dict(self):
        return {'y_scale': self.y_scale, 'x_scale': [float(v) for v in self.x_scale],
                'degenerate': list(self.degenerate)}

    @classmethod
    def from_dict(cls, data):
        return cls(float(data['y_scale']), np.asarray(data['x_scale'], dtype=float),
                   tuple(data.get('degenerate', ())))


def _divisor(values):
    sd = float(np.std(values, ddof=1))
    if not np.isfinite(sd) or sd == 0.0:
        return 1.0, False
    return sd, True


def standardize(design):
    """Divide the stacked response and each stacked regressor column by its
    sample standard deviation. Zero-variance columns keep divisor 1 and are
    listed in ScalingInfo.degenerate."""
    if len(design) < 2:
        raise InsufficientData('standardize needs at least 2 rows')
    Y, X = design.stacked()
    degenerate = []
    y_scale, ok = _divisor(Y)
    if not ok:
        degenerate.append('y')
    x_scale = np.ones(design.n_coef)
    for j in range(design.n_coef):
        x_scale[j], ok = _divisor(X[:, j])
        if not ok:
            degenerate.append('x{}'.format(j))
    if degenerate:
        logger.warning('zero-variance columns left unscaled: %s', ', '.join(degenerate))
    scaled = SirDesign(design.y / y_scale, design.x / x_scale, design.clamped)
    return scaled, ScalingInfo(y_scale, _frozen(x_scale), tuple(degenerate))


@dataclass(frozen=True)
class OlsFit:
    coef: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    rss: float
    dof: int


def ols(design):
    """Least squares on a stacked design, with sigma^2 = RSS / (2n - d)."""
    Y, X = design.stacked()
    coef, _, _, _ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ coef
    rss = float(resid @ resid)
    dof = len(Y) - X.shape[1]
    sigma2 = rss / dof if dof > 0 else np.nan
    cov = sigma2 * np.linalg.pinv(X.T @ X)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return OlsFit(coef, se, cov, rss, dof)


@dataclass(frozen=True)
class SegmentParams:
    """Rates of one stationary segment covering days start..end-1."""

    start: int
    end: int
    beta: float
    gamma: float
    se_beta: Optional[float] = field(default=None, compare=False)
    se_gamma: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError('segment start must precede its end')

    @property
    def coef(self):
        return np.array([self.beta, self.gamma])

    @property
    def length(self):
        return self.end - self.start

    def to_dict(self):
        return {'start': self.start, 'end': self.end, 'beta': self.beta, 'gamma': self.gamma,
                'se_beta': self.se_beta, 'se_gamma': self.se_gamma}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data['start']), int(data['end']), float(data['beta']), float(data['gamma']),
                   data.get('se_beta'), data.get('se_gamma'))


def basic_reproduction_number(segment):
    """beta/gamma of a segment, inf when gamma is 0."""
    if segment.gamma == 0:
        return float('inf')
    return segment.beta / segment.gamma


def segment_at(segments, day):
    """The segment containing a day; days past the last segment use it."""
    for segment in segments:
        if segment.start <= day < segment.end:
            return segment
    return segments[-1] if day >= segments[-1].end else segments[0]


def segment_coefficients(segments, n_rows):
    """Per-row (beta, gamma) array of shape (n_rows, 2)."""
    coef = np.empty((n_rows, 2))
    for t in range(1, n_rows + 1):
        coef[t - 1] = segment_at(segments, t).coef
    return coef
