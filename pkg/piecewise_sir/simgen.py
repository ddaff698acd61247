"""
Synthetic epidemics with known change points, and the replication harness
that scores the estimation pipeline on them.

A simulated target follows the discrete SIR dynamics with piecewise-constant
rates, optionally jittered day by day, plus a spatial term driven by one
neighbor region and a noise process. The state is advanced with each day's
response, so the noise feeds back into later days.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from piecewise_sir import pipeline, settings
from piecewise_sir.config import FitConfig
from piecewise_sir.context import region_scope
from piecewise_sir.core_model import EpidemicSeries, UnderReporting
from piecewise_sir.exceptions import PiecewiseSirError
from piecewise_sir.ingest import write_catalog
from piecewise_sir.spatial import RegionCatalog

logger = logging.getLogger(__name__)

NOISE_KINDS = ('none', 'white', 'var', 'wiener')
TARGET_ID = 'target'
NEIGHBOR_ID = 'neighbor'
NEIGHBOR_MILES = 50.0


@dataclass(frozen=True)
class Scenario:
    """
    One simulation setting. breaks are the days t_j at which the rates
    switch: day t uses segment j when t_{j-1} <= t < t_j. lognormal_var is
    the log-scale variance of the daily rate jitter around the segment rate.
    """

    id: str
    T: int
    breaks: Tuple[int, ...]
    beta: Tuple[float, ...]
    gamma: Tuple[float, ...]
    lognormal_var: float = 0.0
    alpha: Optional[float] = None
    noise: str = 'none'
    phi: Tuple[Tuple[float, float], Tuple[float, float]] = ((0.0, 0.0), (0.0, 0.0))
    noise_cov: Tuple[Tuple[float, float], Tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    underreporting: UnderReporting = field(default_factory=UnderReporting.none)
    a_grid: Tuple[float, ...] = ()
    seed: int = settings.DEFAULT_SEED
    n_test: int = settings.SIM_TEST_DAYS
    population: float = settings.SIM_POPULATION
    initial_fraction: float = settings.SIM_INITIAL_FRACTION
    neighbor_beta: Tuple[float, float] = (0.10, 0.05)
    neighbor_gamma: float = 0.04

    def __post_init__(self):
        if len(self.beta) != len(self.breaks) + 1 or len(self.gamma) != len(self.breaks) + 1:
            raise ValueError('scenario {}: one rate per segment is required'.format(self.id))
        if min(self.beta) < 0 or min(self.gamma) < 0:
            raise ValueError('scenario {}: rates must be nonnegative'.format(self.id))
        if list(self.breaks) != sorted(set(self.breaks)) or any(not 1 < b < self.T for b in self.breaks):
            raise ValueError('scenario {}: breaks must be increasing days inside 2..T-1'.format(self.id))
        if self.noise not in NOISE_KINDS:
            raise ValueError('scenario {}: unknown noise kind {!r}'.format(self.id, self.noise))

    @property
    def spatial(self):
        return self.alpha is not None

    @property
    def model(self):
        if self.noise == 'var':
            return 'model3'
        return 'model2' if self.spatial else 'model1'

    def segment_of(self, day):
        return int(np.searchsorted(self.breaks, day, side='right'))

    def replace(self, **changes):
        return replace(self, **changes)


A_PHI = ((0.8, 0.0), (0.2, 0.7))
A_COV = ((0.1, 0.0), (0.0, 0.1))
THREE_SEGMENT_BETA = (0.10, 0.05, 0.10)
THREE_SEGMENT_GAMMA = (0.04, 0.06, 0.04)
COARSE_A_GRID = (0.1, 0.25, 0.5, 0.75, 1.0)

SCENARIOS = {
    'A': Scenario('A', 200, (100,), (0.10, 0.05), (0.04, 0.04), alpha=1.0, noise='var', phi=A_PHI, noise_cov=A_COV),
    'B': Scenario('B', 250, (100, 200), THREE_SEGMENT_BETA, THREE_SEGMENT_GAMMA, lognormal_var=0.005,
                  underreporting=UnderReporting.exponential(0.05, 10.0, 250),
                  a_grid=(0.01, 0.03, 0.05, 0.07, 0.09)),
    'C': Scenario('C', 200, (100,), (0.10, 0.05), (0.04, 0.04), alpha=1.0, noise='var', phi=A_PHI, noise_cov=A_COV,
                  underreporting=UnderReporting.quadratic(0.5, 200), a_grid=COARSE_A_GRID),
    'D': Scenario('D', 250, (100, 200), THREE_SEGMENT_BETA, THREE_SEGMENT_GAMMA, lognormal_var=0.01),
    'E': Scenario('E', 200, (100,), (0.10, 0.05), (0.04, 0.04), alpha=1.0, noise='white'),
    'F': Scenario('F', 250, (100, 200), THREE_SEGMENT_BETA, THREE_SEGMENT_GAMMA, lognormal_var=0.005,
                  underreporting=UnderReporting.quadratic(0.5, 250), a_grid=COARSE_A_GRID),
    'G': Scenario('G', 500, (200, 300, 400), (0.10, 0.06, 0.04, 0.05), (0.04, 0.04, 0.06, 0.04),
                  lognormal_var=0.005),
    'H': Scenario('H', 500, (150, 250, 350, 400), (0.10, 0.05, 0.04, 0.06, 0.04),
                  (0.04, 0.04, 0.06, 0.04, 0.06), lognormal_var=0.005),
}


def get_scenario(scenario_id):
    try:
        return SCENARIOS[scenario_id.upper()]
    except KeyError:
        raise ValueError('unknown scenario {!r}, choose from {}'.format(scenario_id, ', '.join(SCENARIOS)))


@dataclass(frozen=True)
class SimulationTruth:
    scenario: str
    T: int
    n_test: int
    breaks: Tuple[int, ...]
    beta: Tuple[float, ...]
    gamma: Tuple[float, ...]
    alpha: Optional[float]
    phi: Optional[Tuple[Tuple[float, float], Tuple[float, float]]]
    underreporting: UnderReporting
    daily_beta: np.ndarray = field(repr=False, compare=False, default=None)
    daily_gamma: np.ndarray = field(repr=False, compare=False, default=None)
    true_infected: np.ndarray = field(repr=False, compare=False, default=None)
    clamped: int = 0
    floored: int = 0

    def to_dict(self):
        return {
            'schema_version': settings.SCHEMA_VERSION,
            'scenario': self.scenario,
            'T': self.T,
            'n_test': self.n_test,
            'breaks': list(self.breaks),
            'beta': list(self.beta),
            'gamma': list(self.gamma),
            'alpha': self.alpha,
            'phi': None if self.phi is None else [list(row) for row in self.phi],
            'underreporting': self.underreporting.to_dict(),
            'clamped': self.clamped,
            'floored': self.floored,
        }


@dataclass(frozen=True)
class SimulationResult:
    target: EpidemicSeries
    neighbor: Optional[EpidemicSeries]
    truth: SimulationTruth

    @property
    def train(self):
        return self.target.head(self.truth.T)

    @property
    def catalog(self):
        populations = {self.target.region_id: self.target.population}
        series = {self.target.region_id: self.target}
        distances = {}
        if self.neighbor is not None:
            populations[self.neighbor.region_id] = self.neighbor.population
            series[self.neighbor.region_id] = self.neighbor
            distances[(self.target.region_id, self.neighbor.region_id)] = NEIGHBOR_MILES
        return RegionCatalog(populations, distances, series)


def _dates(start, n_days):
    return np.datetime64(start, 'D') + np.arange(n_days)


def simulate_neighbor(scenario, n_days, start=settings.SIM_START_DATE):
    """
    Deterministic SIR for the neighbor region with a linearly decreasing
    transmission rate. It starts one day before the target so the target's
    first spatial covariate is defined.
    """
    N = scenario.population
    infected = np.empty(n_days + 1)
    recovered = np.empty(n_days + 1)
    infected[0], recovered[0] = settings.SIM_NEIGHBOR_INITIAL_FRACTION * N, 0.0
    b0, b1 = scenario.neighbor_beta
    for s in range(n_days):
        t = max(s, 1)
        beta = b0 - b1 * t / (scenario.T - 1)
        susceptible = max(N - infected[s] - recovered[s], 0.0)
        new_cases = beta * susceptible * infected[s] / N
        infected[s + 1] = infected[s] + new_cases - scenario.neighbor_gamma * infected[s]
        recovered[s + 1] = recovered[s] + scenario.neighbor_gamma * infected[s]
    dates = _dates(start, n_days + 1) - np.timedelta64(1, 'D')
    return EpidemicSeries(NEIGHBOR_ID, dates, infected, recovered, N)


def daily_rates(scenario, n_rows, rng):
    """Per-row (beta, gamma), lognormal around the segment rate when jittered."""
    segments = np.array([scenario.segment_of(t) for t in range(1, n_rows + 1)])
    beta = np.asarray(scenario.beta)[segments]
    gamma = np.asarray(scenario.gamma)[segments]
    if scenario.lognormal_var > 0:
        sd = np.sqrt(scenario.lognormal_var)
        beta = rng.lognormal(np.log(beta), sd)
        gamma = rng.lognormal(np.log(gamma), sd)
    return beta, gamma


def observe(true_infected, underreporting):
    """
    Reported infected counts: each daily increment of the true count is
    reported at the rate 1 - u of the day it lands on. A falling epidemic is
    reported at a higher rate than it rose when u decreases, so the reported
    count is floored at 0. Returns (observed, floored days).
    """
    keep = 1.0 - underreporting.at(np.arange(1, len(true_infected) + 1))
    observed = np.empty(len(true_infected))
    observed[0] = true_infected[0] * keep[0]
    floored = 0
    for t in range(1, len(true_infected)):
        observed[t] = observed[t - 1] + (true_infected[t] - true_infected[t - 1]) * keep[t]
        if observed[t] < 0:
            observed[t], floored = 0.0, floored + 1
    return observed, floored


def generate(scenario, rng=None, start=settings.SIM_START_DATE):
    """
    Simulate T + n_test days of a scenario. Returns a SimulationResult with
    the observed target, the neighbor (spatial scenarios only) and the truth.
    """
    rng = rng if rng is not None else np.random.default_rng(scenario.seed)
    n_days = scenario.T + scenario.n_test
    n_rows = n_days - 1
    N = scenario.population
    u = scenario.underreporting
    beta, gamma = daily_rates(scenario, n_rows, rng)

    neighbor = None
    spatial = np.zeros((n_rows, 2))
    if scenario.spatial:
        neighbor = simulate_neighbor(scenario, n_days, start)
        # Z_t uses the neighbor increment from day t-1 to t
        spatial[:, 0] = np.diff(neighbor.infected)[:n_rows] / neighbor.population
        spatial[:, 1] = np.diff(neighbor.recovered)[:n_rows] / neighbor.population
        spatial[:, 0] /= 1.0 - u.at(np.arange(1, n_rows + 1))
        spatial *= scenario.alpha * N

    phi = np.asarray(scenario.phi, dtype=float)
    cov = np.asarray(scenario.noise_cov, dtype=float)
    true_infected = np.empty(n_days)
    recovered = np.empty(n_days)
    true_infected[0], recovered[0] = scenario.initial_fraction * N, 0.0
    eps = np.zeros(2)
    clamped = 0
    for t in range(1, n_days):
        I_f, R = true_infected[t - 1], recovered[t - 1]
        S = N - I_f - R
        if S < 0:
            S, clamped = 0.0, clamped + 1
        b, g = beta[t - 1], gamma[t - 1]
        y = np.array([b * S * I_f / N - g * I_f, g * I_f]) + spatial[t - 1]
        if scenario.noise == 'white':
            y += rng.multivariate_normal(np.zeros(2), cov)
        elif scenario.noise == 'var':
            eps = phi @ eps + rng.multivariate_normal(np.zeros(2), cov)
            y += eps
        elif scenario.noise == 'wiener':
            dw = rng.standard_normal(2)
            y += np.array([np.sqrt(b * S * I_f / N) * dw[0] - np.sqrt(g * I_f) * dw[1],
                           np.sqrt(g * I_f) * dw[1]])
        true_infected[t] = I_f + y[0]
        recovered[t] = R + y[1]
        if true_infected[t] < 0:
            true_infected[t], clamped = 0.0, clamped + 1
        if recovered[t] < 0:
            recovered[t], clamped = 0.0, clamped + 1
    if clamped:
        logger.warning('scenario %s: state clamped at 0 on %d steps', scenario.id, clamped)

    observed, floored = observe(true_infected, u)
    if floored:
        logger.warning('scenario %s: observed infected floored at 0 on %d days', scenario.id, floored)
    target = EpidemicSeries(TARGET_ID, _dates(start, n_days), observed, recovered, N)
    truth = SimulationTruth(scenario.id, scenario.T, scenario.n_test, scenario.breaks, scenario.beta,
                            scenario.gamma, scenario.alpha,
                            scenario.phi if scenario.noise == 'var' else None, u,
                            beta, gamma, true_infected, clamped, floored)
    return SimulationResult(target, neighbor, truth)


def success_interval(breaks, j, T):
    """[t_j - (t_j - t_{j-1})/5, t_j + (t_{j+1} - t_j)/5] with t_0 = 1 and
    t_{m+1} = T, for the 0-based break index j."""
    edges = (1,) + tuple(breaks) + (T,)
    t_prev, t_j, t_next = edges[j], edges[j + 1], edges[j + 2]
    return t_j - (t_j - t_prev) / 5.0, t_j + (t_next - t_j) / 5.0


def matched_points(breaks, points, T):
    """For each true break, the detected point closest to it inside its
    success interval (None when there is none)."""
    out = []
    for j, t_j in enumerate(breaks):
        lo, hi = success_interval(breaks, j, T)
        inside = [p for p in points if lo <= p <= hi]
        out.append(min(inside, key=lambda p: (abs(p - t_j), p)) if inside else None)
    return out


@dataclass
class ReplicateOutcome:
    replicate: int
    points: Tuple[int, ...] = ()
    matched: Tuple[Optional[int], ...] = ()
    beta: Tuple[float, ...] = ()
    gamma: Tuple[float, ...] = ()
    alpha: Optional[float] = None
    a: Optional[float] = None
    phi: Optional[Tuple[float, ...]] = None
    mrpe: dict = field(default_factory=dict)
    error: Optional[str] = None


def _scenario_config(scenario, config):
    family = scenario.underreporting.family
    changes = dict(model=scenario.model, underreporting=family, a=None)
    if family != 'none':
        changes.update(b=scenario.underreporting.b, a_grid=scenario.a_grid or config.a_grid)
    return config.replace(**changes)


def _mrpe_row(report):
    return {'I': report.mrpe_infected, 'R': report.mrpe_recovered, 'IR': report.mrpe_ir}


def run_replicate(scenario, rep, config, compare_untransformed=True):
    """Generate and fit one replicate; rng streams come from (seed, rep)."""
    rng = np.random.default_rng([scenario.seed, rep])
    with region_scope('{}#{}'.format(scenario.id, rep)):
        try:
            result = generate(scenario, rng)
            cfg = _scenario_config(scenario, config)
            model = pipeline.fit(result.train, result.catalog, cfg)
        except PiecewiseSirError as exc:
            logger.warning('replicate %d failed: %s', rep, exc)
            return ReplicateOutcome(rep, error=str(exc))
        outcome = ReplicateOutcome(rep)
        outcome.points = model.change_points.final_points
        outcome.matched = tuple(matched_points(scenario.breaks, outcome.points, scenario.T))
        if len(model.segments) == len(scenario.beta):
            outcome.beta = tuple(s.beta for s in model.segments)
            outcome.gamma = tuple(s.gamma for s in model.segments)
        if model.alpha is not None:
            outcome.alpha = model.alpha.estimate
        if scenario.underreporting.family != 'none':
            outcome.a = model.underreporting.a
        if model.var is not None and model.var.p >= 1:
            outcome.phi = tuple(model.var.phi[0].reshape(-1))
        for variant in pipeline.VARIANTS[:pipeline.VARIANTS.index(model.variant) + 1]:
            report = pipeline.forecast(model.restrict(variant), result.target, result.catalog,
                                       scenario.n_test, mode='rolling')
            outcome.mrpe[variant] = _mrpe_row(report)
        if compare_untransformed and scenario.underreporting.family != 'none':
            plain = pipeline.fit(result.train, result.catalog, cfg.replace(underreporting='none'))
            report = pipeline.forecast(plain, result.target, result.catalog, scenario.n_test, mode='rolling')
            outcome.mrpe['untransformed'] = _mrpe_row(report)
        return outcome


@dataclass(frozen=True)
class ReplicateSummary:
    scenario: str
    n_reps: int
    failures: int
    rows: Tuple[dict, ...]
    outcomes: Tuple[ReplicateOutcome, ...] = field(repr=False, default=())

    def to_frame(self):
        return pd.DataFrame(list(self.rows), columns=['statistic', 'truth', 'mean', 'std', 'count'])

    def value(self, statistic):
        for row in self.rows:
            if row['statistic'] == statistic:
                return row['mean']
        raise KeyError(statistic)


def _stat(statistic, truth, values):
    values = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    mean = float(values.mean()) if len(values) else None
    std = float(values.std(ddof=1)) if len(values) > 1 else (0.0 if len(values) == 1 else None)
    return {'statistic': statistic, 'truth': truth, 'mean': mean, 'std': std, 'count': len(values)}


def summarize(scenario, outcomes):
    ok = [o for o in outcomes if o.error is None]
    rows = []
    for j, t_j in enumerate(scenario.breaks):
        hits = [o.matched[j] for o in ok]
        rows.append({'statistic': 'selection_rate_{}'.format(j + 1), 'truth': 1.0,
                     'mean': float(np.mean([h is not None for h in hits])) if ok else None,
                     'std': None, 'count': len(hits)})
        rows.append(_stat('location_{}'.format(j + 1), t_j / scenario.T,
                          [h / scenario.T for h in hits if h is not None]))
    for j, (b, g) in enumerate(zip(scenario.beta, scenario.gamma)):
        rows.append(_stat('beta_{}'.format(j + 1), b, [o.beta[j] for o in ok if o.beta]))
        rows.append(_stat('gamma_{}'.format(j + 1), g, [o.gamma[j] for o in ok if o.gamma]))
    if scenario.spatial:
        rows.append(_stat('alpha', scenario.alpha, [o.alpha for o in ok]))
    if scenario.underreporting.family != 'none':
        rows.append(_stat('a', scenario.underreporting.a, [o.a for o in ok]))
    if scenario.noise == 'var':
        flat = np.asarray(scenario.phi).reshape(-1)
        for k, name in enumerate(('phi_11', 'phi_12', 'phi_21', 'phi_22')):
            rows.append(_stat(name, float(flat[k]), [o.phi[k] for o in ok if o.phi is not None]))
    labels = sorted({key for o in ok for key in o.mrpe})
    for label in labels:
        for kind in ('IR', 'I', 'R'):
            rows.append(_stat('mrpe_{}_{}'.format(kind, label), None,
                              [o.mrpe[label][kind] for o in ok if label in o.mrpe]))
    return ReplicateSummary(scenario.id, len(outcomes), len(outcomes) - len(ok), tuple(rows), tuple(outcomes))


def run_replicates(scenario, n_reps, config=None, jobs=1, compare_untransformed=True):
    """Fit n_reps independent replicates and summarize selection rate and
    location per break, parameter means with standard deviations and the
    forecast MRPEs of each model."""
    if n_reps < 1:
        raise ValueError('n_reps must be at least 1')
    config = config or FitConfig()
    reps = range(n_reps)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(lambda r: run_replicate(scenario, r, config, compare_untransformed), reps))
    else:
        outcomes = [run_replicate(scenario, r, config, compare_untransformed) for r in reps]
    summary = summarize(scenario, outcomes)
    logger.info('scenario %s: %d replicates, %d failed', scenario.id, n_reps, summary.failures)
    return summary


def export_csv(result, directory):
    """Write a simulation in the catalog CSV layout plus truth.json."""
    directory = Path(directory)
    write_catalog(result.catalog, directory)
    with (directory / 'truth.json').open('w') as fh:
        json.dump(result.truth.to_dict(), fh, indent=2)
        fh.write('\n')
    return directory
