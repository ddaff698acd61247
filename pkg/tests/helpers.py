import numpy as np

from piecewise_sir.core_model import EpidemicSeries
from piecewise_sir.simgen import SCENARIOS


def sir_series(beta, gamma, breaks=(), n_days=120, population=1e6, initial=1000.0, region_id='region',
               start='2020-03-01'):
    """Noiseless discrete SIR with rates switching at the given days."""
    infected = np.empty(n_days)
    recovered = np.empty(n_days)
    infected[0], recovered[0] = initial, 0.0
    for t in range(1, n_days):
        j = int(np.searchsorted(breaks, t, side='right'))
        I, R = infected[t - 1], recovered[t - 1]
        S = population - I - R
        infected[t] = I + beta[j] * S * I / population - gamma[j] * I
        recovered[t] = R + gamma[j] * I
    dates = np.datetime64(start, 'D') + np.arange(n_days)
    return EpidemicSeries(region_id, dates, infected, recovered, population)


def shifted(series, region_id, days):
    """The same counts relabelled and moved by a number of days."""
    return EpidemicSeries(region_id, series.dates + np.timedelta64(days, 'D'), series.infected,
                          series.recovered, series.population)


def noiseless(scenario_id, **changes):
    """A scenario with rate jitter and noise switched off."""
    base = dict(lognormal_var=0.0, noise='none')
    base.update(changes)
    return SCENARIOS[scenario_id].replace(**base)
