import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from piecewise_sir import settings
from piecewise_sir.exceptions import ConfigError

logger = logging.getLogger(__name__)

MODELS = ('model1', 'model2', 'model3')
SCHEMES = ('equal', 'distance', 'similarity-top5', 'similarity-all')
FAMILIES = ('none', 'quadratic', 'exponential')
FORECAST_MODES = ('rolling', 'free')


def default_a_grid():
    grid = np.linspace(settings.A_GRID_START, settings.A_GRID_STOP, settings.A_GRID_POINTS)
    return tuple(round(float(a), 10) for a in grid)


@dataclass(frozen=True)
class FitConfig:
    """Every knob of the estimation pipeline. Defaults follow the real-data
    choices in piecewise_sir.settings."""

    model: str = 'model3'
    scheme: str = 'similarity-top5'
    block_size: int = settings.BLOCK_SIZE
    lambda_grid_size: int = settings.LAMBDA_GRID_SIZE
    lambda_: Optional[float] = None
    cv_fraction: float = settings.CV_FRACTION
    solver_tol: float = settings.SOLVER_TOL
    solver_max_sweeps: int = settings.SOLVER_MAX_SWEEPS
    gap_draws: int = settings.GAP_REFERENCE_DRAWS
    gap_max_clusters: int = settings.GAP_MAX_CLUSTERS
    underreporting: str = settings.UNDERREPORTING_FAMILY
    a: Optional[float] = None
    b: float = settings.UNDERREPORTING_B
    a_grid: Tuple[float, ...] = field(default_factory=default_a_grid)
    cutoff: Optional[int] = None
    distance_threshold: float = settings.STATE_DISTANCE_MILES
    max_neighbors: int = settings.MAX_NEIGHBORS
    similarity_training_only: bool = True
    p_max: int = settings.VAR_MAX_LAG
    screen_var_breaks: bool = True
    fixed_breaks: Tuple[int, ...] = ()
    forecast_mode: str = settings.FORECAST_MODE
    horizon: int = settings.FORECAST_HORIZON
    seed: int = settings.DEFAULT_SEED

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError('model must be one of {}, got {!r}'.format(MODELS, self.model))
        if self.scheme not in SCHEMES:
            raise ConfigError('scheme must be one of {}, got {!r}'.format(SCHEMES, self.scheme))
        if self.underreporting not in FAMILIES:
            raise ConfigError('underreporting must be one of {}, got {!r}'.format(FAMILIES, self.underreporting))
        if self.forecast_mode not in FORECAST_MODES:
            raise ConfigError('forecast_mode must be one of {}'.format(FORECAST_MODES))
        if self.block_size < 2:
            raise ConfigError('block_size must be at least 2')
        if self.lambda_grid_size < 2:
            raise ConfigError('lambda_grid_size must be at least 2')
        if self.lambda_ is not None and self.lambda_ < 0:
            raise ConfigError('lambda must be nonnegative')
        if not self.a_grid:
            raise ConfigError('a_grid must not be empty')
        if min(self.a_grid) < 0 or (self.a is not None and self.a < 0) or self.b < 0:
            raise ConfigError('under-reporting parameters a and b must be nonnegative')
        if self.cutoff is not None and self.cutoff < 1:
            raise ConfigError('cutoff must be a day index of at least 1')
        if self.distance_threshold < 0:
            raise ConfigError('distance_threshold must be nonnegative')
        if self.max_neighbors < 1:
            raise ConfigError('max_neighbors must be at least 1')
        if self.solver_max_sweeps < 1 or self.gap_draws < 1 or self.gap_max_clusters < 1:
            raise ConfigError('solver_max_sweeps, gap_draws and gap_max_clusters must be positive')
        if self.seed < 0:
            raise ConfigError('seed must be nonnegative')
        if self.p_max < 0:
            raise ConfigError('p_max must be nonnegative')
        if self.horizon < 0:
            raise ConfigError('horizon must be nonnegative')

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name.rstrip('_')] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_mapping(cls, mapping, base=None):
        """Builds a config from a flat mapping. Keys may use dashes or
        underscores; `lambda` maps to the `lambda_` field."""
        known = {f.name: f for f in fields(cls)}
        changes = {}
        for key, value in mapping.items():
            name = key.replace('-', '_')
            if name == 'lambda':
                name = 'lambda_'
            if name not in known:
                raise ConfigError('unknown config key {!r}'.format(key))
            if name in ('a_grid', 'fixed_breaks') and value is not None:
                value = tuple(value)
            changes[name] = value
        return replace(base or cls(), **changes)


def load_config(path):
    """Reads a JSON or TOML config file into a FitConfig."""
    path = Path(path)
    try:
        if path.suffix == '.toml':
            try:
                import tomllib
            except ImportError:  # Python < 3.11
                import tomli as tomllib
            with path.open('rb') as fh:
                data = tomllib.load(fh)
        else:
            with path.open() as fh:
                data = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError('cannot read config {}: {}'.format(path, exc)) from exc
    if not isinstance(data, dict):
        raise ConfigError('config {} must hold a table of settings'.format(path))
    logger.debug('loaded %d config keys from %s', len(data), path)
    return FitConfig.from_mapping(data)
