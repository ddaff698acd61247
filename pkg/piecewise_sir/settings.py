"""
Default settings for piecewise-sir.

Every value here can be overridden per run through a config file (JSON or
TOML) or a command-line flag, see piecewise_sir.config.
"""

SCHEMA_VERSION = 1

# Block fused lasso
BLOCK_SIZE = 7
LAMBDA_GRID_SIZE = 10
LAMBDA_MIN_RATIO = 1e-4
CV_FRACTION = 0.2
SOLVER_TOL = 1e-7
SOLVER_MAX_SWEEPS = 10000

# Block clustering
GAP_REFERENCE_DRAWS = 50
GAP_MAX_CLUSTERS = 10

# Under-reporting grid search, real-data default is [0.1, 0.3]
UNDERREPORTING_FAMILY = 'quadratic'
UNDERREPORTING_B = 10.0
A_GRID_START = 0.1
A_GRID_STOP = 0.3
A_GRID_POINTS = 21

# Spatial neighbors
MAX_NEIGHBORS = 5
STATE_DISTANCE_MILES = 500.0
COUNTY_DISTANCE_MILES = 100.0

# VAR residual process
VAR_MAX_LAG = 7
ACF_MAX_LAG = 20

# Forecasting
FORECAST_HORIZON = 14
FORECAST_MODE = 'rolling'

# Simulation fixtures
# large enough that scenarios A-F never deplete the susceptibles
SIM_POPULATION = 100_000_000
SIM_INITIAL_FRACTION = 1e-5
SIM_NEIGHBOR_INITIAL_FRACTION = 1e-6
SIM_START_DATE = '2020-03-01'
SIM_TEST_DAYS = 20

DEFAULT_SEED = 2020

LOG_FORMAT = '%(asctime)s %(levelname)s [%(region)s] %(name)s: %(message)s'
