__version__ = '1.0.0'

from piecewise_sir.exceptions import *
from piecewise_sir.context import *
from piecewise_sir.config import *
from piecewise_sir.core_model import *
from piecewise_sir.detect import *
from piecewise_sir.spatial import *
from piecewise_sir.varfit import *
from piecewise_sir.pipeline import *
from piecewise_sir.ingest import *
from piecewise_sir.simgen import *
