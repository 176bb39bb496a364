from dotenv import load_dotenv
from pathlib import Path
import os

load_dotenv()

VERSION = "0.1.0"

# Package-relative default for the bundled scenario catalog
PROJECT_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_SCENARIO_DIR = PROJECT_ROOT / "scenarios"
DEFAULT_OUTPUT_DIR = Path("runs")

# Group element and frame tolerances
INPUT_DET_TOL = 1e-6
GROUP_DET_TOL = 1e-9
ORTHO_TOL = 1e-10
PROBABILITY_TOL = 1e-12
CONFIG_PROBABILITY_TOL = 1e-9
STATIONARY_BASE_TOL = 1e-9
SYMMETRY_TOL = 1e-9

# Flag geometry
ANGLE_TOL = 1e-6
BLOCK_ANGLE_TOL = 1e-3
FLAG_CONVERGENCE_TOL = 1e-6
FLAG_CONVERGENCE_CEILING = 1e-2
DEGENERATE_VOLUME = 1e-12
DEFICIT_SLACK = 0.1

# Exponent estimation
CLUSTER_REL_TOL = 1e-2
CLUSTER_SE_FACTOR = 3.0
CLUSTER_ABS_TOL = 1e-9
SE_FLOOR = 1e-12
RENORMALIZE_EVERY = 1

# Conformality and tightness
TIGHT_SLOPE = 0.01
TIGHT_RATIO = 2.0
UNBOUNDED_GROWTH = 5.0
UNBOUNDED_SLOPE = 0.25
DEFECT_FLOOR = 1e-6
FORM_TOL = 1e-2
INVARIANCE_TOL = 1e-3

# Stationary measures
ATOM_THRESHOLD = 0.25
ATOM_DECADES = 2
ATOM_PLATEAU = 0.5
STATIONARITY_Z = 3.0
BALL_CENTER_CANDIDATES = 256

# Pass thresholds for experiment status
W0_FRACTION = 0.99
PULLBACK_MASS = 0.9
PULLBACK_DISTANCE = 1e-2
TRACKING_RELATIVE_DEFECT = 0.1


def output_dir() -> Path:
    """Output directory, honouring the COCYCLELAB_OUTPUT_DIR override"""
    return Path(os.environ.get("COCYCLELAB_OUTPUT_DIR", str(DEFAULT_OUTPUT_DIR)))


def scenario_dir() -> Path:
    """Scenario catalog directory, honouring COCYCLELAB_SCENARIO_DIR"""
    return Path(os.environ.get("COCYCLELAB_SCENARIO_DIR", str(DEFAULT_SCENARIO_DIR)))


def log_level() -> str:
    return os.environ.get("COCYCLELAB_LOG_LEVEL", "INFO").upper()
