"""
Configuration settings for the Marcus Wong-Zakai toolkit
"""

import copy
import logging.config
import os
from pathlib import Path
from typing import Dict, Any, List

# API Configuration
API_TITLE = "Marcus Wong-Zakai Weak Convergence API"
API_DESCRIPTION = "Wong-Zakai scheme, jump-adapted reference integrator and weak-error experiments for Levy-driven Marcus SDEs"
API_VERSION = "1.0.0"
API_HOST = "0.0.0.0"
API_PORT = 8000

logger = logging.getLogger(__name__)

# Numerical defaults
DEFAULT_ODE_TOL = 1e-10          # acceptance-level tolerance for flow and psi solves
MC_ODE_TOL = 1e-8                # tolerance inside Monte Carlo loops
MIN_SUBSTEPS = 8
SUBSTEP_FACTOR = 4               # substeps = max(8, ceil(4 * (|a'|tau + |b'||w| + |c'||z|)))
MAX_SUBSTEPS = 2 ** 15

DEFAULT_SMALL_JUMP_TRUNCATION = 1e-3
QUADRATURE_TAYLOR_CUTOFF = 1e-6  # singular densities: (0, eps) handled by the second-order Taylor term
HNU_TAIL_TOL = 1e-10
HNU_MAX_WINDOWS = 64

DEFAULT_H_LADDER: List[float] = [2.0 ** -k for k in range(2, 7)]
DEFAULT_FINE_RATIO = 64          # h_fine = h / 64 by default
DEFAULT_T = 1.0
DEFAULT_N_PATHS = 100_000
DEFAULT_BATCH_SIZE = 2_000
DEFAULT_SEED = 20240611
MAX_STEPS = 10 ** 8
MAX_EXPORT_PATHS = 1_000
MIN_MC_PATHS = 1_000
MAX_PATH_FAILURE_RATE = 1e-4     # 0.01 % of paths
NOISE_FLOOR_SIGMAS = 3.0
SELF_CONVERGENCE_FRACTION = 0.2
ORDER_ACCEPTANCE = (0.8, 1.2)
DEGENERATE_ODE_TOL = 1e-8        # per-step allowance for the "scheme exact" verdict

# State grid for H_{a,b,c}: uniform bulk plus standard-normal draws
HABC_GRID_HALF_WIDTH = 50.0
HABC_GRID_POINTS = 10_000
HABC_NORMAL_POINTS = 1_000
HABC_GRID_SEED = 7
HABC_GRID_EXPANSIONS = (1.0, 2.0, 4.0)
UNBOUNDED_GROWTH_FACTOR = 1.5

# Verification suite sizes
VERIFY_BOUND_SAMPLES = 1_000
VERIFY_BOUND_MAX_STATE = 5.0
VERIFY_BOUND_MAX_JUMP = 5.0
VERIFY_IDENTITY_POINTS = 100
VERIFY_IDENTITY_RANGE = 3.0
DEFAULT_IDENTITY_TOL = 1e-5
DEFAULT_FD_STEP = 1e-4

# Selectable components: name -> parameter names (optional trailing params carry defaults)
MODEL_CATALOG: Dict[str, Dict[str, Any]] = {
    "linear": {
        "params": ["alpha", "beta", "M"],
        "defaults": {},
        "description": "a(x)=alpha*x, b(x)=beta*x, c(x)=M*x",
    },
    "constant": {
        "params": ["a0", "b0", "c0"],
        "defaults": {},
        "description": "a, b, c constant",
    },
    "bounded_trig": {
        "params": ["alpha", "beta", "M"],
        "defaults": {},
        "description": "a(x)=alpha*sin(x), b(x)=beta*cos(x), c(x)=M*sin(x)",
    },
}

LEVY_CATALOG: Dict[str, Dict[str, Any]] = {
    "compound_poisson_normal": {
        "params": ["lam", "mu", "sigma"],
        "defaults": {},
        "description": "nu = lam * N(mu, sigma^2)",
    },
    "compound_poisson_fixed": {
        "params": ["lam", "jump", "two_sided"],
        "defaults": {"two_sided": 0.0},
        "description": "nu = lam * delta_jump (plus lam * delta_-jump when two_sided=1)",
    },
    "variance_gamma": {
        "params": ["sigma", "theta", "nu"],
        "defaults": {},
        "description": "gamma-subordinated Brownian motion, Levy density exp(Az - B|z|)/(nu|z|)",
    },
    "one_sided_stable": {
        "params": ["alpha", "scale", "two_sided"],
        "defaults": {"two_sided": 0.0},
        "description": "nu(dz) = scale * z^(-1-alpha) dz on z>0 (both sides when two_sided=1)",
    },
    "tempered_stable_truncated": {
        "params": ["alpha", "scale", "rate"],
        "defaults": {},
        "description": "nu(dz) = scale * exp(-rate|z|) |z|^(-1-alpha) dz, small jumps truncated",
    },
}

TEST_FUNCTION_CATALOG: Dict[str, Dict[str, Any]] = {
    "gaussian_bump": {
        "params": ["center", "width"],
        "defaults": {"center": 0.0, "width": 1.0},
        "description": "exp(-(x-center)^2 / (2 width^2))",
    },
    "cosine": {
        "params": ["freq", "phase"],
        "defaults": {"freq": 1.0, "phase": 0.0},
        "description": "cos(freq*x + phase)",
    },
    "poly_truncated": {
        "params": ["scale"],
        "defaults": {"scale": 1.0},
        "description": "scale * tanh(x/scale)",
    },
    "identity": {
        "params": [],
        "defaults": {},
        "description": "f(x)=x, exact_linear oracle only",
    },
}

ORACLES = ("reference", "exact_linear")


def resolve_params(catalog: Dict[str, Dict[str, Any]], kind: str, name: str, params: List[float]) -> List[float]:
    """Check a catalog name and fill trailing defaulted parameters."""
    if name not in catalog:
        raise ValueError(f"Unknown {kind}: {name}. Available: {list(catalog.keys())}")
    names = catalog[name]["params"]
    defaults = catalog[name]["defaults"]
    required = [p for p in names if p not in defaults]
    if not len(required) <= len(params) <= len(names):
        raise ValueError(
            f"{kind} '{name}' expects {len(required)}..{len(names)} params ({', '.join(names)}), got {len(params)}"
        )
    resolved = [float(p) for p in params]
    for extra in names[len(params):]:
        resolved.append(float(defaults[extra]))
    return resolved

# Output locations
DEFAULT_OUTPUT_DIR = os.getenv("MARCUS_OUTPUT_DIR", "data/output")
LOG_FILE = os.getenv("MARCUS_LOG_FILE", "logs/marcus.log")

OUTPUT_FILES: Dict[str, str] = {
    "weak_error": "weak_error.csv",
    "plot_data": "weak_error_plot.dat",
    "paths": "paths.csv",
    "paths_dense": "paths_dense.csv",
    "verify": "verify.csv",
}

# Exit codes of the command line interface
EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ERROR = 3
EXIT_IO_ERROR = 4

# Logging Configuration
LOGGING_CONFIG: Dict[str, Any] = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "default": {
            "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        },
    },
    "handlers": {
        "default": {
            "formatter": "default",
            "class": "logging.StreamHandler",
            "stream": "ext://sys.stdout",
        },
        "file": {
            "formatter": "default",
            "class": "logging.FileHandler",
            "filename": LOG_FILE,
            "mode": "a",
        },
    },
    "root": {
        "level": "INFO",
        "handlers": ["default", "file"],
    },
}

# Environment-specific settings
ENVIRONMENT = os.getenv("ENVIRONMENT", "development")

if ENVIRONMENT == "production":
    API_HOST = "0.0.0.0"
    API_PORT = int(os.getenv("PORT", 8000))
    LOGGING_CONFIG["root"]["level"] = "INFO"
elif ENVIRONMENT == "development":
    API_HOST = "localhost"
    LOGGING_CONFIG["root"]["level"] = "DEBUG"

# Create necessary directories
REQUIRED_DIRECTORIES = [
    "data/output",
    "logs",
    "config",
]


def setup_logging(stream: str = "ext://sys.stdout") -> None:
    """Create REQUIRED_DIRECTORIES and apply LOGGING_CONFIG with the console handler on stream."""
    for directory in REQUIRED_DIRECTORIES:
        Path(directory).mkdir(parents=True, exist_ok=True)
    config = copy.deepcopy(LOGGING_CONFIG)
    config["handlers"]["default"]["stream"] = stream
    logging.config.dictConfig(config)
