#!/usr/bin/env python3
"""
Prepare a checkout: output directories, a dependency report and the sample experiment configs.

    python utils/setup.py [--overwrite]
"""

import argparse
import importlib.util
import sys
from pathlib import Path
from typing import Dict, List

sys.path.insert(0, str(Path(__file__).parent.parent))

from app.config import REQUIRED_DIRECTORIES
from app.models import ExperimentConfig
from app.services.config_service import save_config

SAMPLE_CONFIGS: Dict[str, dict] = {
    "config/headline.ini": {
        "model": {"name": "bounded_trig", "params": [0.3, 0.4, 0.5]},
        "levy": {"family": "compound_poisson_normal", "params": [1.0, 0.0, 0.5]},
        "run": {"test_function": "gaussian_bump", "x0": 0.5, "T": 1.0, "h_fine": 2.0 ** -12,
                "n_paths": 100_000, "output_dir": "data/output/headline"},
    },
    "config/linear.ini": {
        "model": {"name": "linear", "params": [0.05, 0.2, 0.3]},
        "levy": {"family": "compound_poisson_normal", "params": [1.0, 0.0, 0.5]},
        "run": {"test_function": "identity", "x0": 1.0, "T": 1.0, "oracle": "exact_linear",
                "n_paths": 10_000, "output_dir": "data/output/linear"},
    },
    "config/stable_verify.ini": {
        "model": {"name": "bounded_trig", "params": [0.3, 0.4, 0.5]},
        "levy": {"family": "one_sided_stable", "params": [1.5, 1.0, 1.0]},
        "run": {"test_function": "cosine", "x0": 0.5, "T": 1.0, "output_dir": "data/output/stable"},
    },
}

# import names, not distribution names
RUNTIME_MODULES = ["fastapi", "uvicorn", "pydantic", "numpy", "scipy", "pandas", "dotenv"]
TEST_MODULES = ["pytest", "httpx"]


def missing_modules(names: List[str]) -> List[str]:
    return [name for name in names if importlib.util.find_spec(name) is None]


def report_dependencies() -> bool:
    """Print what is missing; only the runtime modules are fatal."""
    runtime, tests = missing_modules(RUNTIME_MODULES), missing_modules(TEST_MODULES)
    for name in runtime:
        print(f"   ❌ {name}")
    for name in tests:
        print(f"   ⚠️  {name} (tests only)")
    if runtime or tests:
        print("📦 pip install -r requirements.txt")
    else:
        print("✅ Runtime and test dependencies importable")
    return not runtime


def write_sample_configs(root: Path = Path("."), overwrite: bool = False) -> List[Path]:
    """Save every sample config in canonical form and return the files written."""
    written = []
    for relative, data in SAMPLE_CONFIGS.items():
        target = root / relative
        if target.exists() and not overwrite:
            print(f"   ℹ️  {relative} already present")
            continue
        save_config(ExperimentConfig.model_validate(data), str(target))
        written.append(target)
        print(f"   ✅ {relative}")
    return written


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--overwrite", action="store_true", help="replace existing sample configs")
    args = parser.parse_args()

    print("🔧 Marcus Wong-Zakai toolkit setup")
    for directory in REQUIRED_DIRECTORIES:
        Path(directory).mkdir(parents=True, exist_ok=True)
    print(f"📁 Directories ready: {', '.join(REQUIRED_DIRECTORIES)}")
    runtime_ok = report_dependencies()
    print("📝 Sample configs")
    write_sample_configs(overwrite=args.overwrite)

    if not runtime_ok:
        print("⚠️  Install the missing packages before running experiments")
        return 1
    print("🎉 Done. Try: python -m app verify --config config/headline.ini")
    return 0


if __name__ == "__main__":
    sys.exit(main())
