#!/usr/bin/env python3
"""
Experiment config validation script
Run this script to check experiment configs before long runs
"""

import sys
from pathlib import Path

# Add the project root to the path so we can import app
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.services.config_service import load_config, parse_config, serialize_config


def validate_config(path: str) -> bool:
    """Validate one experiment config file."""
    print(f"🔍 Validating {path}...")
    try:
        config = load_config(path)
    except FileNotFoundError:
        print(f"❌ File not found: {path}")
        return False
    except ValueError as e:
        print(f"❌ Invalid config: {e}")
        return False
    except Exception as e:
        print(f"❌ Could not parse config: {e}")
        return False

    run = config.run
    print("✅ Config parsed")
    print("\n📋 Experiment Summary:")
    print(f"Model: {config.model.name} {config.model.params}")
    print(f"Levy: {config.levy.family} {config.levy.params} (truncation {config.levy.truncation:g})")
    print(f"Test function: {run.test_function} {run.f_params}")
    print(f"Oracle: {run.oracle}")
    print(f"h ladder: {', '.join(f'{h:g}' for h in run.h_list)} (h_fine {run.h_fine:g})")
    print(f"Paths: {run.n_paths}, seed {run.seed}")

    round_trip = parse_config(serialize_config(config)) == config
    print(f"Canonical round trip: {'✅' if round_trip else '❌'}")
    return round_trip


if __name__ == "__main__":
    paths = sys.argv[1:] or sorted(str(p) for p in Path("config").glob("*.ini"))
    if not paths:
        print("ℹ️  No config files given and none found in config/")
        sys.exit(1)
    results = [validate_config(path) for path in paths]
    print(f"\n{'🎉 All configs valid' if all(results) else '❌ Some configs are invalid'}")
    sys.exit(0 if all(results) else 1)
