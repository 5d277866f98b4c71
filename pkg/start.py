#!/usr/bin/env python3
"""
Launch the Marcus Wong-Zakai HTTP service under uvicorn.

Host and port come from app.config, which reads ENVIRONMENT and PORT.
"""

import argparse
import os
from pathlib import Path

import uvicorn
from dotenv import load_dotenv


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run the weak-convergence API server")
    parser.add_argument("--env-file", default=".env", help="dotenv file read before app.config is imported")
    parser.add_argument("--reload", action="store_true", help="restart on source changes (development only)")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    if Path(args.env_file).is_file():
        load_dotenv(args.env_file)
        print(f"✅ Environment read from {args.env_file}")
    os.environ.setdefault("ENVIRONMENT", "production")

    from app.config import API_HOST, API_PORT, API_VERSION, ENVIRONMENT

    print(f"🚀 Marcus Wong-Zakai API v{API_VERSION} ({ENVIRONMENT}) on http://{API_HOST}:{API_PORT}")
    # one server process; /converge spreads its own work over a process pool
    uvicorn.run("app.main:app", host=API_HOST, port=API_PORT, reload=args.reload, log_level="info")


if __name__ == "__main__":
    main()
