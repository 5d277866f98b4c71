"""
Experiment configuration files: flat INI with [model], [levy] and [run] sections
"""

import configparser
import logging
from pathlib import Path
from typing import Any, Dict, List

from app.models import ExperimentConfig

logger = logging.getLogger(__name__)

SECTIONS = ("model", "levy", "run")
LIST_KEYS = {"params", "f_params", "h_list"}


def _new_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case sensitive (T)
    return parser


def _parse_list(key: str, raw: str) -> List[float]:
    items = [item.strip() for item in raw.split(",")]
    try:
        return [float(item) for item in items if item]
    except ValueError:
        raise ValueError(f"'{key}' must be a comma-separated list of numbers, got '{raw}'")


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI text into a validated ExperimentConfig."""
    parser = _new_parser()
    parser.read_string(text)

    unknown = [name for name in parser.sections() if name not in SECTIONS]
    if unknown:
        raise ValueError(f"Unknown config sections: {unknown}. Expected: {list(SECTIONS)}")
    for required in ("model", "levy"):
        if not parser.has_section(required):
            raise ValueError(f"Config is missing the [{required}] section")

    data: Dict[str, Dict[str, Any]] = {}
    for section in SECTIONS:
        if not parser.has_section(section):
            continue
        fields = ExperimentConfig.model_fields[section].annotation.model_fields
        values: Dict[str, Any] = {}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ValueError(f"Unknown key '{key}' in [{section}]. Allowed: {list(fields)}")
            values[key] = _parse_list(key, raw) if key in LIST_KEYS else raw.strip()
        data[section] = values
    return ExperimentConfig.model_validate(data)


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical INI text: sections and keys in model order, floats in shortest round-trip form."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in getattr(config, section).model_dump().items():
            if value is not None:
                lines.append(f"{key} = {_format_value(value)}".rstrip())
        lines.append("")
    return "\n".join(lines)


def load_config(path: str) -> ExperimentConfig:
    """Read and validate a config file."""
    config_path = Path(path)
    logger.info(f"Loading experiment config from {config_path}")
    return parse_config(config_path.read_text(encoding="utf-8"))


def save_config(config: ExperimentConfig, path: str) -> str:
    """Write the canonical form of a config."""
    config_path = Path(path)
    config_path.parent.mkdir(parents=True, exist_ok=True)
    config_path.write_text(serialize_config(config), encoding="utf-8")
    logger.info(f"Saved experiment config to {config_path}")
    return str(config_path)
