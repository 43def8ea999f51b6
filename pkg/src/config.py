"""
Configuration loading.

Configuration files use the dotenv format (KEY=value lines, # comments) and are
read with python-dotenv without touching the process environment. Sections are
spelled as key prefixes separated by a double underscore, e.g.
``T1_MODEL__A1=657`` or ``DETECTOR__DARK_RATE_MINUS=200``.
"""
import dataclasses
import logging
from pathlib import Path
from typing import Dict, Optional, Union

from dotenv import dotenv_values

from src.core_model import (
    DetectorConfig,
    EmissionParams,
    PhysicsConfig,
    RechargeParams,
    SpectralParams,
    TemperatureModel,
)
from src.errors import ConfigError, DomainError

logger = logging.getLogger("nv-relaxometry")

SECTIONS = {
    "T1_MODEL": ("t1_model", TemperatureModel),
    "RECHARGE": ("recharge", RechargeParams),
    "EMISSION": ("emission", EmissionParams),
    "DETECTOR": ("detector", DetectorConfig),
    "SPECTRUM": ("spectrum", SpectralParams),
}

TOP_LEVEL_KEYS = {
    "KAPPA_LAMBDA": "kappa_lambda",
    "ZFS_REF": "zfs_ref",
    "ZFS_REF_TEMPERATURE": "zfs_ref_temperature",
    "ZFS_SLOPE": "zfs_slope",
    "ZFS_SLOPE_ERR": "zfs_slope_err",
    "BOLTZMANN_K": "boltzmann_k",
}


def _field_types(cls) -> Dict[str, type]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _parse_value(key: str, raw: Optional[str], kind) -> Union[int, float]:
    if raw is None or raw.strip() == "":
        raise ConfigError(key, "value is empty")
    try:
        if kind in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as a number") from None


def config_from_mapping(values: Dict[str, Optional[str]]) -> PhysicsConfig:
    """Build a PhysicsConfig from KEY -> raw string pairs.

    :param values: mapping as returned by dotenv_values
    """
    top: Dict[str, float] = {}
    sections: Dict[str, Dict[str, float]] = {name: {} for name in SECTIONS}

    for key, raw in values.items():
        upper = key.upper()
        if upper in TOP_LEVEL_KEYS:
            top[TOP_LEVEL_KEYS[upper]] = _parse_value(key, raw, float)
            continue
        section, _, name = upper.partition("__")
        if section not in SECTIONS or not name:
            raise ConfigError(key, "unknown configuration key")
        _, cls = SECTIONS[section]
        types = _field_types(cls)
        field_name = name.lower()
        if field_name not in types:
            raise ConfigError(key, f"unknown field of section {section}")
        sections[section][field_name] = _parse_value(key, raw, types[field_name])

    kwargs = dict(top)
    for section, (attribute, cls) in SECTIONS.items():
        try:
            kwargs[attribute] = cls(**sections[section])
        except DomainError as e:
            raise ConfigError(section, str(e)) from None
    try:
        return PhysicsConfig(**kwargs)
    except DomainError as e:
        raise ConfigError("PHYSICS", str(e)) from None


def load_config(path: Optional[Union[str, Path]] = None) -> PhysicsConfig:
    """Load a configuration file; None returns the built-in defaults."""
    if path is None:
        return PhysicsConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "configuration file not found")
    values = dotenv_values(path)
    logger.debug(f"Loaded {len(values)} configuration keys from {path}")
    return config_from_mapping(values)


def config_to_lines(config: PhysicsConfig) -> list:
    """Serialize a configuration back to dotenv lines (round-trips load_config)."""
    lines = [f"{key}={getattr(config, attr)!r}" for key, attr in TOP_LEVEL_KEYS.items()]
    for section, (attribute, _) in SECTIONS.items():
        params = getattr(config, attribute)
        for f in dataclasses.fields(params):
            lines.append(f"{section}__{f.name.upper()}={getattr(params, f.name)!r}")
    return lines
