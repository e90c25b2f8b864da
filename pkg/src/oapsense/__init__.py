"""Optical-array localisation of ground transmitters from a UAV receiver."""
from .config import ExperimentConfig, parse_config, serialize_config
from .errors import ConfigError, DomainError, FitError

__all__ = ["ExperimentConfig", "parse_config", "serialize_config",
           "ConfigError", "DomainError", "FitError"]
__version__ = "0.1.0"
