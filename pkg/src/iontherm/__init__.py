"""Spatial (imaging) and spectroscopic (Doppler) thermometry of a single laser-cooled trapped ion."""
from .physcore import (Config, ConfigError, ImagingConfig, IonSpecies, LaserConfig, NoiseDriveConfig,
                       SimulationConfig, TrapConfig, diffraction_limit, load_config, validate_config)

__version__ = "0.1.0"

__all__ = [
    "Config", "ConfigError", "ImagingConfig", "IonSpecies", "LaserConfig", "NoiseDriveConfig",
    "SimulationConfig", "TrapConfig", "diffraction_limit", "load_config", "validate_config",
]
