"""Exception hierarchy shared across the simulator and the attack pipeline."""


class SpyHammerError(Exception):
    """Base class for all package errors."""


class ConfigError(SpyHammerError):
    """Invalid configuration, profile, or argument combination."""


class AddressError(ConfigError):
    """Row or cell address outside the module geometry."""


class TemperatureDomainError(ConfigError):
    """Temperature outside the profile's calibrated domain."""


class CalibrationError(SpyHammerError):
    """Cell population cannot be rescaled to hit the target BER curve."""

    def __init__(self, temp_c: int, message: str):
        self.temp_c = temp_c
        super().__init__(f"{message} (temperature {temp_c} C)")


class EdgeRowError(SpyHammerError):
    """Victim row sits at the physical edge of the array and has no neighbor."""


class InsufficientSignalError(SpyHammerError):
    """Probing produced no observable bit flips."""


class UnknownMappingError(SpyHammerError):
    """Observed adjacency matches no known logical-to-physical mapping family."""


class UnderdeterminedFitError(SpyHammerError):
    """Too few distinct temperature points to fit the requested model."""


class UnknownTemperatureError(SpyHammerError):
    """Canary monitoring observed no flips, so no temperature can be inferred."""
