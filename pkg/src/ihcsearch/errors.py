"""Exception hierarchy shared by all pipeline stages.

Each error carries a CLI exit category so the command-line front end can map
failures to stable exit codes without knowing every subclass.
"""

from __future__ import annotations


class IhcSearchError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 5


class ConfigError(IhcSearchError):
    exit_code = 2


class MissingInputError(IhcSearchError):
    exit_code = 3


class BackendError(IhcSearchError):
    exit_code = 4


# raster
class ManifestParse(ConfigError):
    pass


class MissingTile(MissingInputError):
    pass


class DimensionMismatch(IhcSearchError):
    pass


class EvenElement(ConfigError):
    pass


# anfis
class SingularLSE(IhcSearchError):
    pass


class NonFiniteGradient(IhcSearchError):
    pass


class InsufficientSamples(ConfigError):
    pass


# align
class FlatImage(IhcSearchError):
    pass


# attention
class UnknownBiomarker(ConfigError):
    pass


# embed
class BackendUnavailable(BackendError):
    pass


class BackendProtocol(BackendError):
    pass


class BackendTimeout(BackendError):
    pass


class LengthMismatch(BackendProtocol):
    pass


class NonFiniteVector(BackendError):
    pass


class BadPatchSize(IhcSearchError):
    pass


# index
class BackendMismatch(IhcSearchError):
    pass


class EmptyIndexAfterExclusion(MissingInputError):
    pass


class VersionMismatch(IhcSearchError):
    pass


class CorruptIndex(IhcSearchError):
    pass


# eval
class SinglePatient(ConfigError):
    pass


class QuerySetMismatch(IhcSearchError):
    pass


# synth
class ConfigInvalid(ConfigError):
    pass
