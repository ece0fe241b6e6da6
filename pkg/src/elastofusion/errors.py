"""Exception hierarchy shared across the package."""


class ElastoFusionError(Exception):
    """Base class for all package errors."""


class ConfigError(ElastoFusionError):
    pass


class DataError(ElastoFusionError):
    pass


class ManifestError(DataError):
    pass


class EmptyManifestError(ManifestError):
    pass


class ManifestNotFoundError(ManifestError, FileNotFoundError):
    pass


class UnresolvablePathError(ManifestError):
    pass


class DuplicateIdError(ManifestError):
    pass


class MissingLabelError(ManifestError):
    pass


class ImageDecodeError(DataError):
    pass


class ChannelCountError(DataError):
    pass


class RoiError(DataError):
    pass


class SizeMismatchError(DataError):
    pass


class SplitError(DataError):
    """Raised when a split cannot be built or fails the leakage guard."""


class LeakageError(SplitError):
    pass


class ModelError(ElastoFusionError):
    pass


class UnknownArchitectureError(ModelError):
    pass


class WeightsUnavailableError(ModelError):
    pass


class ChecksumError(ModelError):
    pass


class CheckpointVersionError(ModelError):
    pass


class FreezePolicyError(ModelError):
    pass


class ShapeError(ModelError):
    pass


class TrainingError(ElastoFusionError):
    pass


class NoTrainableParametersError(TrainingError):
    pass


class NonFiniteLossError(TrainingError):
    pass


class MetricsError(ElastoFusionError):
    pass


class ReportError(ElastoFusionError):
    pass
