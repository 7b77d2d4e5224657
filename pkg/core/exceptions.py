"""
Exception hierarchy for the hogwatch simulation

Every error raised by the numeric layers derives from HogwatchError so that
management commands and API views can translate them in one place.
"""


class HogwatchError(Exception):
    """Base class for all simulation errors"""


# Vector arithmetic

class VectorError(HogwatchError, ValueError):
    pass


class ZeroVector(VectorError):
    """A vector with zero norm was used where a direction is required"""


class DimensionMismatch(VectorError):
    pass


class EmptyInput(VectorError):
    pass


class NonFiniteVector(VectorError):
    pass


# Clustering

class ClusteringError(HogwatchError, ValueError):
    pass


class TooFewPoints(ClusteringError):
    pass


# Datasets

class DatasetError(HogwatchError):
    pass


class BadMagic(DatasetError):
    pass


class TruncatedFile(DatasetError):
    pass


class CountMismatch(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


# Aggregation and history

class AggregationError(HogwatchError):
    pass


class TooFewClients(AggregationError):
    pass


class HistoryError(HogwatchError):
    pass


class EmptyHistory(HistoryError):
    pass


# Configuration and orchestration

class ConfigurationError(HogwatchError):
    """
    Invalid experiment configuration.

    `errors` holds the validator's error tree (field -> messages) when the
    failure came from schema validation.
    """

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or {}


class BadIndex(ConfigurationError):
    pass


class ExperimentError(HogwatchError):
    """Failure inside a running experiment, tagged with the round it happened in"""

    def __init__(self, message, round_number=None):
        if round_number is not None:
            message = f'round {round_number}: {message}'
        super().__init__(message)
        self.round_number = round_number
