"""
Exception hierarchy shared by the pipeline, the CLI and the HTTP service
"""


class RadarHDError(Exception):
    """Base class for every error raised on purpose by this package"""

    exit_code = 1


class ConfigError(RadarHDError):
    """Invalid configuration or command-line usage"""

    exit_code = 1


class DataError(RadarHDError):
    """Missing, corrupt or inconsistent data on disk"""

    exit_code = 2


class EmptyCloudError(DataError):
    """A point-cloud metric was asked for on an empty cloud"""


class ShapeError(DataError):
    """Tensor or image shapes do not agree"""


class SimulationError(DataError):
    """The simulator could not produce a valid trajectory"""

    def __init__(self, message: str, trajectory_id: str | None = None):
        super().__init__(message if trajectory_id is None else f"{trajectory_id}: {message}")
        self.trajectory_id = trajectory_id


class NumericError(RadarHDError):
    """NaN or Inf appeared in a forward pass, backward pass or loss"""

    exit_code = 3
