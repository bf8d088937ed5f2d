"""Exception hierarchy. Each class maps to one CLI exit code."""


class StmoeError(Exception):
    exit_code = 1


class ConfigError(StmoeError, ValueError):
    exit_code = 2


class DataError(StmoeError, ValueError):
    exit_code = 3


class DegenerateScaleError(DataError):
    """Min-max scaling requested on a channel with max == min."""


class InsufficientHistory(DataError):
    """An anchor interval lacks the look-back needed for the fused input."""


class TrajectoryError(DataError):
    def __init__(self, traj_id, message):
        self.traj_id = traj_id
        super().__init__(f"trajectory {traj_id!r}: {message}")


class NumericalError(StmoeError, ArithmeticError):
    exit_code = 4
