"""Exception hierarchy. Each family maps onto one CLI exit code."""


class WCTDefenseError(Exception):
    exit_code = 4


class ConfigError(WCTDefenseError):
    exit_code = 1


class IngestionError(WCTDefenseError):
    exit_code = 2


class NumericalError(WCTDefenseError):
    """Raised when an iterative numerical routine fails to converge.

    ``residual`` carries the last measured error so callers can decide whether
    the result is usable anyway.
    """

    exit_code = 3

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class StageError(WCTDefenseError):
    exit_code = 4

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class DimensionError(WCTDefenseError, ValueError):
    exit_code = 1


class ContractError(WCTDefenseError, RuntimeError):
    exit_code = 4


class DataError(NumericalError):
    pass


class TrainingError(NumericalError):
    def __init__(self, message, epoch):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class AttackError(NumericalError):
    def __init__(self, message, step):
        super().__init__(f"step {step}: {message}")
        self.step = step


class MissingArtifactError(StageError):
    """A stage needs an artifact another subcommand produces."""

    def __init__(self, stage, artifact, producer):
        super().__init__(stage, f"missing {artifact}; run `wctdefense {producer}` first")
        self.producer = producer
