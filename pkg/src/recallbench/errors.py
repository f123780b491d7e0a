class RecallBenchError(Exception):
    pass


class ConfigError(RecallBenchError, ValueError):
    pass


class SpecError(ConfigError):
    """A split spec that does not fit the dataset it is applied to."""


class DegenerateSplitError(RecallBenchError, ValueError):
    pass


class DatasetError(RecallBenchError, ValueError):
    pass


class StaleManifestError(RecallBenchError):
    pass


class RegistryError(RecallBenchError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CheckpointError(RecallBenchError):
    pass


class NumericError(RecallBenchError, FloatingPointError):
    pass


class CapabilityError(RecallBenchError, PermissionError):
    """Raised when a closed-source teacher is asked to do something it can't."""


class ContractViolation(RecallBenchError, AssertionError):
    pass


class LineageError(RecallBenchError, ValueError):
    pass


class StageError(RecallBenchError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
