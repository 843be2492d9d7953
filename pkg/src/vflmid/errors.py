"""Exception types raised across the simulator."""


class VflError(Exception):
    pass


class DimensionError(VflError, ValueError):
    pass


class LabelError(VflError, ValueError):
    pass


class ParameterError(VflError, ValueError):
    pass


class ConsistencyError(VflError, ValueError):
    pass


class ConfigError(VflError, ValueError):
    pass


class DomainError(VflError, ValueError):
    pass


class FormatError(VflError, ValueError):
    pass


class AttackInapplicable(VflError):
    pass


class TrainingDiverged(VflError, FloatingPointError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class ReconstructionDiverged(VflError, FloatingPointError):
    pass
