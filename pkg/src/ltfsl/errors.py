"""Exception hierarchy shared by every ltfsl module."""


class LtfslError(Exception):
    """Base class for all library errors."""


class InvalidArgument(LtfslError, ValueError):
    pass


class NumericalError(LtfslError, ArithmeticError):
    pass


class TrainingDiverged(NumericalError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss!r}")
        self.step = step
        self.loss = loss


class AdaptationDiverged(NumericalError):
    pass


class EpisodeInfeasible(InvalidArgument):
    pass


class ParseError(InvalidArgument):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UndefinedRecall(InvalidArgument):
    pass


class ConfigError(InvalidArgument):
    pass


class StageError(LtfslError):
    """A pipeline stage failed; ``cause`` holds the original exception."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class OutputLocked(LtfslError):
    pass
