"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an input violates a documented precondition."""


class InvalidDesign(InvalidArgument):
    pass


class UnsatisfiableBalance(ValueError):
    pass


class UndefinedMetric(ValueError):
    """ROC or threshold requested on single-class data."""


class TrainingFailure(RuntimeError):
    def __init__(self, epoch, message="loss diverged"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class LoadError(ValueError):
    """Problem reading an external dataset or weight file."""
