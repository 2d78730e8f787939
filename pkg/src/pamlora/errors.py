"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class TrainingDiverged(NumericError):
    def __init__(self, step, loss, task_index=None):
        self.step = step
        self.loss = loss
        self.task_index = task_index
        where = f"task {task_index}, " if task_index is not None else ""
        super().__init__(f"training diverged at {where}step {step} (loss={loss!r})")


class ConfigError(ValueError):
    """Invalid experiment configuration."""
