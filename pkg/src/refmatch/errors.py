"""Exception hierarchy shared by all modules.

``ValidationError`` covers bad inputs (the CLI maps it to exit code 1);
anything else escaping a command is treated as an internal error.
"""


class ValidationError(ValueError):
    pass


class DimensionError(ValidationError):
    pass


class FormatError(ValidationError):
    """Malformed file; ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ConvergenceError(RuntimeError):
    pass


class PlacementError(ValidationError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message, step=None):
        self.message = message
        self.step = step
        super().__init__(message if step is None else f"{message} at step {step}")
