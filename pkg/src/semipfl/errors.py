"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class ParameterError(ValueError):
    """An argument is outside its admissible range."""


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class ProtocolError(RuntimeError):
    """A federated protocol precondition was violated."""


class ConfigurationError(ValueError):
    """Experiment configuration is invalid."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class ParseError(ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ValueError):
    """Input file content does not match the declared schema."""


class ExperimentError(RuntimeError):
    """A module error raised inside a federated round."""

    def __init__(self, round_index, cause):
        self.round_index = round_index
        self.cause = cause
        super().__init__(f"round {round_index}: {type(cause).__name__}: {cause}")
