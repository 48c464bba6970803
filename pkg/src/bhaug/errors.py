class DegenerateInputError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class SingularSystemError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class ArtifactNotFoundError(KeyError):
    pass


class IntegrityError(RuntimeError):
    """Container manifest and payload disagree."""


class ParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None, path=None):
        self.lineno = lineno
        self.path = path
        where = f"{path}:" if path else ""
        if lineno is not None:
            message = f"{where}line {lineno}: {message}"
        elif where:
            message = f"{where} {message}"
        super().__init__(message)
