"""Exception hierarchy; the CLI maps each family to an exit code."""


class OctEncoderError(Exception):
    exit_code = 1


class ConfigError(OctEncoderError):
    exit_code = 2


class DataError(OctEncoderError):
    exit_code = 3


class MeshFormatError(DataError):
    """Malformed mesh/feature file; ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class NumericError(OctEncoderError, ArithmeticError):
    exit_code = 4


class ShapeError(OctEncoderError, ValueError):
    exit_code = 4
