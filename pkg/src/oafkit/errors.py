"""Exception hierarchy shared by every module."""


class OafkitError(Exception):
    """Base class for all toolkit errors."""


class InvalidInput(OafkitError, ValueError):
    pass


class InvalidConfig(OafkitError, ValueError):
    pass


class ShapeError(OafkitError, ValueError):
    pass


class DegenerateFilterbank(OafkitError, ValueError):
    pass


class UnsupportedFormat(OafkitError, ValueError):
    pass


class ParseError(OafkitError, ValueError):
    """Malformed file content. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class InvalidLabel(ParseError):
    pass


class DivergedError(OafkitError, RuntimeError):
    def __init__(self, iteration, loss):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
