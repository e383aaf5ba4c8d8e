"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class DegenerateGeometry(ValueError):
    """Two-view or point-set configuration without a well-defined solution."""


class TapeStateError(RuntimeError):
    pass


class ParseError(ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(message)


class DivergenceError(RuntimeError):
    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)
