class Gt360Error(Exception):
    def __init__(self, message):
        super().__init__(message)
        self.message = message


class InvalidInput(Gt360Error, ValueError):
    pass


class DegenerateCropError(InvalidInput):
    pass


class ShapeError(InvalidInput):
    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected shape {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class DetectorError(Gt360Error):
    pass


class ConfigError(Gt360Error):
    def __init__(self, key, message=None):
        super().__init__(message or f"Unknown configuration key '{key}'")
        self.key = key


class ManifestError(Gt360Error):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class CheckpointError(Gt360Error):
    pass


class StageMismatchError(Gt360Error):
    pass


class NonFiniteLossError(Gt360Error):
    pass


class InfoGatherError(Gt360Error):
    pass
