"""Exception hierarchy; ``exit_code`` is the CLI category (config=2, data=3, numeric=4)."""


class ProtocaseError(Exception):
    exit_code = 1
    code = "error"


class ConfigError(ProtocaseError):
    exit_code = 2
    code = "config"


class DataError(ProtocaseError):
    exit_code = 3
    code = "data"


class MissingFileError(DataError):
    code = "data.missing_file"

    def __init__(self, path, message: str | None = None):
        self.path = str(path)
        super().__init__(message or f"missing file: {self.path}")


class ChecksumError(DataError):
    code = "data.checksum"

    def __init__(self, path, expected: str, actual: str):
        self.path = str(path)
        super().__init__(f"checksum mismatch for {self.path}: expected {expected}, got {actual}")


class ManifestError(DataError):
    code = "data.manifest"


class CheckpointError(DataError):
    code = "data.checkpoint"


class NumericError(ProtocaseError):
    exit_code = 4
    code = "numeric"


class StageOrderError(ProtocaseError):
    """A Stage-A operation was requested on a model that already went through Stage B."""
    code = "stage_order"
