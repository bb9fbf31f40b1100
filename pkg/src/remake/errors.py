"""Exception types shared across the package.

Each top-level class maps to one CLI exit code.
"""


class RemakeError(Exception):
    exit_code = 1


class ConfigError(RemakeError):
    exit_code = 2


class DataError(RemakeError):
    exit_code = 3


class NumericError(RemakeError):
    exit_code = 4


class RatioUnreachableError(DataError):
    pass


class MissingFileError(DataError):
    code = "missing-file"


class MissingGroundTruthError(MissingFileError):
    code = "missing-ground-truth"


class ShapeMismatchError(DataError):
    code = "shape-mismatch"


class MalformedMetadataError(DataError):
    code = "malformed-metadata"


class EmptyRegionError(DataError):
    pass
