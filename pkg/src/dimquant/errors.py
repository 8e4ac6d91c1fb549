"""Exception taxonomy shared by all modules.

Three top-level families map onto the CLI exit codes: configuration
problems (bad options, shape mismatches, illegal option grids), numeric
failures (non-finite data, factorization breakdown), and file format
problems (NPY tensors, packed artifacts).
"""


class DimQuantError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DimQuantError):
    """Invalid option, option combination, or manifest/config content."""


class ShapeError(ConfigError):
    """Operands have incompatible shapes; message names both shapes."""


class NumericError(DimQuantError):
    """Numerical failure (non-finite values, factorization breakdown)."""


class FileFormatError(DimQuantError):
    """Base class for on-disk format problems."""


class NpyError(FileFormatError):
    """Base class for NPY read/write problems."""


class NpyUnsupportedDtypeError(NpyError):
    """NPY file holds a dtype other than little-endian float32."""


class NpyFortranOrderError(NpyError):
    """NPY file stores data in Fortran (column-major) order."""


class NpyWrongNdimError(NpyError):
    """NPY file is not exactly 2-dimensional."""


class NpyTruncatedError(NpyError):
    """NPY payload is shorter than the header-declared extent."""


class ArtifactError(FileFormatError):
    """Packed artifact file is malformed (magic, version, or sizes)."""
