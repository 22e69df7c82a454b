"""Exception types shared across the package."""


class SpecpoolError(Exception):
    """Base class for all errors raised by this package."""


class MeshFormatError(SpecpoolError):
    """A shape file is malformed or uses an unsupported construct."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


class ManifestError(SpecpoolError):
    """A dataset manifest violates its contract."""


class ConfigError(SpecpoolError):
    """A run configuration file or value is invalid."""


class DataError(SpecpoolError):
    """Input data (mesh geometry, spectra, caches) is unusable."""


class CacheError(SpecpoolError):
    """A required cache entry is missing or stale."""
