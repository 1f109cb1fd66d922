"""Exception hierarchy shared by every sinr module."""


class SinrError(Exception):
    """Base class for all package errors."""


class ConfigError(SinrError, ValueError):
    """Invalid configuration value (rates, sizes, unknown keys)."""


class ShapeError(SinrError, ValueError):
    """Array shape does not match what a layer or file expects."""


class UsageError(SinrError, RuntimeError):
    """API called out of order, e.g. backward before forward."""


class TrainingDivergedError(SinrError, FloatingPointError):
    """Loss became NaN or infinite during training."""


# --- model / checkpoint files -------------------------------------------------

class FileFormatError(SinrError):
    """Malformed binary file."""


class BadMagicError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class ChecksumError(FileFormatError):
    pass


class RoleMismatchError(FileFormatError):
    """Sub-model file carries a different role than the loader asked for."""


# --- datasets ------------------------------------------------------------------

class DatasetError(SinrError):
    pass


class InvalidLabelError(DatasetError):
    pass


# --- wire protocol -------------------------------------------------------------

class ProtocolError(SinrError):
    """Datagram that does not belong to the expected session or is malformed."""


class IntegrityError(ProtocolError):
    """Two packets claim the same slots with different contents."""


class SessionSetupTimeout(SinrError, TimeoutError):
    pass
