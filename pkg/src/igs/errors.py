"""Exception hierarchy shared by the library and the command line.

Every error carries a stable machine-readable ``code`` and the process exit
status the CLI uses for it (2 usage, 3 validation, 4 numerical, 5 IO/corruption).
"""


class IGSError(Exception):
    code = "E_IGS"
    exit_status = 1

    def __str__(self):
        return f"{self.code}: {super().__str__()}"


class ConfigError(IGSError, ValueError):
    code = "E_CONFIG"
    exit_status = 3


class ValidationError(IGSError, ValueError):
    code = "E_VALIDATION"
    exit_status = 3


class StateError(IGSError, RuntimeError):
    code = "E_STATE"
    exit_status = 3


class NumericalError(IGSError, FloatingPointError):
    code = "E_NONFINITE"
    exit_status = 4

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class PruningCollapseError(NumericalError):
    code = "E_NO_SURVIVORS"


class MissingAssetError(IGSError, FileNotFoundError):
    code = "E_MISSING"
    exit_status = 5


class FormatError(IGSError, IOError):
    code = "E_FORMAT"
    exit_status = 5


class BadMagicError(FormatError):
    code = "E_BAD_MAGIC"


class VersionError(FormatError):
    code = "E_VERSION"


class TruncatedError(FormatError):
    code = "E_TRUNCATED"

    def __init__(self, message, section=None):
        super().__init__(message)
        self.section = section


class CRCError(FormatError):
    code = "E_CRC"


class LevelMismatchError(FormatError):
    code = "E_LEVEL_MISMATCH"


class HierarchyError(FormatError):
    code = "E_HIERARCHY"
