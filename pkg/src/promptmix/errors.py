"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (validation 2, stage order 3, numeric 4).
"""


class PromptMixError(Exception):
    """Base class for all package errors."""


class ValidationError(PromptMixError, ValueError):
    """Input data or configuration violates a documented contract."""


class DatasetParseError(ValidationError):
    def __init__(self, path, line_no, reason):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class DatasetValidationError(ValidationError):
    def __init__(self, record_id, reason):
        self.record_id = record_id
        super().__init__(f"record {record_id!r}: {reason}")


class PromptInitError(PromptMixError):
    def __init__(self, attribute_id, reason):
        self.attribute_id = attribute_id
        super().__init__(f"cannot initialise prompt for attribute {attribute_id!r}: {reason}")


class BankVersionError(PromptMixError):
    """Checkpoint written by an incompatible format version."""


class BankCorruptError(PromptMixError):
    """Checkpoint is truncated or its header disagrees with its payload."""


class MixerArgumentError(PromptMixError, ValueError):
    pass


class MixerParameterError(PromptMixError, ValueError):
    pass


class MixerCapacityError(MixerArgumentError):
    pass


class RetrievalError(PromptMixError):
    pass


class AssemblyError(PromptMixError):
    def __init__(self, attribute_id, reason="no soft prompt in bank"):
        self.attribute_id = attribute_id
        super().__init__(f"attribute {attribute_id!r}: {reason}")


class InputLengthError(PromptMixError, ValueError):
    """Input exceeds the backend's maximum number of rows."""


class NumericError(PromptMixError, ArithmeticError):
    """A loss or gradient became non-finite."""


class TrainingError(NumericError):
    pass


class StageOrderError(PromptMixError):
    """A pipeline stage was invoked before the artifact it consumes exists."""


class BackendError(PromptMixError):
    pass
