
class CheckpointFormatError(Exception):

    def __init__(self, msg, prefix_msg="Invalid checkpoint container"):
        super().__init__(f"{prefix_msg}: {msg}")

class MalformedHeaderError(CheckpointFormatError):

    def __init__(self, msg, prefix_msg="Malformed header"):
        super().__init__(msg, prefix_msg=prefix_msg)

class TruncatedPayloadError(CheckpointFormatError):

    def __init__(self, msg, prefix_msg="Truncated payload"):
        super().__init__(msg, prefix_msg=prefix_msg)

class NonFiniteValuesError(CheckpointFormatError):

    def __init__(self, msg, prefix_msg="Non-finite values"):
        super().__init__(msg, prefix_msg=prefix_msg)

class DuplicateTensorNameError(CheckpointFormatError):

    def __init__(self, msg, prefix_msg="Duplicate tensor name"):
        super().__init__(msg, prefix_msg=prefix_msg)

class IncompatibleCheckpointsError(Exception):

    def __init__(self, msg, prefix_msg="Incompatible checkpoints"):
        super().__init__(f"{prefix_msg}: {msg}")

class UnitMismatchError(Exception):

    def __init__(self, msg, prefix_msg="Merge units mismatch"):
        super().__init__(f"{prefix_msg}: {msg}")

class MissingUnitWeightError(Exception):

    def __init__(self, msg, prefix_msg="Missing merge weight for unit"):
        super().__init__(f"{prefix_msg}: {msg}")

class CoefficientError(Exception):

    def __init__(self, msg, prefix_msg="Invalid merge coefficients"):
        super().__init__(f"{prefix_msg}: {msg}")

class DimensionMismatchError(Exception):

    def __init__(self, msg, prefix_msg="Dimension mismatch"):
        super().__init__(f"{prefix_msg}: {msg}")

class CorpusFormatError(Exception):

    def __init__(self, msg, prefix_msg="Malformed corpus"):
        super().__init__(f"{prefix_msg}: {msg}")

class EmptyCorpusError(Exception):

    def __init__(self, msg, prefix_msg="Empty corpus"):
        super().__init__(f"{prefix_msg}: {msg}")

class MissingTeacherFileError(FileNotFoundError):

    def __init__(self, msg, prefix_msg="Teacher distribution file does not exist"):
        super().__init__(f"{prefix_msg}: {msg}")

class NonFiniteLossError(Exception):

    def __init__(self, msg, prefix_msg="Non-finite loss"):
        super().__init__(f"{prefix_msg}: {msg}")

class ConfigError(Exception):

    def __init__(self, msg, prefix_msg="Invalid configuration"):
        super().__init__(f"{prefix_msg}: {msg}")

class UsageError(ConfigError):

    def __init__(self, msg, prefix_msg="Invalid usage"):
        super().__init__(msg, prefix_msg=prefix_msg)
