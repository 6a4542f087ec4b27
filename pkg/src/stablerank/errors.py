"""Exception taxonomy shared across the package."""


class StableRankError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(StableRankError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(StableRankError):
    """An argument violates a documented precondition."""


class DegenerateRowError(StableRankError):
    """An attention row has no permitted key; softmax would be undefined."""


class LayoutError(StableRankError):
    """A prompt cannot be laid out (e.g. it overflows max_seq_len)."""


class ConfigError(StableRankError):
    """A configuration value is invalid or infeasible."""


class VocabularyError(StableRankError):
    """A token or item is not covered by the vocabulary."""


class DatasetParseError(StableRankError):
    """A dataset file is malformed; message names the offending line."""


class VersionError(StableRankError):
    """A file header declares an unsupported schema or format version."""


class CheckpointError(StableRankError):
    """A checkpoint file is malformed or inconsistent."""


class TrainingDivergedError(StableRankError):
    """Training produced non-finite gradients or parameters."""
