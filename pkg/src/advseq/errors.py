"""Exception types shared across the package.

Each maps to a distinct CLI exit code (see ``advseq.cli``).
"""


class AdvseqError(Exception):
    """Base class for all package errors."""


class ShapeError(AdvseqError):
    """Tensor shapes incompatible for the requested operation."""


class VocabularyError(AdvseqError):
    """A token id falls outside the embedding/vocabulary range."""


class ContractError(AdvseqError):
    """An API precondition was violated (non-scalar backward, missing BOS, ...)."""


class SequenceLengthError(AdvseqError):
    """Input sequence exceeds the model's configured maximum length."""


class DegenerateInputError(AdvseqError):
    """Input is structurally empty (e.g. no non-pad target positions)."""


class DataError(AdvseqError):
    """Corpus files are malformed or inconsistent."""


class ConfigError(AdvseqError):
    """Run configuration is invalid or self-contradictory."""


class CheckpointFormatError(AdvseqError):
    """Checkpoint file has a bad magic, manifest, or tensor shape."""


class DivergedError(AdvseqError):
    """Training loss became NaN/Inf."""
