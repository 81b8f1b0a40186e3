"""Exception types shared across the package.

The CLI maps these onto exit codes, so new failure modes should reuse one
of the categories below rather than raising bare ValueErrors.
"""


class PunctrError(Exception):
    """Base class for all package errors."""


class ShapeError(PunctrError):
    """Operand shapes or indices incompatible with an operation."""


class NumericError(PunctrError):
    """Non-finite values where finite ones are required (incl. divergence)."""


class ContractError(PunctrError):
    """API misuse: bad argument ranges, tape reuse, non-scalar losses."""


class DataError(PunctrError):
    """Corpus, vocabulary, or label-set problems."""


class TransferError(PunctrError):
    """Checkpoint does not fit the target model."""


class SkipBatch(PunctrError):
    """Signal that a batch has nothing to train on and should be skipped."""


class UsageError(PunctrError):
    """Bad command line invocation."""
