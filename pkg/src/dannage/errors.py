"""Exception hierarchy shared by every stage of the pipeline.

Each class carries an ``exit_code`` so the command line front end can map
failures onto its documented exit statuses without a lookup table.
"""


class DannageError(Exception):
    exit_code = 2


# -- input problems (exit 2) -------------------------------------------------

class ParseError(DannageError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CountValueError(DannageError, ValueError):
    def __init__(self, gene, sample, value):
        self.gene, self.sample, self.value = gene, sample, value
        super().__init__(f"invalid count {value!r} for gene {gene!r}, sample {sample!r}")


class DuplicateIdError(DannageError):
    pass


class MetadataMismatchError(DannageError):
    pass


class ZeroLibraryError(DannageError):
    def __init__(self, sample):
        self.sample = sample
        super().__init__(f"sample {sample!r} has zero library size")


class ShapeError(DannageError):
    pass


class LabelError(DannageError):
    pass


class EmptyBatchError(DannageError):
    pass


class BatchError(DannageError):
    pass


class TapeError(DannageError):
    pass


class InvariantError(DannageError):
    pass


class ConfigError(DannageError):
    pass


class StratifyError(DannageError):
    pass


class DegenerateCvError(DannageError):
    pass


class DataLeakError(DannageError):
    pass


# -- empty results (exit 3) --------------------------------------------------

class EmptyGeneSetError(DannageError):
    exit_code = 3


# -- numerics (exit 4) -------------------------------------------------------

class NumericsError(DannageError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        # last good state, when the failure happened inside a training loop
        self.checkpoint = checkpoint
