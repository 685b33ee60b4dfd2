"""Exception types shared across the package."""


class CountlabError(Exception):
    """Base class for all countlab errors."""


class ShapeError(CountlabError):
    """Tensor shapes or dimensions do not satisfy an operation's contract."""


class ConfigError(CountlabError):
    """Bad run configuration: unknown key, wrong type, missing path."""


class FormatError(CountlabError):
    """A binary container (IDX, shard, checkpoint, PGM) is malformed."""


class DataError(CountlabError):
    """Dataset-level problem: empty input, label out of range, bad split."""


class GenerationError(DataError):
    """Synthetic sample generation failed (e.g. placement rejection exhausted)."""


class DivergenceError(CountlabError):
    """Training loss became non-finite."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")


class TapError(CountlabError):
    """Unknown or invalid activation tap name."""


class DegenerateDataError(DataError):
    """A classifier was given a single class or otherwise unusable data."""


class StratificationError(DataError):
    """Stratified fold assignment left some fold without every class."""


class RefinementError(CountlabError):
    """Layer-conditioned localization refinement has no positive area to work from."""
