"""Exception taxonomy shared across the toolkit."""


class LayerPruneError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(LayerPruneError):
    """Tensor or parameter dimensions are inconsistent."""


class NumericsError(LayerPruneError):
    """A kernel or update produced non-finite values."""


class GraphError(LayerPruneError):
    """Model graph failed structural validation."""


class SurgeryError(LayerPruneError):
    """A prune plan or fold request does not apply to the given graph."""


class DivergenceError(LayerPruneError):
    """Training loss became non-finite."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite training loss at step {step}")


class DataFormatError(LayerPruneError):
    """A dataset file exists but does not match the expected binary layout."""


class CheckpointError(LayerPruneError):
    """Base class for checkpoint file problems."""


class CheckpointMagicError(CheckpointError):
    """Magic bytes or format version do not match."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared header, metadata, or blobs."""


class CheckpointLengthError(CheckpointError):
    """Topology and parameter blob lengths disagree."""
