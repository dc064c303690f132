"""Exception taxonomy shared across the engine.

Every failure mode that callers are expected to branch on gets its own
class; the CLI maps these onto stable exit codes (validation -> 2,
numeric failure -> 3).
"""


class VolnetError(Exception):
    """Base class for all engine errors."""


class ShapeError(VolnetError):
    """Operand shapes are inconsistent with the operation's contract."""


class SizeError(VolnetError):
    """Requested tensor would exceed the addressable buffer size."""


class ConfigError(VolnetError):
    """A configuration object violates its invariants."""


class StateError(VolnetError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class ModeError(VolnetError):
    """Operation not available in the current train/eval mode."""


class DegenerateBatchError(VolnetError):
    """Batch statistics requested over fewer than two elements."""


class NumericError(VolnetError):
    """A non-finite value surfaced where the contract requires finite math."""


class ManifestError(VolnetError):
    """Dataset manifest is malformed; message carries the line number."""


class VolumeError(VolnetError):
    """Slice stack or volume file cannot be assembled into a volume."""


class TooFewSlicesError(VolumeError):
    """Slice directory holds fewer than two usable slices."""


class InconsistentSlicesError(VolumeError):
    """Slices in one stack disagree on height/width or bit depth."""


class PredictionFormatError(VolnetError):
    """Prediction CSV is malformed; message carries the line number."""


class CropError(VolnetError):
    """Crop request leaves no usable volume."""


class DegenerateLabelsError(VolnetError):
    """Score/label set contains only one class."""


class AlignmentError(VolnetError):
    """Prediction sets disagree on the sample-id collection."""


class CheckpointError(VolnetError):
    """Base class for checkpoint file problems."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic."""


class VersionMismatchError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class TruncatedCheckpointError(CheckpointError):
    """Checkpoint file ends before its declared payload."""
