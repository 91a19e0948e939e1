"""Exception hierarchy for VL-Reader."""

from typing import Optional, Sequence, Tuple


class VLReaderError(Exception):
    """Base class for every error raised by the package."""


class OutOfCharset(VLReaderError, ValueError):
    """A character is not part of the active charset."""

    def __init__(self, char: str, index: int):
        self.char = char
        self.index = index
        super().__init__(f"Character {char!r} at index {index} is not in the charset")


class TooLong(VLReaderError, ValueError):
    """A label exceeds the maximum label length."""

    def __init__(self, length: int, max_length: int):
        self.length = length
        self.max_length = max_length
        super().__init__(f"Label length {length} exceeds the maximum of {max_length}")


class NonCharacterToken(VLReaderError, ValueError):
    """A BOS, PAD or MASK_L id appeared where only characters are allowed."""

    def __init__(self, token_id: int, index: int):
        self.token_id = token_id
        self.index = index
        super().__init__(f"Token id {token_id} at index {index} is not a character")


class LabelTooWide(VLReaderError, ValueError):
    """The glyphs of a label cannot fit the image at the minimum scale."""

    def __init__(self, label: str, width: int):
        self.label = label
        self.width = width
        super().__init__(f"Label {label!r} does not fit into {width} px")


class IndivisibleGeometry(VLReaderError, ValueError):
    """Image size is not a multiple of the patch size."""

    def __init__(self, image_shape: Tuple[int, int], patch_shape: Tuple[int, int]):
        self.image_shape = image_shape
        self.patch_shape = patch_shape
        super().__init__(
            f"Image {image_shape[0]}x{image_shape[1]} is not divisible "
            f"by patch {patch_shape[0]}x{patch_shape[1]}"
        )


class DatasetIOError(VLReaderError, OSError):
    """Reading or writing a dataset failed."""


class ManifestCorrupt(VLReaderError, ValueError):
    """A manifest line could not be parsed."""

    def __init__(self, line_number: int, line: str, reason: str = "malformed"):
        self.line_number = line_number
        self.line = line
        super().__init__(f"Manifest line {line_number} is {reason}: {line!r}")


class ShapeMismatch(VLReaderError, ValueError):
    """Two arrays or masks that must agree in shape do not."""

    def __init__(self, expected: Sequence[int], actual: Sequence[int], what: str = "array"):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{what} shape mismatch: expected {self.expected}, got {self.actual}")


class MaskShapeMismatch(ShapeMismatch):
    """An attention mask does not match its query/context lengths."""

    def __init__(self, expected: Sequence[int], actual: Sequence[int]):
        super().__init__(expected, actual, what="attention mask")


class EmptyTargetSet(VLReaderError, ValueError):
    """The linguistic loss was asked to average over zero positions."""

    def __init__(self) -> None:
        super().__init__("Linguistic target set is empty")


class DivergenceDetected(VLReaderError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"Non-finite loss {value} at step {step}")


class CheckpointError(VLReaderError, OSError):
    """A checkpoint file is unreadable or malformed."""


class VersionMismatch(CheckpointError):
    """Checkpoint was written by an unsupported format version."""

    def __init__(self, found: int, supported: int):
        self.found = found
        self.supported = supported
        super().__init__(f"Checkpoint format version {found} is not supported (expected {supported})")


class ConfigMismatch(CheckpointError):
    """Checkpoint was trained with a different model configuration."""

    def __init__(self, fields: Sequence[str]):
        self.fields = list(fields)
        super().__init__(f"Checkpoint model config differs in: {', '.join(self.fields)}")


class UntrainedParams(VLReaderError, RuntimeError):
    """Inference was requested without trained parameters."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        where = f" at {path}" if path else ""
        super().__init__(f"No trained checkpoint found{where}")


class CountMismatch(VLReaderError, ValueError):
    """Predictions and references differ in number."""

    def __init__(self, predictions: int, references: int):
        self.predictions = predictions
        self.references = references
        super().__init__(f"Got {predictions} predictions for {references} references")
