class MfmError(Exception):
    "Base class for errors raised by mfmnet, displayed to the user by the CLI"


class InvalidShapeError(MfmError, ValueError):
    "A tensor or layer received a shape it cannot work with"


class CacheMismatchError(InvalidShapeError):
    "A backward pass was given a cache produced by a different forward pass"


class InvalidParameterError(MfmError, ValueError):
    "A scalar parameter is outside its documented range"


class InvalidLabelError(MfmError, ValueError):
    "A class label is outside [0, num_classes)"


class TensorFormatError(MfmError):
    "A tensor or model file could not be decoded"


class MagicMismatchError(TensorFormatError):
    "File does not start with the expected magic bytes"


class VersionMismatchError(TensorFormatError):
    "File was written by an unsupported format version"


class TruncatedFileError(TensorFormatError):
    "File ended before all declared data was read"


class ShapeInconsistencyError(TensorFormatError):
    "Stored tensors do not match the network config they claim to instantiate"


class AlignmentError(MfmError):
    "Landmarks are degenerate and no similarity transform can be fitted"


class DatasetError(MfmError):
    "Dataset could not be loaded"


class DatasetIOError(DatasetError, OSError):
    "Dataset root or an image file could not be read"


class LandmarkParseError(DatasetError):
    "A line of the landmark file is malformed"

    def __init__(self, message: str, line_number: int):
        super().__init__(f"Line {line_number}: {message}")
        self.line_number = line_number


class InvalidInputError(MfmError, ValueError):
    "An operation was called with input it cannot process, e.g. an empty dataset"


class NumericDivergenceError(MfmError, ArithmeticError):
    "Training produced a NaN or infinite value"

    def __init__(self, message: str, name: str = ""):
        super().__init__(message)
        self.name = name


class InvalidEmbeddingError(MfmError, ValueError):
    "An embedding cannot be scored, e.g. it has zero norm"


class DegenerateInputError(MfmError, ValueError):
    "Verification scores contain a single class, so no ROC can be drawn"


class MissingEmbeddingError(MfmError, KeyError):
    "A verification pair refers to a sample with no embedding"

    def __init__(self, sample: str):
        super().__init__(sample)
        self.sample = sample

    def __str__(self) -> str:
        return f"No embedding for sample: {self.sample}"


class InvalidComparisonError(MfmError, ValueError):
    "Two configs differ in more than their activation function"
