"""
N-dimensional tensors, initializers and the binary tensor format.

Tensors are plain ``numpy.ndarray`` values laid out row-major with
``[N, C, H, W]`` axis order for feature maps. Randomness always comes from
an explicit integer seed fed to ``numpy.random.Generator(PCG64)``, which
produces the same stream on every platform.
"""

import hashlib
import math
import pathlib
import struct
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from .errors import (
    InvalidParameterError,
    InvalidShapeError,
    MagicMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

Tensor = np.ndarray
Shape = Tuple[int, ...]

DEFAULT_PRECISION = 32
TENSOR_MAGIC = b"MFMT"
TENSOR_FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sBBB")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def dtype_for(precision: int) -> np.dtype:
    "Return the numpy dtype for a precision given in bits (32 or 64)"
    if precision == 32:
        return np.dtype(np.float32)
    if precision == 64:
        return np.dtype(np.float64)
    raise InvalidParameterError(f"Precision must be 32 or 64, got {precision}")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, *keys: Union[int, str]) -> int:
    """
    Derive a stable child seed for one purpose (a tensor name, a worker,
    a training stream) from a parent seed.
    """
    entropy = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
        entropy.append(int(key))
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def validate_shape(shape: Iterable[int]) -> Shape:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise InvalidShapeError("Shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise InvalidShapeError(f"Every dimension must be >= 1, got {list(dims)}")
    return dims


def tensor_create(shape: Iterable[int], fill: float = 0.0, dtype=np.float32) -> Tensor:
    return np.full(validate_shape(shape), fill, dtype=dtype)


def init_xavier(shape: Iterable[int], rng_seed: int, dtype=np.float32) -> Tensor:
    """
    Xavier initialization for a convolution weight ``[out_ch, in_ch, kh, kw]``.

    Values are uniform in ``[-b, b]`` with ``b = sqrt(3 / fan_in)`` and
    ``fan_in = in_ch * kh * kw``.
    """
    dims = validate_shape(shape)
    if len(dims) != 4:
        raise InvalidShapeError(
            f"Xavier initialization expects [out_ch, in_ch, kh, kw], got {list(dims)}"
        )
    fan_in = dims[1] * dims[2] * dims[3]
    bound = math.sqrt(3.0 / fan_in)
    values = make_rng(rng_seed).uniform(-bound, bound, size=dims)
    return values.astype(dtype)


def init_gaussian(
    shape: Iterable[int], std: float, rng_seed: int, dtype=np.float32
) -> Tensor:
    dims = validate_shape(shape)
    if not std > 0:
        raise InvalidParameterError(f"Gaussian std must be > 0, got {std}")
    values = make_rng(rng_seed).normal(0.0, std, size=dims)
    return values.astype(dtype)


def encode_tensor(tensor: Tensor) -> bytes:
    "Encode a tensor as one record of the MFMT binary format"
    array = np.asarray(tensor)
    precision = array.dtype.itemsize
    if array.dtype.kind != "f" or precision not in _DTYPES:
        raise InvalidParameterError(
            f"Only float32 and float64 tensors can be encoded, got {array.dtype}"
        )
    dims = validate_shape(array.shape)
    if len(dims) > 255:
        raise InvalidShapeError("Tensor rank must be at most 255")
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_FORMAT_VERSION, precision, len(dims))
    header += struct.pack("<" + "I" * len(dims), *dims)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[precision]).tobytes()


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """
    Decode one tensor record starting at ``offset``.

    Returns the tensor and the offset just past the record.
    """
    if len(buffer) - offset < _HEADER.size:
        raise TruncatedFileError("Tensor header is truncated")
    magic, version, precision, rank = _HEADER.unpack_from(buffer, offset)
    if magic != TENSOR_MAGIC:
        raise MagicMismatchError(f"Expected tensor magic {TENSOR_MAGIC!r}, got {magic!r}")
    if version != TENSOR_FORMAT_VERSION:
        raise VersionMismatchError(f"Unsupported tensor format version {version}")
    if precision not in _DTYPES:
        raise VersionMismatchError(f"Unsupported tensor precision {precision}")
    offset += _HEADER.size
    if len(buffer) - offset < 4 * rank:
        raise TruncatedFileError("Tensor dimensions are truncated")
    dims = struct.unpack_from("<" + "I" * rank, buffer, offset)
    offset += 4 * rank
    dims = validate_shape(dims)
    nbytes = math.prod(dims) * precision
    if len(buffer) - offset < nbytes:
        raise TruncatedFileError("Tensor data is truncated")
    data = np.frombuffer(buffer, dtype=_DTYPES[precision], count=math.prod(dims), offset=offset)
    tensor = data.reshape(dims).astype(data.dtype.newbyteorder("="), copy=True)
    return tensor, offset + nbytes


def write_tensors(path: Union[str, pathlib.Path], tensors: Sequence[Tensor]) -> None:
    "Write zero or more tensor records back to back"
    with open(path, "wb") as fp:
        for tensor in tensors:
            fp.write(encode_tensor(tensor))


def read_tensors(path: Union[str, pathlib.Path]) -> List[Tensor]:
    buffer = pathlib.Path(path).read_bytes()
    tensors = []
    offset = 0
    while offset < len(buffer):
        tensor, offset = decode_tensor(buffer, offset)
        tensors.append(tensor)
    return tensors


def write_tensor(path: Union[str, pathlib.Path], tensor: Tensor) -> None:
    write_tensors(path, [tensor])


def read_tensor(path: Union[str, pathlib.Path]) -> Tensor:
    tensors = read_tensors(path)
    if len(tensors) != 1:
        raise TruncatedFileError(f"Expected exactly one tensor, found {len(tensors)}")
    return tensors[0]
