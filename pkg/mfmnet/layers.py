"""
Forward and backward passes for every layer kind of the face network.

Each ``*_forward`` function returns its output together with a
``LayerCache``; the matching ``*_backward`` function takes the upstream
gradient and that cache. Gradients are written by hand, there is no
autodiff graph.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    CacheMismatchError,
    InvalidLabelError,
    InvalidParameterError,
    InvalidShapeError,
)
from .tensor import Shape, Tensor, make_rng

RngLike = Union[None, int, np.random.Generator]
SizeLike = Union[int, Sequence[int]]

TRAIN = "train"
EVAL = "eval"
MODES = (TRAIN, EVAL)


@dataclass(frozen=True)
class LayerCache:
    kind: str
    output_shape: Shape
    saved: Dict[str, Any] = field(default_factory=dict, repr=False)


@dataclass
class ConvParams:
    weights: Tensor
    bias: Tensor
    stride: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise InvalidShapeError(
                f"Convolution weights must be [out_ch, in_ch, kh, kw], got {list(self.weights.shape)}"
            )
        if self.bias.shape != (self.weights.shape[0],):
            raise InvalidShapeError(
                f"Bias length {list(self.bias.shape)} does not match {self.weights.shape[0]} output channels"
            )
        if self.stride < 1:
            raise InvalidParameterError(f"Stride must be >= 1, got {self.stride}")


def _check_backward(grad_out: Tensor, cache: LayerCache, kind: str) -> None:
    if not isinstance(cache, LayerCache) or cache.kind != kind:
        found = getattr(cache, "kind", type(cache).__name__)
        raise CacheMismatchError(f"{kind} backward received a cache from {found}")
    if grad_out.shape != cache.output_shape:
        raise InvalidShapeError(
            f"{kind} backward: gradient shape {list(grad_out.shape)} "
            f"does not match forward output {list(cache.output_shape)}"
        )


def _as_rng(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        raise InvalidParameterError("Train mode needs an rng seed")
    return make_rng(int(rng))


def _pair(size: SizeLike) -> Tuple[int, int]:
    if isinstance(size, (int, np.integer)):
        return int(size), int(size)
    h, w = size
    return int(h), int(w)


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise InvalidParameterError(f"Mode must be 'train' or 'eval', got {mode!r}")


# Convolution


def conv2d_forward(x: Tensor, p: ConvParams) -> Tuple[Tensor, LayerCache]:
    """
    Valid (unpadded) convolution of ``x [N, Cin, H, W]``.

    ``out[n, o, y, x] = bias[o] + sum_{c,u,v} in[n, c, y*s + u, x*s + v] * w[o, c, u, v]``
    """
    if x.ndim != 4:
        raise InvalidShapeError(f"Convolution input must be [N, C, H, W], got {list(x.shape)}")
    out_ch, in_ch, kh, kw = p.weights.shape
    if x.shape[1] != in_ch:
        raise InvalidShapeError(
            f"Convolution expects {in_ch} input channels, got {x.shape[1]}"
        )
    if x.shape[2] < kh or x.shape[3] < kw:
        raise InvalidShapeError(
            f"Kernel {kh}x{kw} is larger than input {x.shape[2]}x{x.shape[3]}"
        )
    s = p.stride
    # [N, C, H', W', kh, kw] view; tensordot materialises the im2col matrix
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    out = np.tensordot(windows, p.weights, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + p.bias[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)
    cache = LayerCache(
        "conv2d", out.shape, {"input": x, "weights": p.weights, "stride": s}
    )
    return out, cache


def conv2d_backward(grad_out: Tensor, cache: LayerCache) -> Tuple[Tensor, Tensor, Tensor]:
    _check_backward(grad_out, cache, "conv2d")
    x = cache.saved["input"]
    w = cache.saved["weights"]
    s = cache.saved["stride"]
    kh, kw = w.shape[2:]
    out_h, out_w = grad_out.shape[2:]

    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    grad_w = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3])).astype(w.dtype)
    grad_b = grad_out.sum(axis=(0, 2, 3)).astype(w.dtype)

    # col2im: scatter every kernel tap back onto the input grid
    grad_x = np.zeros_like(x)
    for u in range(kh):
        for v in range(kw):
            contribution = np.tensordot(grad_out, w[:, :, u, v], axes=([1], [0]))
            grad_x[:, :, u : u + s * out_h : s, v : v + s * out_w : s] += contribution.transpose(0, 3, 1, 2)
    return grad_x, grad_w, grad_b


# Max-Feature-Map


def mfm_forward(a: Tensor, b: Tensor) -> Tuple[Tensor, LayerCache]:
    """
    Elementwise maximum of two candidate feature maps.

    The cache records which side won; ties go to ``a``.
    """
    if a.shape != b.shape:
        raise InvalidShapeError(
            f"MFM candidates must have identical shapes, got {list(a.shape)} and {list(b.shape)}"
        )
    a_wins = a >= b
    out = np.where(a_wins, a, b)
    return out, LayerCache("mfm", out.shape, {"a_wins": a_wins})


def mfm_backward(grad_out: Tensor, cache: LayerCache) -> Tuple[Tensor, Tensor]:
    _check_backward(grad_out, cache, "mfm")
    a_wins = cache.saved["a_wins"]
    zero = np.zeros((), dtype=grad_out.dtype)
    grad_a = np.where(a_wins, grad_out, zero)
    grad_b = np.where(a_wins, zero, grad_out)
    return grad_a, grad_b


def mfm_split(x: Tensor) -> Tuple[Tensor, Tensor]:
    "Split a 2n-channel stack into the halves C^k and C^(k+n)"
    if x.ndim < 2 or x.shape[1] % 2:
        raise InvalidShapeError(
            f"MFM split needs an even channel count, got shape {list(x.shape)}"
        )
    n = x.shape[1] // 2
    return x[:, :n], x[:, n:]


def gradient_sparsity(grad_a: Tensor, grad_b: Tensor) -> float:
    "Fraction of zero entries across both candidate gradients"
    total = grad_a.size + grad_b.size
    zeros = np.count_nonzero(grad_a == 0) + np.count_nonzero(grad_b == 0)
    return zeros / total


def activation_sparsity(x: Tensor) -> float:
    return float(np.count_nonzero(x == 0)) / x.size


# ReLU


def relu_forward(x: Tensor) -> Tuple[Tensor, LayerCache]:
    active = x > 0
    out = np.where(active, x, np.zeros((), dtype=x.dtype))
    return out, LayerCache("relu", out.shape, {"active": active})


def relu_backward(grad_out: Tensor, cache: LayerCache) -> Tensor:
    _check_backward(grad_out, cache, "relu")
    return np.where(cache.saved["active"], grad_out, np.zeros((), dtype=grad_out.dtype))


# Max pooling


def pool_output_size(size: int, k: int, stride: int) -> int:
    """
    Ceil-mode pooling output length.

    The last window must start inside the input, so a trailing window that
    would only cover padding is dropped.
    """
    if k < 1 or stride < 1:
        raise InvalidParameterError(f"Pooling kernel and stride must be >= 1, got {k}/{stride}")
    if k > size:
        raise InvalidShapeError(f"Pooling kernel {k} is larger than input size {size}")
    out = -(-(size - k) // stride) + 1
    if (out - 1) * stride >= size:
        out -= 1
    return out


def maxpool_forward(x: Tensor, k: int, stride: int) -> Tuple[Tensor, LayerCache]:
    if x.ndim != 4:
        raise InvalidShapeError(f"Pooling input must be [N, C, H, W], got {list(x.shape)}")
    n, c, h, w = x.shape
    out_h = pool_output_size(h, k, stride)
    out_w = pool_output_size(w, k, stride)
    padded_h = max(h, (out_h - 1) * stride + k)
    padded_w = max(w, (out_w - 1) * stride + k)
    # Border windows are clipped by padding with -inf, which never wins
    padded = np.full((n, c, padded_h, padded_w), -np.inf, dtype=x.dtype)
    padded[:, :, :h, :w] = x
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :out_h, :out_w].reshape(n, c, out_h, out_w, k * k)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)
    cache = LayerCache(
        "maxpool",
        out.shape,
        {"argmax": argmax, "input_shape": x.shape, "padded_shape": padded.shape, "k": k, "stride": stride},
    )
    return out, cache


def maxpool_backward(grad_out: Tensor, cache: LayerCache) -> Tensor:
    _check_backward(grad_out, cache, "maxpool")
    argmax = cache.saved["argmax"]
    k = cache.saved["k"]
    stride = cache.saved["stride"]
    n, c, h, w = cache.saved["input_shape"]
    _, _, out_h, out_w = grad_out.shape
    rows = (np.arange(out_h) * stride)[None, None, :, None] + argmax // k
    cols = (np.arange(out_w) * stride)[None, None, None, :] + argmax % k
    batch_index = np.arange(n)[:, None, None, None]
    channel_index = np.arange(c)[None, :, None, None]
    grad_padded = np.zeros(cache.saved["padded_shape"], dtype=grad_out.dtype)
    np.add.at(grad_padded, (batch_index, channel_index, rows, cols), grad_out)
    return np.ascontiguousarray(grad_padded[:, :, :h, :w])


# Fully connected


def fc_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tuple[Tensor, LayerCache]:
    if x.ndim != 2 or weights.ndim != 2:
        raise InvalidShapeError(
            f"Fully connected layer expects x [N, D] and W [M, D], got {list(x.shape)} and {list(weights.shape)}"
        )
    if x.shape[1] != weights.shape[1]:
        raise InvalidShapeError(
            f"Fully connected layer expects {weights.shape[1]} inputs, got {x.shape[1]}"
        )
    if bias.shape != (weights.shape[0],):
        raise InvalidShapeError(
            f"Bias shape {list(bias.shape)} does not match {weights.shape[0]} units"
        )
    out = (x @ weights.T + bias).astype(x.dtype, copy=False)
    return out, LayerCache("fc", out.shape, {"input": x, "weights": weights})


def fc_backward(grad_out: Tensor, cache: LayerCache) -> Tuple[Tensor, Tensor, Tensor]:
    _check_backward(grad_out, cache, "fc")
    x = cache.saved["input"]
    w = cache.saved["weights"]
    grad_x = grad_out @ w
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


# Dropout


def dropout_forward(
    x: Tensor, ratio: float, mode: str = TRAIN, rng_seed: RngLike = None
) -> Tuple[Tensor, LayerCache]:
    """
    Inverted dropout: in train mode each element is zeroed with probability
    ``ratio`` and survivors are scaled by ``1 / (1 - ratio)``. Eval mode is
    the identity.
    """
    if not 0 <= ratio < 1:
        raise InvalidParameterError(f"Dropout ratio must be in [0, 1), got {ratio}")
    _check_mode(mode)
    if mode == EVAL:
        return x, LayerCache("dropout", x.shape, {"mask": None, "scale": 1.0})
    if ratio == 0:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = _as_rng(rng_seed).random(x.shape) >= ratio
    scale = 1.0 / (1.0 - ratio)
    out = (x * mask * scale).astype(x.dtype, copy=False)
    return out, LayerCache("dropout", out.shape, {"mask": mask, "scale": scale})


def dropout_backward(grad_out: Tensor, cache: LayerCache) -> Tensor:
    _check_backward(grad_out, cache, "dropout")
    mask = cache.saved["mask"]
    if mask is None:
        return grad_out
    return (grad_out * mask * cache.saved["scale"]).astype(grad_out.dtype, copy=False)


# Loss


def softmax_xent(logits: Tensor, labels) -> Tuple[float, Tensor]:
    """
    Mean softmax cross-entropy over the batch and its gradient
    ``(softmax - onehot) / N``.
    """
    if logits.ndim != 2:
        raise InvalidShapeError(f"Logits must be [N, K], got {list(logits.shape)}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InvalidShapeError(f"Expected {n} labels, got shape {list(labels.shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidLabelError(f"Labels must be in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


# Augmentation


def mirror(image: Tensor) -> Tensor:
    "Horizontal flip of the last (width) axis"
    return image[..., ::-1]


def crop_mirror(
    image: Tensor,
    mode: str = TRAIN,
    rng_seed: RngLike = None,
    crop_size: SizeLike = 128,
    input_size: SizeLike = 144,
) -> Tensor:
    """
    Crop ``image [C, H, W]`` to ``crop_size``.

    Train mode picks a uniformly random window (every offset from 0 to
    ``input - crop`` inclusive) and mirrors it with probability 0.5. Eval
    mode takes the centre window and never mirrors.
    """
    _check_mode(mode)
    in_h, in_w = _pair(input_size)
    crop_h, crop_w = _pair(crop_size)
    if image.ndim != 3 or image.shape[1:] != (in_h, in_w):
        raise InvalidShapeError(
            f"crop_mirror expects [C, {in_h}, {in_w}], got {list(image.shape)}"
        )
    if crop_h > in_h or crop_w > in_w:
        raise InvalidShapeError(f"Crop {crop_h}x{crop_w} is larger than input {in_h}x{in_w}")
    if mode == EVAL:
        top = (in_h - crop_h) // 2
        left = (in_w - crop_w) // 2
        return np.ascontiguousarray(image[:, top : top + crop_h, left : left + crop_w])
    rng = _as_rng(rng_seed)
    top = int(rng.integers(0, in_h - crop_h + 1))
    left = int(rng.integers(0, in_w - crop_w + 1))
    window = image[:, top : top + crop_h, left : left + crop_w]
    if rng.random() < 0.5:
        window = mirror(window)
    return np.ascontiguousarray(window)


def crop_mirror_batch(
    batch: Tensor,
    mode: str = TRAIN,
    rng_seed: RngLike = None,
    crop_size: SizeLike = 128,
    input_size: Optional[SizeLike] = None,
) -> Tensor:
    if batch.ndim != 4:
        raise InvalidShapeError(f"Batch must be [N, C, H, W], got {list(batch.shape)}")
    if input_size is None:
        input_size = batch.shape[2:]
    rng = _as_rng(rng_seed) if mode == TRAIN else None
    return np.stack(
        [crop_mirror(image, mode, rng, crop_size, input_size) for image in batch]
    )
