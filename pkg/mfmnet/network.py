"""
Declarative network configs, parameter construction, forward/backward
passes over the whole stack and the self-describing model file.
"""

from dataclasses import dataclass, field
import math
import pathlib
import struct
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
import yaml

from . import layers
from .errors import (
    InvalidShapeError,
    MagicMismatchError,
    ShapeInconsistencyError,
    TensorFormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from .layers import EVAL, ConvParams, LayerCache, RngLike
from .tensor import (
    Shape,
    Tensor,
    decode_tensor,
    derive_seed,
    dtype_for,
    encode_tensor,
    init_gaussian,
    init_xavier,
)

LayerKind = Literal["conv_pair_mfm", "relu_conv", "maxpool", "fc", "dropout"]
Activation = Literal["mfm", "relu"]
DecayRole = Literal["default", "classifier", "none"]

MODEL_MAGIC = b"MFMM"
MODEL_FORMAT_VERSION = 1
# Reference parameter count of the full network, printed beside the derived count
REFERENCE_PARAMETER_COUNT = 4_153_000

_REQUIRED_FIELDS = {
    "conv_pair_mfm": ("kernel", "channels"),
    "relu_conv": ("kernel", "channels"),
    "maxpool": ("kernel",),
    "fc": (),
    "dropout": ("ratio",),
}
_CONV_KIND = {"mfm": "conv_pair_mfm", "relu": "relu_conv"}
_ROLE_CODES = {"default": 0, "classifier": 1, "none": 2}
_ROLE_NAMES = {code: role for role, code in _ROLE_CODES.items()}


class LayerSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    kind: LayerKind
    kernel: Optional[int] = Field(default=None, ge=1)
    stride: int = Field(default=1, ge=1)
    channels: Optional[int] = Field(
        default=None, ge=1, description="Output channels n (each conv half has n)"
    )
    units: Optional[int] = Field(default=None, ge=1)
    ratio: Optional[float] = Field(default=None, ge=0, lt=1)

    @model_validator(mode="after")
    def _check_kind_fields(self):
        missing = [f for f in _REQUIRED_FIELDS[self.kind] if getattr(self, f) is None]
        if missing:
            raise ValueError(
                "Layer '{}' of kind {} needs: {}".format(self.name, self.kind, ", ".join(missing))
            )
        return self

    @property
    def is_conv(self) -> bool:
        return self.kind in ("conv_pair_mfm", "relu_conv")

    @property
    def activation_name(self) -> str:
        "Name of the activation row, e.g. mfm1 for conv1"
        prefix = "mfm" if self.kind == "conv_pair_mfm" else "relu"
        if self.name.startswith("conv"):
            return prefix + self.name[len("conv") :]
        return f"{self.name}_{prefix}"


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    input_size: Tuple[int, int] = (144, 144)
    crop_size: Tuple[int, int] = (128, 128)
    in_channels: int = Field(default=1, ge=1)
    num_classes: int = Field(ge=2)
    activation: Activation = "mfm"
    embedding_layer: str = "fc1"
    init_std: float = Field(default=0.01, gt=0, description="Std of Gaussian fc init")
    input_mean: float = Field(
        default=0.0, ge=0, le=1, description="Subtracted from [0, 1] pixels before the first layer"
    )
    hyperparams: Dict[str, Any] = Field(
        default_factory=dict, description="Training hyperparameter defaults for this network"
    )
    layers: List[LayerSpec]

    @model_validator(mode="after")
    def _check_stack(self):
        names = [spec.name for spec in self.layers]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError("Duplicate layer names: {}".format(", ".join(duplicates)))
        if not self.layers or self.layers[-1].kind != "fc":
            raise ValueError("The last layer must be fully connected")
        classifier = self.layers[-1]
        if classifier.units is None:
            classifier.units = self.num_classes
        elif classifier.units != self.num_classes:
            raise ValueError(
                f"Final layer has {classifier.units} units but num_classes is {self.num_classes}"
            )
        for spec in self.layers:
            if spec.is_conv and spec.kind != _CONV_KIND[self.activation]:
                raise ValueError(
                    f"Layer '{spec.name}' is {spec.kind} but activation is {self.activation}"
                )
            if spec.kind == "fc" and spec.units is None:
                raise ValueError(f"Layer '{spec.name}' needs units")
        embedding = [s for s in self.layers[:-1] if s.name == self.embedding_layer]
        if not embedding or embedding[0].kind != "fc":
            raise ValueError(
                f"Embedding layer '{self.embedding_layer}' must be a fully connected layer before the classifier"
            )
        for (crop, full) in zip(self.crop_size, self.input_size):
            if not 1 <= crop <= full:
                raise ValueError(f"Crop size {self.crop_size} does not fit input {self.input_size}")
        # Raises InvalidShapeError (a ValueError) if propagation fails
        self.shapes()
        return self

    def shapes(self) -> List[Tuple[LayerSpec, Shape, Shape]]:
        "Per-sample (input shape, output shape) for every layer"
        shape: Shape = (self.in_channels, *self.crop_size)
        result = []
        for spec in self.layers:
            in_shape = shape
            if spec.is_conv:
                if len(shape) != 3:
                    raise InvalidShapeError(f"Layer '{spec.name}' follows a flattened layer")
                _, h, w = shape
                k = spec.kernel
                if k > h or k > w:
                    raise InvalidShapeError(
                        f"Layer '{spec.name}': kernel {k} is larger than its {h}x{w} input"
                    )
                shape = (spec.channels, (h - k) // spec.stride + 1, (w - k) // spec.stride + 1)
            elif spec.kind == "maxpool":
                if len(shape) != 3:
                    raise InvalidShapeError(f"Layer '{spec.name}' follows a flattened layer")
                c, h, w = shape
                shape = (
                    c,
                    layers.pool_output_size(h, spec.kernel, spec.stride),
                    layers.pool_output_size(w, spec.kernel, spec.stride),
                )
            elif spec.kind == "fc":
                shape = (spec.units,)
            result.append((spec, in_shape, shape))
        return result

    def with_activation(self, activation: str) -> "NetworkConfig":
        data = self.model_dump()
        data["activation"] = activation
        for spec in data["layers"]:
            if spec["kind"] in _CONV_KIND.values():
                spec["kind"] = _CONV_KIND[activation]
        return NetworkConfig.model_validate(data)

    def with_num_classes(self, num_classes: int) -> "NetworkConfig":
        data = self.model_dump()
        data["num_classes"] = num_classes
        data["layers"][-1]["units"] = num_classes
        return NetworkConfig.model_validate(data)

    def to_yaml(self) -> str:
        "YAML form; the classifier width is carried by num_classes alone"
        data = self.model_dump(mode="json", exclude_none=True)
        data["layers"][-1].pop("units", None)
        return yaml.safe_dump(data, sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "NetworkConfig":
        return cls.model_validate(yaml.safe_load(text))


@dataclass(frozen=True)
class ParamSpec:
    name: str
    layer: str
    shape: Shape
    role: DecayRole
    init: Literal["xavier", "gaussian", "zeros"]


def param_specs(config: NetworkConfig) -> List[ParamSpec]:
    "Every tensor a config needs, in declaration order"
    specs = []
    classifier = config.layers[-1].name
    for spec, in_shape, out_shape in config.shapes():
        if spec.is_conv:
            halves = ("_1", "_2") if spec.kind == "conv_pair_mfm" else ("",)
            for half in halves:
                base = spec.name + half
                weight_shape = (spec.channels, in_shape[0], spec.kernel, spec.kernel)
                specs.append(ParamSpec(f"{base}.weight", spec.name, weight_shape, "default", "xavier"))
                specs.append(ParamSpec(f"{base}.bias", spec.name, (spec.channels,), "none", "zeros"))
        elif spec.kind == "fc":
            role: DecayRole = "classifier" if spec.name == classifier else "default"
            weight_shape = (spec.units, math.prod(in_shape))
            specs.append(ParamSpec(f"{spec.name}.weight", spec.name, weight_shape, role, "gaussian"))
            specs.append(ParamSpec(f"{spec.name}.bias", spec.name, (spec.units,), "none", "zeros"))
    return specs


@dataclass
class ModelParams:
    """
    Named weight/bias tensors, each with a weight-decay role, plus the
    config they instantiate. ``config`` may be None for a bare parameter set.
    """

    config: Optional[NetworkConfig]
    tensors: Dict[str, Tensor]
    decay_roles: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.tensors:
            self.decay_roles.setdefault(name, "none" if name.endswith(".bias") else "default")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {name: tensor.copy() for name, tensor in self.tensors.items()},
            dict(self.decay_roles),
        )


def build_network(config: NetworkConfig, rng_seed: int = 0, precision: int = 32) -> ModelParams:
    dtype = dtype_for(precision)
    tensors = {}
    roles = {}
    for spec in param_specs(config):
        seed = derive_seed(rng_seed, spec.name)
        if spec.init == "xavier":
            tensors[spec.name] = init_xavier(spec.shape, seed, dtype)
        elif spec.init == "gaussian":
            tensors[spec.name] = init_gaussian(spec.shape, config.init_std, seed, dtype)
        else:
            tensors[spec.name] = np.zeros(spec.shape, dtype=dtype)
        roles[spec.name] = spec.role
    return ModelParams(config, tensors, roles)


def full_config(num_classes: int = 10575, activation: str = "mfm") -> NetworkConfig:
    conv = _CONV_KIND[activation]
    return NetworkConfig(
        name="full",
        input_size=(144, 144),
        crop_size=(128, 128),
        num_classes=num_classes,
        activation=activation,
        layers=[
            LayerSpec(name="conv1", kind=conv, kernel=9, channels=48),
            LayerSpec(name="pool1", kind="maxpool", kernel=2, stride=2),
            LayerSpec(name="conv2", kind=conv, kernel=5, channels=96),
            LayerSpec(name="pool2", kind="maxpool", kernel=2, stride=2),
            LayerSpec(name="conv3", kind=conv, kernel=5, channels=128),
            LayerSpec(name="pool3", kind="maxpool", kernel=2, stride=2),
            LayerSpec(name="conv4", kind=conv, kernel=4, channels=192),
            LayerSpec(name="pool4", kind="maxpool", kernel=2, stride=2),
            LayerSpec(name="fc1", kind="fc", units=256),
            LayerSpec(name="dropout1", kind="dropout", ratio=0.7),
            LayerSpec(name="fc2", kind="fc"),
        ],
    )


# Training defaults of the toy network
TOY_HYPERPARAMS: Dict[str, Any] = {
    "lr_start": 0.01,
    "lr_end": 0.001,
    "lr_decays": 2,
    "batch_size": 32,
    "max_iters": 3000,
    "eval_interval": 100,
    "log_interval": 50,
}


def toy_config(num_classes: int = 10, activation: str = "mfm") -> NetworkConfig:
    """
    Desk-scale network: 36x36 inputs cropped to 32x32, narrow channels.

    Pixels are centred on 0.5 and fc weights start at std 0.1. The config
    carries its own training defaults.
    """
    conv = _CONV_KIND[activation]
    return NetworkConfig(
        name="toy",
        input_size=(36, 36),
        crop_size=(32, 32),
        num_classes=num_classes,
        activation=activation,
        init_std=0.1,
        input_mean=0.5,
        hyperparams=dict(TOY_HYPERPARAMS),
        layers=[
            LayerSpec(name="conv1", kind=conv, kernel=5, channels=8),
            LayerSpec(name="pool1", kind="maxpool", kernel=2, stride=2),
            LayerSpec(name="conv2", kind=conv, kernel=3, channels=16),
            LayerSpec(name="pool2", kind="maxpool", kernel=2, stride=2),
            LayerSpec(name="conv3", kind=conv, kernel=3, channels=16),
            LayerSpec(name="pool3", kind="maxpool", kernel=2, stride=2),
            LayerSpec(name="fc1", kind="fc", units=64),
            LayerSpec(name="dropout1", kind="dropout", ratio=0.2),
            LayerSpec(name="fc2", kind="fc"),
        ],
    )


def tiny_config(num_classes: int = 4, activation: str = "mfm") -> NetworkConfig:
    "Two conv blocks on 16x16 inputs, small enough for full finite differences"
    conv = _CONV_KIND[activation]
    return NetworkConfig(
        name="tiny",
        input_size=(16, 16),
        crop_size=(16, 16),
        num_classes=num_classes,
        activation=activation,
        layers=[
            LayerSpec(name="conv1", kind=conv, kernel=3, channels=2),
            LayerSpec(name="pool1", kind="maxpool", kernel=2, stride=2),
            LayerSpec(name="conv2", kind=conv, kernel=3, channels=3),
            LayerSpec(name="pool2", kind="maxpool", kernel=2, stride=2),
            LayerSpec(name="fc1", kind="fc", units=6),
            LayerSpec(name="dropout1", kind="dropout", ratio=0.5),
            LayerSpec(name="fc2", kind="fc"),
        ],
    )


def build_full_network(num_classes: int = 10575, activation: str = "mfm", rng_seed: int = 0) -> ModelParams:
    return build_network(full_config(num_classes, activation), rng_seed)


# Forward and backward


@dataclass
class ForwardTrace:
    output: Tensor
    caches: List[Tuple[LayerSpec, Dict[str, Any]]]
    activations: Dict[str, Tensor] = field(default_factory=dict)


def _conv_params(model: ModelParams, base: str, stride: int) -> ConvParams:
    return ConvParams(model[f"{base}.weight"], model[f"{base}.bias"], stride)


def forward(
    model: ModelParams,
    batch: Tensor,
    mode: str = EVAL,
    rng_seed: RngLike = None,
    stop_at: Optional[str] = None,
    keep_activations: bool = False,
    dropout_ratio: Optional[float] = None,
) -> ForwardTrace:
    """
    Run ``batch [N, C, crop_h, crop_w]`` of [0, 1] pixels through the stack,
    after subtracting the config's ``input_mean``.

    ``stop_at`` ends the pass after the named layer, so layers past it are
    never touched. ``dropout_ratio`` overrides the ratio stored in the config.
    """
    config = model.config
    expected = (config.in_channels, *config.crop_size)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise InvalidShapeError(
            f"Network expects input [N, {', '.join(map(str, expected))}], got {list(batch.shape)}"
        )
    rng = layers._as_rng(rng_seed) if mode == layers.TRAIN else None
    x = batch.astype(model.dtype, copy=False)
    if config.input_mean:
        x = x - model.dtype.type(config.input_mean)
    caches: List[Tuple[LayerSpec, Dict[str, Any]]] = []
    activations: Dict[str, Tensor] = {}
    for spec in config.layers:
        cache: Dict[str, LayerCache] = {}
        if spec.kind == "conv_pair_mfm":
            a, cache["conv_1"] = layers.conv2d_forward(x, _conv_params(model, spec.name + "_1", spec.stride))
            b, cache["conv_2"] = layers.conv2d_forward(x, _conv_params(model, spec.name + "_2", spec.stride))
            x, cache["mfm"] = layers.mfm_forward(a, b)
            if keep_activations:
                activations[spec.name + "_1"] = a
                activations[spec.name + "_2"] = b
                activations[spec.activation_name] = x
        elif spec.kind == "relu_conv":
            a, cache["conv"] = layers.conv2d_forward(x, _conv_params(model, spec.name, spec.stride))
            x, cache["relu"] = layers.relu_forward(a)
            if keep_activations:
                activations[spec.name + "_conv"] = a
                activations[spec.activation_name] = x
        elif spec.kind == "maxpool":
            x, cache["pool"] = layers.maxpool_forward(x, spec.kernel, spec.stride)
        elif spec.kind == "fc":
            if x.ndim != 2:
                cache["flatten"] = x.shape  # type: ignore[assignment]
                x = x.reshape(x.shape[0], -1)
            x, cache["fc"] = layers.fc_forward(x, model[f"{spec.name}.weight"], model[f"{spec.name}.bias"])
        elif spec.kind == "dropout":
            ratio = spec.ratio if dropout_ratio is None else dropout_ratio
            x, cache["dropout"] = layers.dropout_forward(x, ratio, mode, rng)
        caches.append((spec, cache))
        if keep_activations:
            activations[spec.name] = x
        if spec.name == stop_at:
            break
    return ForwardTrace(x, caches, activations)


def backward(
    model: ModelParams, grad_out: Tensor, caches: List[Tuple[LayerSpec, Dict[str, Any]]]
) -> Dict[str, Tensor]:
    "Gradients of every parameter touched by the forward pass that produced ``caches``"
    grads: Dict[str, Tensor] = {}
    g = grad_out
    for spec, cache in reversed(caches):
        if spec.kind == "conv_pair_mfm":
            grad_a, grad_b = layers.mfm_backward(g, cache["mfm"])
            gx1, grads[f"{spec.name}_1.weight"], grads[f"{spec.name}_1.bias"] = layers.conv2d_backward(
                grad_a, cache["conv_1"]
            )
            gx2, grads[f"{spec.name}_2.weight"], grads[f"{spec.name}_2.bias"] = layers.conv2d_backward(
                grad_b, cache["conv_2"]
            )
            g = gx1 + gx2
        elif spec.kind == "relu_conv":
            g = layers.relu_backward(g, cache["relu"])
            g, grads[f"{spec.name}.weight"], grads[f"{spec.name}.bias"] = layers.conv2d_backward(g, cache["conv"])
        elif spec.kind == "maxpool":
            g = layers.maxpool_backward(g, cache["pool"])
        elif spec.kind == "fc":
            g, grads[f"{spec.name}.weight"], grads[f"{spec.name}.bias"] = layers.fc_backward(g, cache["fc"])
            if "flatten" in cache:
                g = g.reshape(cache["flatten"])
        elif spec.kind == "dropout":
            g = layers.dropout_backward(g, cache["dropout"])
    return grads


def forward_logits(
    model: ModelParams,
    batch: Tensor,
    mode: str = EVAL,
    rng_seed: RngLike = None,
    dropout_ratio: Optional[float] = None,
) -> Tuple[Tensor, List[Tuple[LayerSpec, Dict[str, Any]]]]:
    trace = forward(model, batch, mode, rng_seed, dropout_ratio=dropout_ratio)
    return trace.output, trace.caches


def extract_embedding(model: ModelParams, batch: Tensor) -> Tensor:
    "Embedding-layer (fc1) activations in eval mode; the classifier is never used"
    return forward(model, batch, EVAL, stop_at=model.config.embedding_layer).output


# Accounting


@dataclass
class ParamCount:
    total: int
    by_layer: Dict[str, int]
    by_tensor: Dict[str, int]


def count_params(model: ModelParams) -> ParamCount:
    layer_of = {spec.name: spec.layer for spec in param_specs(model.config)} if model.config else {}
    by_layer: Dict[str, int] = {}
    by_tensor: Dict[str, int] = {}
    for name, tensor in model.tensors.items():
        by_tensor[name] = int(tensor.size)
        layer = layer_of.get(name, name.rsplit(".", 1)[0])
        by_layer[layer] = by_layer.get(layer, 0) + int(tensor.size)
    return ParamCount(sum(by_tensor.values()), by_layer, by_tensor)


def missing_tensors(model: ModelParams, up_to: Optional[str] = None) -> List[str]:
    "Tensors the config needs (through layer ``up_to``) that the model lacks"
    layer_names = [spec.name for spec in model.config.layers]
    needed = set(layer_names[: layer_names.index(up_to) + 1] if up_to else layer_names)
    return [s.name for s in param_specs(model.config) if s.layer in needed and s.name not in model.tensors]


def count_config_params(config: NetworkConfig) -> int:
    "Closed-form parameter count from the config dimensions alone"
    return sum(math.prod(spec.shape) for spec in param_specs(config))


_TYPE_NAMES = {
    "maxpool": "max pooling",
    "fc": "fully connected",
}


def _size_label(shape: Shape) -> str:
    if len(shape) == 3:
        c, h, w = shape
        return f"{h}x{w}x{c}"
    return str(shape[0])


def layer_table(config: NetworkConfig) -> List[Dict[str, Any]]:
    """
    One row per named layer in the layout of the published architecture
    table: conv halves, activation, pooling and fully connected layers.
    """
    params = {}
    for spec in param_specs(config):
        base = spec.name.rsplit(".", 1)[0]
        params[base] = params.get(base, 0) + math.prod(spec.shape)
    rows = []
    for spec, _, out_shape in config.shapes():
        size = _size_label(out_shape)
        if spec.is_conv:
            halves = ("_1", "_2") if spec.kind == "conv_pair_mfm" else ("",)
            for half in halves:
                rows.append(
                    {
                        "name": spec.name + half,
                        "type": "convolution",
                        "filter": f"{spec.kernel}x{spec.kernel}/{spec.stride}",
                        "output": size,
                        "params": params[spec.name + half],
                    }
                )
            rows.append(
                {
                    "name": spec.activation_name,
                    "type": "MFM" if spec.kind == "conv_pair_mfm" else "ReLU",
                    "filter": "-",
                    "output": size,
                    "params": 0,
                }
            )
        elif spec.kind == "maxpool":
            rows.append(
                {
                    "name": spec.name,
                    "type": _TYPE_NAMES["maxpool"],
                    "filter": f"{spec.kernel}x{spec.kernel}/{spec.stride}",
                    "output": size,
                    "params": 0,
                }
            )
        elif spec.kind == "fc":
            rows.append(
                {
                    "name": spec.name,
                    "type": _TYPE_NAMES["fc"],
                    "filter": "-",
                    "output": size,
                    "params": params[spec.name],
                }
            )
    return rows


# Persistence


def save_model(model: ModelParams, path: Union[str, pathlib.Path]) -> None:
    """
    Write a model file: magic, version, length-prefixed YAML config, then
    every tensor (name, decay role, tensor record) in declaration order.
    """
    config_bytes = model.config.to_yaml().encode("utf-8")
    parts = [
        MODEL_MAGIC,
        struct.pack("<B", MODEL_FORMAT_VERSION),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        struct.pack("<I", len(model.tensors)),
    ]
    for name, tensor in model.tensors.items():
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(name_bytes), _ROLE_CODES[model.decay_roles[name]]))
        parts.append(name_bytes)
        parts.append(encode_tensor(tensor))
    pathlib.Path(path).write_bytes(b"".join(parts))


def _take(buffer: bytes, offset: int, size: int, what: str) -> Tuple[bytes, int]:
    if len(buffer) - offset < size:
        raise TruncatedFileError(f"Model file is truncated in {what}")
    return buffer[offset : offset + size], offset + size


def load_model(path: Union[str, pathlib.Path], strict: bool = True) -> ModelParams:
    """
    Load a model file written by ``save_model``.

    With ``strict=False`` tensors missing from the file are tolerated, for
    example a model stripped of its classifier for embedding extraction.
    """
    buffer = pathlib.Path(path).read_bytes()
    magic, offset = _take(buffer, 0, 4, "header")
    if magic != MODEL_MAGIC:
        raise MagicMismatchError(f"Expected model magic {MODEL_MAGIC!r}, got {magic!r}")
    raw, offset = _take(buffer, offset, 5, "header")
    version, config_length = struct.unpack("<BI", raw)
    if version != MODEL_FORMAT_VERSION:
        raise VersionMismatchError(f"Unsupported model format version {version}")
    config_bytes, offset = _take(buffer, offset, config_length, "config")
    try:
        config = NetworkConfig.from_yaml(config_bytes.decode("utf-8"))
    except (ValidationError, yaml.YAMLError, UnicodeDecodeError) as ex:
        raise TensorFormatError(f"Model file has an invalid config: {ex}")
    raw, offset = _take(buffer, offset, 4, "tensor count")
    (count,) = struct.unpack("<I", raw)

    expected = {spec.name: spec for spec in param_specs(config)}
    tensors: Dict[str, Tensor] = {}
    roles: Dict[str, str] = {}
    for _ in range(count):
        raw, offset = _take(buffer, offset, 3, "tensor name")
        name_length, role_code = struct.unpack("<HB", raw)
        name_bytes, offset = _take(buffer, offset, name_length, "tensor name")
        name = name_bytes.decode("utf-8", errors="replace")
        tensor, offset = decode_tensor(buffer, offset)
        spec = expected.get(name)
        if spec is None:
            raise ShapeInconsistencyError(f"Tensor '{name}' is not part of config '{config.name}'")
        if tensor.shape != spec.shape:
            raise ShapeInconsistencyError(
                f"Tensor '{name}' has shape {list(tensor.shape)}, config expects {list(spec.shape)}"
            )
        tensors[name] = tensor
        roles[name] = _ROLE_NAMES.get(role_code, spec.role)
    if offset != len(buffer):
        raise TensorFormatError("Model file has trailing data")
    missing = [name for name in expected if name not in tensors]
    if strict and missing:
        raise ShapeInconsistencyError("Model file is missing tensors: {}".format(", ".join(missing)))
    return ModelParams(config, tensors, roles)
