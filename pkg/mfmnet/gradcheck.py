"""
Finite-difference checks of every hand-written backward pass.

Each layer check projects the layer output on a fixed random tensor ``R``
(loss ``sum(out * R)``), so the analytic gradient is the backward pass fed
with ``R``. Inputs of piecewise-linear layers are kept at least
``max(1e-4, 10 * h)`` away from their kinks.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import layers
from .data import parallel_map
from .layers import EVAL, TRAIN, ConvParams
from .network import NetworkConfig, backward, build_network, forward, tiny_config
from .tensor import Tensor, derive_seed, dtype_for, make_rng

STEP = {64: 1e-6, 32: 1e-2}
LAYER_THRESHOLD = {64: 1e-5, 32: 1e-2}
NETWORK_THRESHOLD = {64: 1e-4, 32: 1e-2}
# Larger tensors are checked on a seeded sample of entries
MAX_ENTRIES = 256
SAMPLED_ENTRIES = 64


@dataclass
class GradcheckResult:
    layer: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.threshold)


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(
    loss_fn: Callable[[], float], x: Tensor, h: float, entries: Optional[np.ndarray] = None
) -> np.ndarray:
    """
    Central differences of ``loss_fn`` with respect to ``x``, which is
    perturbed in place and restored. Returns the flat gradient at ``entries``
    (all entries by default).
    """
    if entries is None:
        entries = np.arange(x.size)
    grad = np.zeros(len(entries))
    flat = x.reshape(-1)
    for j, i in enumerate(entries):
        original = flat[i]
        flat[i] = original + h
        plus = loss_fn()
        flat[i] = original - h
        minus = loss_fn()
        flat[i] = original
        grad[j] = (plus - minus) / (2 * h)
    return grad


def _projection(out: Tensor, r: np.ndarray) -> float:
    return float(np.sum(out.astype(np.float64) * r))


class _Checker:
    def __init__(self, precision: int, seed: int):
        self.precision = precision
        self.dtype = dtype_for(precision)
        self.h = STEP[precision]
        self.margin = max(1e-4, 10 * self.h)
        self.seed = seed

    def rng(self, name: str) -> np.random.Generator:
        return make_rng(derive_seed(self.seed, "gradcheck", name))

    def normal(self, rng, shape) -> Tensor:
        return rng.standard_normal(shape).astype(self.dtype)

    def away_from_zero(self, rng, shape) -> Tensor:
        magnitude = rng.uniform(self.margin, 1.0, shape)
        sign = rng.choice([-1.0, 1.0], shape)
        return (magnitude * sign).astype(self.dtype)

    def compare(self, loss_fn, tensors: Dict[str, Tensor], analytic: Dict[str, Tensor], rng) -> float:
        worst = 0.0
        for name, tensor in tensors.items():
            entries = None
            if tensor.size > MAX_ENTRIES:
                entries = np.sort(rng.choice(tensor.size, SAMPLED_ENTRIES, replace=False))
            numeric = numerical_gradient(loss_fn, tensor, self.h, entries)
            expected = np.asarray(analytic[name]).reshape(-1)
            if entries is not None:
                expected = expected[entries]
            worst = max(worst, relative_error(expected, numeric))
        return worst

    # One method per layer kind, each returning the worst relative error

    def conv(self) -> float:
        rng = self.rng("conv")
        worst = 0.0
        for stride, size in ((1, 6), (2, 7)):
            x = self.normal(rng, (2, 2, size, size))
            w = self.normal(rng, (3, 2, 3, 3))
            b = self.normal(rng, (3,))
            out, cache = layers.conv2d_forward(x, ConvParams(w, b, stride))
            r = rng.standard_normal(out.shape)
            gx, gw, gb = layers.conv2d_backward(r.astype(self.dtype), cache)

            def loss(x=x, w=w, b=b, stride=stride, r=r):
                return _projection(layers.conv2d_forward(x, ConvParams(w, b, stride))[0], r)

            worst = max(worst, self.compare(loss, {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}, rng))
        return worst

    def mfm(self) -> float:
        rng = self.rng("mfm")
        a = self.normal(rng, (2, 3, 4, 4))
        b = (a + self.away_from_zero(rng, a.shape)).astype(self.dtype)
        out, cache = layers.mfm_forward(a, b)
        r = rng.standard_normal(out.shape)
        ga, gb = layers.mfm_backward(r.astype(self.dtype), cache)
        return self.compare(
            lambda: _projection(layers.mfm_forward(a, b)[0], r), {"a": a, "b": b}, {"a": ga, "b": gb}, rng
        )

    def relu(self) -> float:
        rng = self.rng("relu")
        x = self.away_from_zero(rng, (2, 3, 4, 4))
        out, cache = layers.relu_forward(x)
        r = rng.standard_normal(out.shape)
        gx = layers.relu_backward(r.astype(self.dtype), cache)
        return self.compare(lambda: _projection(layers.relu_forward(x)[0], r), {"x": x}, {"x": gx}, rng)

    def maxpool(self) -> float:
        rng = self.rng("maxpool")
        worst = 0.0
        for k, stride in ((2, 2), (3, 2)):
            shape = (2, 2, 7, 7)
            # Distinct values spaced well apart keep every window's winner stable
            spacing = max(0.1, 10 * self.h)
            x = (rng.permutation(int(np.prod(shape))).reshape(shape) * spacing).astype(self.dtype)
            out, cache = layers.maxpool_forward(x, k, stride)
            r = rng.standard_normal(out.shape)
            gx = layers.maxpool_backward(r.astype(self.dtype), cache)

            def loss(x=x, k=k, stride=stride, r=r):
                return _projection(layers.maxpool_forward(x, k, stride)[0], r)

            worst = max(worst, self.compare(loss, {"x": x}, {"x": gx}, rng))
        return worst

    def fc(self) -> float:
        rng = self.rng("fc")
        x = self.normal(rng, (3, 5))
        w = self.normal(rng, (4, 5))
        b = self.normal(rng, (4,))
        out, cache = layers.fc_forward(x, w, b)
        r = rng.standard_normal(out.shape)
        gx, gw, gb = layers.fc_backward(r.astype(self.dtype), cache)
        return self.compare(
            lambda: _projection(layers.fc_forward(x, w, b)[0], r),
            {"x": x, "w": w, "b": b},
            {"x": gx, "w": gw, "b": gb},
            rng,
        )

    def dropout(self) -> float:
        rng = self.rng("dropout")
        x = self.normal(rng, (4, 6))
        mask_seed = derive_seed(self.seed, "gradcheck", "dropout-mask")
        out, cache = layers.dropout_forward(x, 0.5, TRAIN, mask_seed)
        r = rng.standard_normal(out.shape)
        gx = layers.dropout_backward(r.astype(self.dtype), cache)
        return self.compare(
            lambda: _projection(layers.dropout_forward(x, 0.5, TRAIN, mask_seed)[0], r), {"x": x}, {"x": gx}, rng
        )

    def softmax_xent(self) -> float:
        rng = self.rng("softmax_xent")
        logits = self.normal(rng, (4, 5))
        labels = rng.integers(0, 5, size=4)
        _, grad = layers.softmax_xent(logits, labels)
        return self.compare(
            lambda: layers.softmax_xent(logits, labels)[0], {"logits": logits}, {"logits": grad}, rng
        )

    def network(self, config: NetworkConfig) -> float:
        rng = self.rng("network")
        model = build_network(config, derive_seed(self.seed, "gradcheck", "model"), self.precision)
        batch = rng.uniform(0.0, 1.0, (2, config.in_channels, *config.crop_size)).astype(self.dtype)
        labels = rng.integers(0, config.num_classes, size=2)
        trace = forward(model, batch, EVAL)
        _, grad = layers.softmax_xent(trace.output, labels)
        analytic = backward(model, grad, trace.caches)

        def loss():
            return layers.softmax_xent(forward(model, batch, EVAL).output, labels)[0]

        return self.compare(loss, model.tensors, analytic, rng)


LAYER_CHECKS = ("conv", "mfm", "relu", "maxpool", "fc", "dropout", "softmax_xent")


def run_gradcheck(
    precision: int = 64, seed: int = 0, config: Optional[NetworkConfig] = None, threads: int = 1
) -> List[GradcheckResult]:
    """
    Check every layer kind and then a whole network (the tiny config unless
    ``config`` is given) in eval mode. Checks are independent and may run on
    ``threads`` workers; results do not depend on the thread count.
    """
    checker = _Checker(precision, seed)
    config = config or tiny_config()

    def check(name: str) -> GradcheckResult:
        if name == "network":
            return GradcheckResult(name, checker.network(config), NETWORK_THRESHOLD[precision])
        return GradcheckResult(name, getattr(checker, name)(), LAYER_THRESHOLD[precision])

    return parallel_map(check, [*LAYER_CHECKS, "network"], threads)


@dataclass
class SparsityRow:
    layer: str
    activation_sparsity: float
    gradient_sparsity: float


def sparsity_report(
    config: Optional[NetworkConfig] = None, seed: int = 0, precision: int = 64, batch_size: int = 4
) -> List[SparsityRow]:
    """
    For every conv activation of a freshly built network: the fraction of
    exact zeros in its output and the fraction of its inputs that receive no
    gradient. MFM passes dense activations and sparse gradients (one half of
    each pair), ReLU zeroes both on the same entries.
    """
    config = config or tiny_config()
    dtype = dtype_for(precision)
    model = build_network(config, derive_seed(seed, "sparsity", "model"), precision)
    rng = make_rng(derive_seed(seed, "sparsity", "batch"))
    batch = rng.uniform(0.0, 1.0, (batch_size, config.in_channels, *config.crop_size)).astype(dtype)
    trace = forward(model, batch, EVAL, keep_activations=True)
    rows = []
    for spec, cache in trace.caches:
        if not spec.is_conv:
            continue
        out = trace.activations[spec.activation_name]
        upstream = np.ones_like(out)
        if spec.kind == "conv_pair_mfm":
            grad_sparsity = layers.gradient_sparsity(*layers.mfm_backward(upstream, cache["mfm"]))
        else:
            grad_sparsity = layers.activation_sparsity(layers.relu_backward(upstream, cache["relu"]))
        rows.append(SparsityRow(spec.activation_name, layers.activation_sparsity(out), grad_sparsity))
    return rows
