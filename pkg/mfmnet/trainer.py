"""
Mini-batch SGD with momentum, step learning-rate decay, per-role weight
decay and periodic validation.
"""

from dataclasses import dataclass, field
import queue
import threading
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import layers
from .data import DatasetIndex, load_images
from .errors import InvalidInputError, InvalidParameterError, InvalidShapeError, NumericDivergenceError
from .layers import EVAL, TRAIN
from .network import ModelParams, NetworkConfig, backward, forward_logits
from .tensor import Tensor, derive_seed, make_rng

# Iteration count of the full-scale regime
FULL_SCALE_MAX_ITERS = 2_000_000


class HyperParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr_start: float = Field(default=1e-3, gt=0, description="Initial learning rate")
    lr_end: float = Field(default=5e-5, gt=0, description="Final learning rate plateau")
    lr_gamma: Optional[float] = Field(
        default=None, gt=0, lt=1, description="Decay factor per step, derived from lr_end when unset"
    )
    lr_step_size: Optional[int] = Field(
        default=None, ge=1, description="Iterations between decays, derived from max_iters when unset"
    )
    lr_decays: int = Field(default=4, ge=1, description="Decay steps used to derive gamma and step size")
    momentum: float = Field(default=0.9, ge=0, lt=1)
    wd_default: float = Field(default=5e-4, ge=0, description="Weight decay for weights")
    wd_fc2: float = Field(default=5e-3, ge=0, description="Weight decay for classifier weights")
    dropout: Optional[float] = Field(
        default=None, ge=0, lt=1, description="Dropout ratio, the config's own ratio when unset"
    )
    batch_size: int = Field(default=64, ge=1)
    max_iters: int = Field(default=20_000, ge=1, description=f"Training iterations, {FULL_SCALE_MAX_ITERS:,} at full scale")
    eval_interval: int = Field(default=500, ge=1)
    log_interval: int = Field(default=100, ge=1)
    checkpoint_interval: Optional[int] = Field(default=None, ge=1)
    prefetch: int = Field(default=0, ge=0, description="Batches prepared ahead by a loader thread")
    stop_accuracy: Optional[float] = Field(
        default=None, gt=0, le=1, description="Stop once validation accuracy reaches this value"
    )
    seed: int = 0

    @model_validator(mode="after")
    def _check_lr_range(self):
        if self.lr_end > self.lr_start:
            raise ValueError(f"lr_end ({self.lr_end}) must not exceed lr_start ({self.lr_start})")
        return self

    @classmethod
    def for_config(cls, config: NetworkConfig, **overrides) -> "HyperParams":
        "The config's own training defaults, then ``overrides``"
        return cls(**{**config.hyperparams, **overrides})


def _step_schedule(hp: HyperParams) -> Tuple[int, int]:
    decays = min(hp.lr_decays, hp.max_iters)
    step_size = hp.lr_step_size or max(1, hp.max_iters // (decays + 1))
    return decays, step_size


def lr_at(iteration: int, hp: HyperParams) -> float:
    """
    Piecewise-constant step decay, clipped below at ``lr_end``.

    Without an explicit ``lr_gamma`` the rate drops ``lr_decays`` times by
    ``(lr_end / lr_start) ** (1 / lr_decays)`` and the last plateau is exactly
    ``lr_end``.
    """
    if not 0 <= iteration <= hp.max_iters:
        raise InvalidParameterError(f"Iteration {iteration} is outside [0, {hp.max_iters}]")
    decays, step_size = _step_schedule(hp)
    k = iteration // step_size
    if hp.lr_gamma is None:
        if k >= decays:
            return hp.lr_end
        gamma = (hp.lr_end / hp.lr_start) ** (1.0 / decays)
    else:
        gamma = hp.lr_gamma
    return max(hp.lr_start * gamma**k, hp.lr_end)


def decay_for(role: str, hp: HyperParams) -> float:
    if role == "classifier":
        return hp.wd_fc2
    if role == "default":
        return hp.wd_default
    return 0.0


@dataclass
class TrainState:
    iteration: int = 0
    velocity: Dict[str, Tensor] = field(default_factory=dict)
    running_loss: Optional[float] = None
    loss_history: List[Tuple[int, float]] = field(default_factory=list)
    val_history: List[Tuple[int, float]] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    rng: Optional[np.random.Generator] = field(default=None, repr=False)

    @classmethod
    def create(cls, model: ModelParams, seed: int = 0) -> "TrainState":
        return cls(
            velocity={name: np.zeros_like(t) for name, t in model.tensors.items()},
            rng=make_rng(derive_seed(seed, "dropout")),
        )


def sgd_step(
    model: ModelParams,
    grads: Dict[str, Tensor],
    state: TrainState,
    hp: HyperParams,
    lr: Optional[float] = None,
) -> None:
    "``v = momentum * v - lr * (g + wd * w)`` then ``w = w + v``, in place"
    if lr is None:
        lr = lr_at(min(state.iteration, hp.max_iters), hp)
    for name, weights in model.tensors.items():
        if name not in grads:
            raise InvalidShapeError(f"No gradient for parameter '{name}'")
        grad = grads[name]
        if grad.shape != weights.shape:
            raise InvalidShapeError(
                f"Gradient for '{name}' has shape {list(grad.shape)}, parameter is {list(weights.shape)}"
            )
        if not np.all(np.isfinite(grad)):
            raise NumericDivergenceError(f"Non-finite gradient for '{name}'", name)
    for name, weights in model.tensors.items():
        wd = decay_for(model.decay_roles[name], hp)
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = state.velocity[name] = np.zeros_like(weights)
        velocity *= hp.momentum
        velocity -= lr * (grads[name] + wd * weights)
        weights += velocity
    state.iteration += 1


# Batches


@dataclass
class Batch:
    images: Tensor
    labels: np.ndarray
    epoch: int
    epoch_end: bool


class BatchStream:
    """
    Endless stream of augmented training batches.

    Every epoch visits the samples in a fresh seeded permutation. With
    ``prefetch > 0`` a single loader thread fills a bounded queue; the batch
    sequence is the same as the synchronous one.
    """

    def __init__(
        self,
        images: Tensor,
        labels: np.ndarray,
        batch_size: int,
        crop_size: Tuple[int, int],
        seed: int,
        prefetch: int = 0,
    ):
        self.images = images
        self.labels = labels
        self.batch_size = min(batch_size, len(labels))
        self.crop_size = crop_size
        self.seed = seed
        self.prefetch = prefetch
        self._stop = threading.Event()
        self._queue: "queue.Queue[Batch]" = queue.Queue(maxsize=max(1, prefetch))
        self._thread: Optional[threading.Thread] = None
        self._error: Optional[BaseException] = None

    def _batches(self) -> Iterator[Batch]:
        order_rng = make_rng(derive_seed(self.seed, "order"))
        augment_rng = make_rng(derive_seed(self.seed, "augment"))
        epoch = 0
        while True:
            order = order_rng.permutation(len(self.labels))
            for start in range(0, len(order), self.batch_size):
                indices = order[start : start + self.batch_size]
                images = layers.crop_mirror_batch(
                    self.images[indices], TRAIN, augment_rng, self.crop_size
                )
                yield Batch(images, self.labels[indices], epoch, start + self.batch_size >= len(order))
            epoch += 1

    def _produce(self):
        try:
            for batch in self._batches():
                while not self._stop.is_set():
                    try:
                        self._queue.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except BaseException as ex:
            self._error = ex

    def __iter__(self) -> Iterator[Batch]:
        if self.prefetch == 0:
            yield from self._batches()
            return
        self._thread = threading.Thread(target=self._produce, daemon=True)
        self._thread.start()
        try:
            while True:
                try:
                    yield self._queue.get(timeout=0.1)
                except queue.Empty:
                    if self._error is not None:
                        raise self._error
                    if not self._thread.is_alive():
                        return
        finally:
            self.close()

    def close(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()


# Training loop


@dataclass
class IterationRecord:
    iteration: int
    lr: float
    train_loss: float
    val_accuracy: Optional[float] = None


def validate(model: ModelParams, images: Tensor, labels, batch_size: int = 256) -> float:
    """
    Top-1 accuracy of eval-mode predictions on centre crops of
    ``images [M, C, H, W]`` at the config input size.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InvalidInputError("Validation split is empty")
    config = model.config
    correct = 0
    for start in range(0, len(labels), batch_size):
        chunk = images[start : start + batch_size]
        crops = layers.crop_mirror_batch(chunk, EVAL, None, config.crop_size, config.input_size)
        logits, _ = forward_logits(model, crops, EVAL)
        correct += int(np.count_nonzero(logits.argmax(axis=1) == labels[start : start + batch_size]))
    return correct / len(labels)


def validate_split(model: ModelParams, dataset: DatasetIndex, threads: int = 1) -> float:
    samples = dataset.val_samples()
    if not samples:
        raise InvalidInputError("Validation split is empty")
    images = load_images(samples, model.config.input_size, threads)
    return validate(model, images.astype(model.dtype), [s.identity for s in samples])


def train(
    model: ModelParams,
    dataset: DatasetIndex,
    hp: HyperParams,
    callback: Optional[Callable[[IterationRecord], None]] = None,
    threads: int = 1,
    eval_at_start: bool = False,
) -> Tuple[ModelParams, TrainState]:
    """
    Run ``hp.max_iters`` SGD steps on the train split of ``dataset``, updating
    ``model`` in place. Validation accuracy is recorded every
    ``hp.eval_interval`` iterations when the dataset has a validation split;
    with ``hp.stop_accuracy`` set, training ends at the first evaluation that
    reaches it.
    """
    config = model.config
    train_samples = dataset.train_samples()
    if not train_samples:
        raise InvalidInputError("Training split is empty")
    if dataset.num_identities > config.num_classes:
        raise InvalidInputError(
            f"Dataset has {dataset.num_identities} identities but the network has {config.num_classes} classes"
        )
    dtype = model.dtype
    images = load_images(train_samples, config.input_size, threads).astype(dtype)
    labels = np.array([s.identity for s in train_samples], dtype=np.int64)
    val_samples = dataset.val_samples()
    val_images = load_images(val_samples, config.input_size, threads).astype(dtype)
    val_labels = np.array([s.identity for s in val_samples], dtype=np.int64)

    state = TrainState.create(model, hp.seed)
    if eval_at_start and len(val_labels):
        state.val_history.append((0, validate(model, val_images, val_labels)))

    stream = BatchStream(images, labels, hp.batch_size, config.crop_size, derive_seed(hp.seed, "data"), hp.prefetch)
    epoch_loss, epoch_samples = 0.0, 0
    batches = iter(stream)
    try:
        for iteration in range(hp.max_iters):
            batch = next(batches)
            lr = lr_at(iteration, hp)
            logits, caches = forward_logits(model, batch.images, TRAIN, state.rng, dropout_ratio=hp.dropout)
            loss, grad = layers.softmax_xent(logits, batch.labels)
            if not np.isfinite(loss):
                raise NumericDivergenceError(f"Loss became {loss} at iteration {iteration + 1}", "loss")
            sgd_step(model, backward(model, grad, caches), state, hp, lr=lr)

            state.running_loss = loss if state.running_loss is None else 0.9 * state.running_loss + 0.1 * loss
            state.loss_history.append((state.iteration, loss))
            epoch_loss += loss * len(batch.labels)
            epoch_samples += len(batch.labels)
            if batch.epoch_end:
                state.epoch_losses.append(epoch_loss / epoch_samples)
                epoch_loss, epoch_samples = 0.0, 0

            accuracy = None
            if len(val_labels) and state.iteration % hp.eval_interval == 0:
                accuracy = validate(model, val_images, val_labels)
                state.val_history.append((state.iteration, accuracy))
            if callback is not None:
                callback(IterationRecord(state.iteration, lr, loss, accuracy))
            if accuracy is not None and hp.stop_accuracy is not None and accuracy >= hp.stop_accuracy:
                break
    finally:
        stream.close()
    return model, state


# Relative and absolute slack, in nats, before an epoch counts as a loss increase
EPOCH_LOSS_RTOL = 0.05
EPOCH_LOSS_ATOL = 0.02


def epoch_loss_violations(
    epoch_losses: List[float], rtol: float = EPOCH_LOSS_RTOL, atol: float = EPOCH_LOSS_ATOL
) -> int:
    """
    Epochs whose mean training loss rises above the previous epoch's by more
    than ``max(atol, rtol * previous)``.
    """
    return sum(
        1 for previous, current in zip(epoch_losses, epoch_losses[1:]) if current - previous > max(atol, rtol * previous)
    )
