"""
Activation comparison: train the MFM and ReLU builds of one config side by
side on the same data order and report aligned validation curves.
"""

import csv
from dataclasses import dataclass, field
import pathlib
from typing import Callable, Dict, List, Optional, Tuple, Union

from .data import DatasetIndex
from .errors import InvalidComparisonError
from .network import NetworkConfig, build_network
from .trainer import HyperParams, IterationRecord, train


@dataclass
class ActivationComparison:
    """Aligned validation-accuracy series of an MFM and a ReLU run."""

    rows: List[Tuple[int, float, float]]
    final_loss: Dict[str, float] = field(default_factory=dict)

    @property
    def iterations(self) -> List[int]:
        return [row[0] for row in self.rows]

    @property
    def crossover_iteration(self) -> Optional[int]:
        "First evaluation from which the MFM curve stays at or above the ReLU curve"
        crossover = None
        for iteration, mfm, relu in self.rows:
            if mfm >= relu:
                if crossover is None:
                    crossover = iteration
            else:
                crossover = None
        return crossover

    def to_dicts(self) -> List[dict]:
        return [
            {"iteration": it, "val_accuracy_mfm": mfm, "val_accuracy_relu": relu}
            for it, mfm, relu in self.rows
        ]

    def write_csv(self, path: Union[str, pathlib.Path]) -> None:
        with open(path, "w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["iteration", "val_accuracy_mfm", "val_accuracy_relu"])
            for iteration, mfm, relu in self.rows:
                writer.writerow([iteration, repr(mfm), repr(relu)])


def check_config_pair(mfm_config: NetworkConfig, relu_config: NetworkConfig) -> None:
    if mfm_config.activation != "mfm" or relu_config.activation != "relu":
        raise InvalidComparisonError(
            f"Expected an mfm and a relu config, got {mfm_config.activation} and {relu_config.activation}"
        )
    expected = mfm_config.with_activation("relu").model_dump(exclude={"name"})
    if relu_config.model_dump(exclude={"name"}) != expected:
        raise InvalidComparisonError(
            f"Configs '{mfm_config.name}' and '{relu_config.name}' differ in more than their activation"
        )


def compare_activations(
    dataset: DatasetIndex,
    config_pair: Tuple[NetworkConfig, NetworkConfig],
    hp: HyperParams,
    threads: int = 1,
    callback: Optional[Callable[[str, IterationRecord], None]] = None,
) -> ActivationComparison:
    """
    Train both configs with identical seeds and hyperparameters. The
    validation history includes an evaluation before the first step.
    """
    mfm_config, relu_config = config_pair
    check_config_pair(mfm_config, relu_config)
    # Both curves cover every evaluation, stop_accuracy is ignored
    hp = hp.model_copy(update={"stop_accuracy": None})
    histories = {}
    final_loss = {}
    for activation, config in (("mfm", mfm_config), ("relu", relu_config)):
        model = build_network(config, hp.seed)
        on_record = None
        if callback is not None:
            on_record = lambda record, activation=activation: callback(activation, record)  # noqa: E731
        _, state = train(model, dataset, hp, on_record, threads=threads, eval_at_start=True)
        histories[activation] = state.val_history
        if state.loss_history:
            final_loss[activation] = state.loss_history[-1][1]
    rows = [
        (it_mfm, acc_mfm, acc_relu)
        for (it_mfm, acc_mfm), (_, acc_relu) in zip(histories["mfm"], histories["relu"])
    ]
    return ActivationComparison(rows, final_loss)
