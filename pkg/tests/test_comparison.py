import csv
import math

from click.testing import CliRunner
import pytest

from mfmnet.cli import cli
from mfmnet.comparison import ActivationComparison, check_config_pair, compare_activations
from mfmnet.data import load_dataset, split_train_val
from mfmnet.errors import InvalidComparisonError
from mfmnet.network import full_config, tiny_config, toy_config
from mfmnet.trainer import HyperParams


def test_check_config_pair():
    check_config_pair(tiny_config(), tiny_config(activation="relu"))
    check_config_pair(full_config(), full_config(activation="relu").model_copy(update={"name": "other"}))
    with pytest.raises(InvalidComparisonError):
        check_config_pair(tiny_config(activation="relu"), tiny_config())
    with pytest.raises(InvalidComparisonError):
        check_config_pair(toy_config(), tiny_config(activation="relu"))
    with pytest.raises(InvalidComparisonError):
        check_config_pair(tiny_config(), tiny_config(num_classes=5, activation="relu"))


@pytest.mark.parametrize(
    "rows,expected",
    (
        ([(0, 0.2, 0.3), (10, 0.5, 0.4), (20, 0.6, 0.5)], 10),
        ([(0, 0.3, 0.3), (10, 0.5, 0.4)], 0),
        ([(0, 0.2, 0.3), (10, 0.5, 0.4), (20, 0.4, 0.5)], None),
        ([], None),
    ),
)
def test_crossover_iteration(rows, expected):
    assert ActivationComparison(rows).crossover_iteration == expected


def test_write_csv(tmp_path):
    comparison = ActivationComparison([(0, 0.25, 0.25), (5, 0.5, 0.75)])
    path = tmp_path / "compare.csv"
    comparison.write_csv(path)
    with open(path) as fp:
        rows = list(csv.DictReader(fp))
    assert rows == [
        {"iteration": "0", "val_accuracy_mfm": "0.25", "val_accuracy_relu": "0.25"},
        {"iteration": "5", "val_accuracy_mfm": "0.5", "val_accuracy_relu": "0.75"},
    ]


def test_compare_activations(tiny_dataset):
    dataset = split_train_val(load_dataset(tiny_dataset), rng_seed=0)
    hp = HyperParams(max_iters=10, eval_interval=5, batch_size=4, lr_start=0.01, lr_end=0.01)
    seen = []
    comparison = compare_activations(
        dataset,
        (tiny_config(), tiny_config(activation="relu")),
        hp,
        callback=lambda activation, record: seen.append((activation, record.iteration)),
    )
    assert comparison.iterations == [0, 5, 10]
    assert all(0.0 <= acc <= 1.0 for _, mfm, relu in comparison.rows for acc in (mfm, relu))
    assert set(comparison.final_loss) == {"mfm", "relu"}
    assert seen[:2] == [("mfm", 1), ("mfm", 2)]
    assert seen[-1] == ("relu", 10)
    assert len(seen) == 20


def test_compare_cli(tmp_path, tiny_dataset):
    runner = CliRunner(mix_stderr=False)
    args = ["compare", "--data", str(tiny_dataset), "-c", "tiny"]
    args += ["-o", "max_iters", "4", "-o", "eval_interval", "2", "-o", "batch_size", "4"]
    result = runner.invoke(cli, args)
    assert result.exit_code == 0, result.stderr
    lines = result.stdout.splitlines()
    assert lines[0] == "iteration,val_accuracy_mfm,val_accuracy_relu"
    assert [line.split(",")[0] for line in lines[1:]] == ["0", "2", "4"]
    assert "relu iteration=4 val_accuracy=" in result.stderr

    out = tmp_path / "compare.csv"
    result = runner.invoke(cli, args + ["--out", str(out), "-q"])
    assert result.exit_code == 0
    assert result.stdout == ""
    assert out.read_text().splitlines() == lines
    assert "MFM curve" in result.stderr


def test_compare_ignores_stop_accuracy(tiny_dataset):
    dataset = split_train_val(load_dataset(tiny_dataset), rng_seed=0)
    hp = HyperParams(max_iters=6, eval_interval=2, batch_size=4, stop_accuracy=1e-6)
    comparison = compare_activations(dataset, (tiny_config(), tiny_config(activation="relu")), hp)
    assert comparison.iterations == [0, 2, 4, 6]


def test_compare_activations_learns_ten_identities(ten_identity_dataset):
    dataset = split_train_val(load_dataset(ten_identity_dataset), rng_seed=0)
    n_val = len(dataset.val_samples())
    # Constant rate so the shortened run does not decay early
    hp = HyperParams.for_config(toy_config(), max_iters=1000, eval_interval=250, lr_end=0.01)
    comparison = compare_activations(dataset, (toy_config(), toy_config(activation="relu")), hp)
    assert comparison.iterations == [0, 250, 500, 750, 1000]
    chance = 1 / 10
    band = 3 * math.sqrt(chance * (1 - chance) / n_val)
    _, mfm_start, relu_start = comparison.rows[0]
    assert abs(mfm_start - chance) <= band
    assert abs(relu_start - chance) <= band
    _, mfm_end, relu_end = comparison.rows[-1]
    assert mfm_end >= 0.9
    assert relu_end >= 0.9
